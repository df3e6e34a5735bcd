#include "txnf/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "txnf/checkpoint.hpp"
#include "txnf/error.hpp"

namespace txnf {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ordered_json opt_json(const std::optional<double>& x) { return x ? ordered_json(*x) : ordered_json(nullptr); }

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

std::string opt_num(const std::optional<double>& x) { return x ? num(*x) : std::string(); }

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::optional<double> prec_at_1(std::span<const std::int64_t> predicted, std::span<const std::int64_t> truth) {
  if (predicted.size() != truth.size()) throw Error("prec_at_1: length mismatch");
  if (truth.empty()) return std::nullopt;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

std::vector<std::int64_t> row_argmax(const Mat<float>& logits) {
  std::vector<std::int64_t> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

std::optional<double> smape(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size()) throw Error("smape: length mismatch");
  if (truth.empty()) return std::nullopt;
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double den = std::abs(predicted[i]) + std::abs(truth[i]);
    if (den > 0.0) total += 2.0 * std::abs(predicted[i] - truth[i]) / den;
  }
  return total / static_cast<double>(truth.size());
}

std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw Error("roc_auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        pos += 1.0;
        rank_sum += midrank;
      }
    }
    i = j;
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) return std::nullopt;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

ordered_json MetricReport::to_json() const {
  ordered_json j;
  ordered_json p = ordered_json::object(), s = ordered_json::object();
  for (const auto& [k, v] : prec_at_1) p[k] = opt_json(v);
  for (const auto& [k, v] : smape) s[k] = opt_json(v);
  j["prec_at_1"] = std::move(p);
  j["smape"] = std::move(s);
  j["auc"] = opt_json(auc);
  j["pivot"] = pivot;
  j["next_positions"] = next_positions;
  j["signal_positions"] = signal_positions;
  j["pivot_positives"] = pivot_positives;
  return j;
}

MetricReport evaluate(Model<float>& model, const std::vector<CardSequence>& seqs, const EvalOptions& options) {
  if (options.batch_size < 1) throw ValidationError("eval.batch_size", "must be >= 1");
  const Schema& schema = model.schema();
  const Layout& L = schema.layout();
  MetricReport report;
  const Target* pivot = nullptr;
  std::int64_t positive = -1;
  if (L.pivot >= 0) {
    report.pivot = schema.attributes()[static_cast<std::size_t>(L.pivot)].name;
    for (const auto& t : model.current_targets()) {
      if (t.attribute == L.pivot) pivot = &t;
    }
    const Vocabulary& v = schema.vocabulary(report.pivot);
    if (!v.contains(options.positive_token)) {
      throw ValidationError("eval.positive_token", "'" + options.positive_token + "' is not in the pivot vocabulary");
    }
    positive = v.lookup(options.positive_token);
  }

  std::map<std::string, std::vector<std::int64_t>> pred_cat, true_cat;
  std::map<std::string, std::vector<double>> pred_num, true_num;
  std::vector<double> scores;
  std::vector<std::uint8_t> flags;

  for (const Batch& b : batch_in_order(seqs, schema, options.batch_size)) {
    Graph<float> g(false);
    const auto out = model.forward(g, b);
    const std::size_t rows = b.rows();
    for (const auto& t : model.next_targets()) {
      if (t.kind == Kind::kNumerical) {
        const Mat<float>& mu = g.value(out.next.mu);
        auto& p = pred_num[t.name];
        auto& y = true_num[t.name];
        for (std::size_t r = 0; r < rows; ++r) {
          if (!b.next_mask[r]) continue;
          p.push_back(std::exp(static_cast<double>(mu(Eigen::Index(r), t.slot))));
          y.push_back(b.next_num[r * static_cast<std::size_t>(b.widths.dyn_num) + static_cast<std::size_t>(t.column)]);
        }
      } else {
        const auto argmax = row_argmax(g.value(model.logits(g, out.next.vecs[static_cast<std::size_t>(t.slot)], t.name)));
        auto& p = pred_cat[t.name];
        auto& y = true_cat[t.name];
        for (std::size_t r = 0; r < rows; ++r) {
          if (!b.next_mask[r]) continue;
          p.push_back(argmax[r]);
          y.push_back(b.next_cat[r * static_cast<std::size_t>(b.widths.dyn_cat) + static_cast<std::size_t>(t.column)]);
        }
      }
    }
    for (std::size_t r = 0; r < rows; ++r) {
      report.next_positions += b.next_mask[r];
      report.signal_positions += b.scored[r];
    }
    if (pivot) {
      const Mat<float>& z = g.value(model.logits(g, out.current.vecs[static_cast<std::size_t>(pivot->slot)], pivot->name));
      for (std::size_t r = 0; r < rows; ++r) {
        if (!b.scored[r]) continue;
        const auto row = z.row(Eigen::Index(r)).cast<double>();
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        scores.push_back(std::exp(row(Eigen::Index(positive)) - lse));
        flags.push_back(b.sig_cat[r * static_cast<std::size_t>(b.widths.sig_cat) + static_cast<std::size_t>(pivot->column)] ==
                        positive);
      }
    }
  }
  for (const auto& t : model.next_targets()) {
    if (t.kind == Kind::kNumerical) report.smape[t.name] = smape(pred_num[t.name], true_num[t.name]);
    else report.prec_at_1[t.name] = prec_at_1(pred_cat[t.name], true_cat[t.name]);
  }
  if (pivot) {
    report.auc = roc_auc(scores, flags);
    report.pivot_positives = std::count(flags.begin(), flags.end(), std::uint8_t{1});
  }
  return report;
}

// ---------------------------------------------------------------------------

void BenchmarkConfig::validate() const {
  if (batch < 1) throw ValidationError("bench.batch", "must be >= 1");
  if (steps < 1) throw ValidationError("bench.steps", "must be >= 1");
  if (dim < 1) throw ValidationError("bench.dim", "must be >= 1");
  if (cardinality < 2) throw ValidationError("bench.cardinality", "must be >= 2");
  if (strategies.empty()) throw ValidationError("bench.strategies", "must not be empty");
  if (n_negatives.empty()) throw ValidationError("bench.n_negatives", "must not be empty");
  for (auto n : n_negatives) {
    if (n < 0) throw ValidationError("bench.n_negatives", "must be >= 0");
  }
  if (cap_elements < 1) throw ValidationError("bench.cap_elements", "must be >= 1");
}

ordered_json BenchmarkConfig::to_json() const {
  ordered_json s = ordered_json::array();
  for (auto x : strategies) s.push_back(to_string(x));
  return {{"batch", batch},           {"steps", steps},   {"dim", dim},
          {"cardinality", cardinality}, {"strategies", s}, {"n_negatives", n_negatives},
          {"cap_elements", cap_elements}, {"seed", seed}};
}

BenchmarkConfig BenchmarkConfig::from_json(const json& j) {
  BenchmarkConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "batch") c.batch = v.get<int>();
      else if (key == "steps") c.steps = v.get<int>();
      else if (key == "dim") c.dim = v.get<int>();
      else if (key == "cardinality") c.cardinality = v.get<std::int64_t>();
      else if (key == "strategies") {
        c.strategies.clear();
        for (const auto& s : v) c.strategies.push_back(negative_strategy_from(s.get<std::string>()));
      } else if (key == "n_negatives") c.n_negatives = v.get<std::vector<std::int64_t>>();
      else if (key == "cap_elements") c.cap_elements = v.get<std::int64_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ValidationError("bench." + key, "unknown field");
    } catch (const json::exception& e) {
      throw ValidationError("bench." + key, e.what());
    }
  }
  c.validate();
  return c;
}

LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("fit_line: need at least two aligned points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw Error("fit_line: x values are all equal");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.slope * x[i] + f.intercept);
    ss_res += e * e;
  }
  f.r2 = syy == 0.0 ? 1.0 : 1.0 - ss_res / syy;
  return f;
}

const BenchmarkRow* BenchmarkReport::find(NegativeStrategy s, std::int64_t n) const {
  for (const auto& r : rows) {
    if (r.strategy == s && r.n_negative == n) return &r;
  }
  return nullptr;
}

LinearFit BenchmarkReport::fit(NegativeStrategy s) const {
  std::vector<double> x, y;
  for (const auto& r : rows) {
    if (r.strategy != s || r.exceeded) continue;
    x.push_back(static_cast<double>(r.n_negative));
    y.push_back(static_cast<double>(r.forward_elements + r.backward_elements));
  }
  return fit_line(x, y);
}

ordered_json BenchmarkReport::to_json() const {
  ordered_json rs = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json j{{"strategy", to_string(r.strategy)},
                   {"n_negative", r.n_negative},
                   {"status", r.exceeded ? "exceeded" : "ok"},
                   {"forward_elements", r.forward_elements},
                   {"backward_elements", r.backward_elements},
                   {"analytic_forward", r.analytic_forward},
                   {"analytic_backward", r.analytic_backward}};
    if (!r.exceeded) {
      j["peak_heap_bytes"] = r.peak_heap_bytes;
      j["forward_ms"] = r.forward_ms;
      j["backward_ms"] = r.backward_ms;
      j["loss"] = r.loss;
    }
    rs.push_back(std::move(j));
  }
  return {{"config", config.to_json()}, {"rows", rs}};
}

std::string BenchmarkReport::to_csv() const {
  std::ostringstream out;
  out << "strategy,n_negative,pass,elements,analytic_elements,peak_heap_bytes,ms,status\n";
  for (const auto& r : rows) {
    const std::pair<const char*, bool> passes[] = {{"forward", false}, {"backward", true}};
    for (auto [pass, bwd] : passes) {
      out << to_string(r.strategy) << ',' << r.n_negative << ',' << pass << ',';
      if (r.exceeded) {
        out << ",," << "," << ",exceeded\n";
        continue;
      }
      out << (bwd ? r.backward_elements : r.forward_elements) << ','
          << (bwd ? r.analytic_backward : r.analytic_forward) << ',' << r.peak_heap_bytes << ','
          << num(bwd ? r.backward_ms : r.forward_ms) << ",ok\n";
    }
  }
  return out.str();
}

std::string BenchmarkReport::to_table() const {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %10s %16s %16s %14s %10s\n", "strategy", "negatives", "forward_elems",
                "backward_elems", "peak_heap_MB", "total_ms");
  out << line;
  for (const auto& r : rows) {
    if (r.exceeded) {
      std::snprintf(line, sizeof line, "%-12s %10lld %16s %16s %14s %10s\n", to_string(r.strategy).c_str(),
                    static_cast<long long>(r.n_negative), "exceeded", "exceeded", "-", "-");
    } else {
      std::snprintf(line, sizeof line, "%-12s %10lld %16lld %16lld %14.1f %10.1f\n", to_string(r.strategy).c_str(),
                    static_cast<long long>(r.n_negative), static_cast<long long>(r.forward_elements),
                    static_cast<long long>(r.backward_elements), static_cast<double>(r.peak_heap_bytes) / 1048576.0,
                    r.forward_ms + r.backward_ms);
    }
    out << line;
  }
  return out.str();
}

namespace {

BenchmarkRow bench_one(const BenchmarkConfig& c, NegativeStrategy s, std::int64_t n) {
  BenchmarkRow row;
  row.strategy = s;
  row.n_negative = n;
  const auto fp = hcat_footprint(s, c.batch, c.steps, c.dim, n, c.cardinality);
  row.analytic_forward = fp.forward;
  row.analytic_backward = fp.backward;
  if (fp.forward + fp.backward > c.cap_elements) {
    row.exceeded = true;
    return row;
  }
  Rng rng = Rng(c.seed).split("bench").split(to_string(s)).split(static_cast<std::uint64_t>(n));
  const Eigen::Index rows = Eigen::Index(c.batch) * c.steps;
  Mat<float> hidden(rows, c.dim), table(c.cardinality, c.dim);
  for (Eigen::Index i = 0; i < hidden.size(); ++i) hidden.data()[i] = static_cast<float>(rng.normal(0.0, 0.1));
  for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = static_cast<float>(rng.normal(0.0, 0.1));
  std::vector<std::int32_t> labels(static_cast<std::size_t>(rows));
  for (auto& y : labels) y = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(c.cardinality)));
  const std::vector<std::uint8_t> mask(static_cast<std::size_t>(rows), 1);
  Mat<float> d_hidden = Mat<float>::Zero(rows, c.dim), d_table = Mat<float>::Zero(c.cardinality, c.dim);

  MemoryCounter mem;
  Mat<float> loss;
  auto run = [&](auto& kernel, auto&& fwd) {
    mem.reset();
    auto t0 = std::chrono::steady_clock::now();
    loss = fwd();
    row.forward_ms = ms_since(t0);
    const Mat<float> up = Mat<float>::Constant(c.batch, c.steps, 1.0f / static_cast<float>(rows));
    t0 = std::chrono::steady_clock::now();
    kernel.backward(up, hidden, table, &d_hidden, &d_table, &mem);
    row.backward_ms = ms_since(t0);
  };
  switch (s) {
    case NegativeStrategy::kShared: {
      SharedNegativeLoss<float> k;
      auto negs = sample_negatives(c.cardinality, n, rng);
      run(k, [&] { return k.forward(hidden, table, labels, mask, c.batch, c.steps, std::move(negs), false, &mem); });
      break;
    }
    case NegativeStrategy::kIndependent: {
      IndependentNegativeLoss<float> k;
      run(k, [&] { return k.forward(hidden, table, labels, mask, c.batch, c.steps, n, rng, &mem); });
      break;
    }
    case NegativeStrategy::kExhaustive: {
      ExhaustiveLoss<float> k;
      run(k, [&] { return k.forward(hidden, table, labels, mask, c.batch, c.steps, &mem); });
      break;
    }
  }
  row.forward_elements = mem.forward_elements;
  row.backward_elements = mem.backward_elements;
  row.peak_heap_bytes = mem.peak_heap_bytes;
  row.loss = static_cast<double>(loss.sum()) / static_cast<double>(rows);
  return row;
}

}  // namespace

BenchmarkReport memory_benchmark(const BenchmarkConfig& config) {
  config.validate();
  BenchmarkReport report;
  report.config = config;
  for (auto s : config.strategies) {
    if (s == NegativeStrategy::kExhaustive) {
      // Every category is a candidate; the negative count does not apply.
      report.rows.push_back(bench_one(config, s, config.cardinality - 1));
      continue;
    }
    for (auto n : config.n_negatives) report.rows.push_back(bench_one(config, s, n));
  }
  return report;
}

// ---------------------------------------------------------------------------

std::string to_string(ScalingAxis a) { return a == ScalingAxis::kCards ? "cards" : "hidden_dim"; }

ScalingAxis scaling_axis_from(const std::string& s) {
  if (s == "cards") return ScalingAxis::kCards;
  if (s == "hidden_dim") return ScalingAxis::kHiddenDim;
  throw ValidationError("axis", "expected cards or hidden_dim, got '" + s + "'");
}

void ScalingConfig::validate() const {
  if (points.size() < 3) throw ValidationError("scaling.points", "need at least 3 points");
  for (auto p : points) {
    if (p < 1) throw ValidationError("scaling.points", "must be positive");
  }
  if (train_months < 1 || val_months < 1 || test_months < 1) {
    throw ValidationError("scaling.train_months", "every partition needs at least one month");
  }
  world.validate();
  model.validate();
  train.validate();
}

ordered_json ScalingConfig::to_json() const {
  return {{"axis", to_string(axis)},
          {"points", points},
          {"world", world.to_json()},
          {"train_months", train_months},
          {"val_months", val_months},
          {"test_months", test_months},
          {"max_seq_len", max_seq_len},
          {"cardinality_threshold", cardinality_threshold},
          {"model", model.to_json()},
          {"train", train.to_json()},
          {"eval", {{"batch_size", eval.batch_size}, {"positive_token", eval.positive_token}}}};
}

ScalingConfig ScalingConfig::from_json(const json& j) {
  ScalingConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "axis") c.axis = scaling_axis_from(v.get<std::string>());
      else if (key == "points") c.points = v.get<std::vector<std::int64_t>>();
      else if (key == "world") c.world = WorldConfig::from_json(v);
      else if (key == "train_months") c.train_months = v.get<std::int64_t>();
      else if (key == "val_months") c.val_months = v.get<std::int64_t>();
      else if (key == "test_months") c.test_months = v.get<std::int64_t>();
      else if (key == "max_seq_len") c.max_seq_len = v.get<std::int64_t>();
      else if (key == "cardinality_threshold") c.cardinality_threshold = v.get<std::int64_t>();
      else if (key == "model") c.model = ModelConfig::from_json(v);
      else if (key == "train") c.train = TrainConfig::from_json(v);
      else if (key == "eval") {
        c.eval.batch_size = v.value("batch_size", c.eval.batch_size);
        c.eval.positive_token = v.value("positive_token", c.eval.positive_token);
      } else throw ValidationError("scaling." + key, "unknown field");
    } catch (const json::exception& e) {
      throw ValidationError("scaling." + key, e.what());
    }
  }
  c.validate();
  return c;
}

std::vector<Monotonicity> monotonicity(const std::vector<ScalingRow>& rows) {
  Monotonicity loss{"val_pivot_loss"}, prec{"merchant_prec_at_1"}, auc{"auc"};
  auto step = [](Monotonicity& m, const std::optional<double>& a, const std::optional<double>& b, bool lower_better) {
    if (!a || !b) return;
    ++m.pairs;
    if (lower_better ? *b < *a : *b > *a) ++m.improving;
  };
  for (std::size_t i = 1; i < rows.size(); ++i) {
    step(loss, rows[i - 1].val_pivot_loss, rows[i].val_pivot_loss, true);
    step(prec, rows[i - 1].merchant_prec_at_1, rows[i].merchant_prec_at_1, false);
    step(auc, rows[i - 1].auc, rows[i].auc, false);
  }
  return {loss, prec, auc};
}

ordered_json ScalingReport::to_json() const {
  ordered_json rs = ordered_json::array(), ms = ordered_json::array();
  for (const auto& r : rows) {
    rs.push_back({{"size", r.size},
                  {"val_pivot_loss", r.val_pivot_loss},
                  {"merchant_prec_at_1", opt_json(r.merchant_prec_at_1)},
                  {"auc", opt_json(r.auc)},
                  {"train_sequences", r.train_sequences},
                  {"parameters", r.parameters}});
  }
  for (const auto& m : summary) {
    ms.push_back({{"metric", m.metric}, {"improving", m.improving}, {"pairs", m.pairs}, {"monotone", m.monotone()}});
  }
  return {{"axis", to_string(axis)}, {"rows", rs}, {"monotonicity", ms}};
}

std::string ScalingReport::to_csv() const {
  std::ostringstream out;
  out << to_string(axis) << ",val_pivot_loss,merchant_prec_at_1,auc,train_sequences,parameters\n";
  for (const auto& r : rows) {
    out << r.size << ',' << num(r.val_pivot_loss) << ',' << opt_num(r.merchant_prec_at_1) << ','
        << opt_num(r.auc) << ',' << r.train_sequences << ',' << r.parameters << '\n';
  }
  return out.str();
}

ScalingReport scaling_study(const ScalingConfig& config, const std::function<void(const ScalingRow&)>& on_row) {
  config.validate();
  ScalingReport report;
  report.axis = config.axis;
  const Schema base(Schema::default_transactions().attributes(), config.cardinality_threshold);
  const auto split = TemporalSplit::months(config.train_months, config.val_months, config.test_months);
  for (const auto point : config.points) {
    WorldConfig world = config.world;
    ModelConfig model_config = config.model;
    if (config.axis == ScalingAxis::kCards) world.n_cards = point;
    else model_config.hidden_dim = static_cast<int>(point);
    model_config.validate();
    const CorpusDir corpus = build_corpus(generate(world, base), base, split, config.max_seq_len);
    const TrainResult trained =
        train(corpus.schema, corpus.parts.train, corpus.parts.val, model_config, config.train);
    Model<float> model = restore_model(trained.best);
    const MetricReport metrics = evaluate(model, corpus.parts.test, config.eval);

    ScalingRow row;
    row.size = point;
    for (const auto& e : trained.history) {
      if (e.best) row.val_pivot_loss = e.val.at(metrics.pivot);
    }
    const auto it = metrics.prec_at_1.find(config.train.merchant_attribute);
    if (it != metrics.prec_at_1.end()) row.merchant_prec_at_1 = it->second;
    row.auc = metrics.auc;
    row.train_sequences = static_cast<std::int64_t>(corpus.parts.train.size());
    for (std::size_t i = 0; i < model.params().size(); ++i) row.parameters += model.params()[i].value.size();
    report.rows.push_back(row);
    if (on_row) on_row(row);
  }
  report.summary = monotonicity(report.rows);
  return report;
}

}  // namespace txnf
