// Acceptance suite. Prints one PASS/FAIL line per criterion and writes the
// measured numbers to <out>/acceptance.json. Exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "txnf/checkpoint.hpp"
#include "txnf/cli.hpp"
#include "txnf/embedsvc.hpp"
#include "txnf/eval.hpp"
#include "txnf/model.hpp"
#include "txnf/objective.hpp"
#include "txnf/ops.hpp"
#include "txnf/rec.hpp"
#include "txnf/trainer.hpp"

using namespace txnf;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Outcome {
  std::string name;
  bool pass = false;
  std::string detail;
  ordered_json data = ordered_json::object();
  double seconds = 0.0;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

// ---------------------------------------------------------------------------

Outcome loss_oracles() {
  Outcome o{"loss_oracles"};
  double worst = 0.0;
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    const double y = rng.normal(0.0, 3.0);
    worst = std::max(worst, std::abs(nll_normal(y, 1.0, y) - 0.5 * std::log(2.0 * std::numbers::pi)));
  }
  o.data["nll_max_error"] = worst;

  double ce_worst = 0.0;
  for (int c : {2, 3, 10, 512, 4096}) {
    const double z = rng.normal(0.0, 5.0);
    const std::vector<double> logits(static_cast<std::size_t>(c), z);
    for (std::int64_t y : {std::int64_t{0}, std::int64_t{c - 1}}) {
      ce_worst = std::max(ce_worst, std::abs(cross_entropy<double>(logits, y) - std::log(double(c))));
    }
  }
  o.data["ce_max_error"] = ce_worst;

  const std::vector<double> losses{0.5, 2.0};
  const double agg = aggregate(1.0, losses, Aggregation::kTreasure).value;
  o.data["aggregate"] = agg;
  const double agg_err = std::abs(agg - 1.75);
  o.pass = worst <= 1e-9 && ce_worst <= 1e-9 && agg_err <= 1e-9;
  o.detail = "nll err " + fmt(worst) + ", uniform ce err " + fmt(ce_worst) + ", aggregate " + fmt(agg, 12) +
             " (tol 1e-9)";
  return o;
}

// Shared-negative InfoNCE over every category equals the full softmax.
Outcome infonce_equivalence() {
  Outcome o{"infonce_equivalence"};
  Rng rng(23);
  const int instances = 200;
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    const auto C = static_cast<Eigen::Index>(2 + rng.uniform_int(511));
    const int T = static_cast<int>(1 + rng.uniform_int(4));
    const auto d = static_cast<Eigen::Index>(1 + rng.uniform_int(16));
    const Mat<double> H = random_mat(T, d, rng), E = random_mat(C, d, rng);
    std::vector<std::int32_t> y(static_cast<std::size_t>(T));
    for (auto& v : y) v = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(C)));
    const std::vector<std::uint8_t> m(static_cast<std::size_t>(T), 1);
    std::vector<std::int32_t> all(static_cast<std::size_t>(C));
    std::iota(all.begin(), all.end(), 0);
    SharedNegativeLoss<double> loss;
    const Mat<double> got = loss.forward(H, E, y, m, 1, T, all, true);
    for (int t = 0; t < T; ++t) {
      // Oracle: log-sum-exp of every logit minus the true one.
      const Eigen::VectorXd z = E * H.row(t).transpose();
      const double mx = z.maxCoeff();
      const double want = mx + std::log((z.array() - mx).exp().sum()) - z(y[static_cast<std::size_t>(t)]);
      worst = std::max(worst, std::abs(got(0, t) - want));
    }
  }
  o.data["instances"] = instances;
  o.data["max_abs_error"] = worst;
  o.pass = worst <= 1e-6;
  o.detail = std::to_string(instances) + " instances, max |diff| " + fmt(worst) + " (tol 1e-6)";
  return o;
}

ModelConfig small_model() {
  ModelConfig c;
  c.hidden_dim = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.input_layers = 2;
  c.ffn_multiplier = 2;
  c.numeric_width = 2;
  c.max_seq_len = 16;
  c.init_seed = 3;
  return c;
}

Outcome gradient_checks() {
  Outcome o{"gradient_checks"};
  using testing::max_fd_error;
  double worst = 0.0;
  auto note = [&](const std::string& name, double err) {
    o.data[name] = err;
    worst = std::max(worst, err);
  };

  {
    Rng rng(41);
    Mat<double> mu = random_mat(5, 2, rng), raw = random_mat(5, 2, rng), Z = random_mat(5, 4, rng);
    const std::vector<double> y{0.1, -0.3, 1.2, 0.7, 2.0};
    const std::vector<std::int32_t> labels{0, 3, 2, 2, 1};
    const std::vector<std::uint8_t> m{1, 0, 1, 1, 1};
    auto run = [&](bool nll, std::vector<Mat<double>>* grads) {
      Graph<double> g;
      Parameter<double> pm{"mu", mu, Mat<double>::Zero(5, 2)}, pr{"raw", raw, Mat<double>::Zero(5, 2)},
          pz{"z", Z, Mat<double>::Zero(5, 4)};
      Var out = nll ? nll_loss(g, g.param(pm), ops::softplus(g, g.param(pr), 1e-4), 1, y, m)
                    : softmax_ce_loss(g, g.param(pz), labels, m);
      if (grads) {
        g.backward(out);
        *grads = {pm.grad, pr.grad, pz.grad};
      }
      return g.value(out)(0, 0);
    };
    std::vector<Mat<double>> gr;
    run(true, &gr);
    auto f = [&] { return run(true, nullptr); };
    note("nll", std::max(max_fd_error(mu, gr[0], f), max_fd_error(raw, gr[1], f)));
    run(false, &gr);
    note("cross_entropy", max_fd_error(Z, gr[2], [&] { return run(false, nullptr); }));
  }

  for (NegativeStrategy s : {NegativeStrategy::kShared, NegativeStrategy::kIndependent, NegativeStrategy::kExhaustive}) {
    Rng rng(31);
    const int B = 3, T = 2;
    Mat<double> H = random_mat(B * T, 4, rng), E = random_mat(15, 4, rng);
    const std::vector<std::int32_t> y{1, 4, 3, 0, 8, 8};
    const std::vector<std::uint8_t> m{1, 1, 1, 0, 1, 1};
    const NegativeSamplingPlan plan{s, s == NegativeStrategy::kShared ? 6 : 3, 0};
    auto run = [&](Mat<double>* dH, Mat<double>* dE) {
      Graph<double> g;
      Parameter<double> ph{"h", H, Mat<double>::Zero(H.rows(), H.cols())};
      Parameter<double> pe{"e", E, Mat<double>::Zero(E.rows(), E.cols())};
      Rng draw(5);
      Var out = hcat_loss(g, g.param(ph), g.param(pe), y, m, B, T, plan, draw);
      if (dH) {
        g.backward(out);
        *dH = ph.grad;
        *dE = pe.grad;
      }
      return g.value(out)(0, 0);
    };
    Mat<double> dH, dE;
    run(&dH, &dE);
    auto f = [&] { return run(nullptr, nullptr); };
    note("hcat_" + to_string(s), std::max(max_fd_error(H, dH, f), max_fd_error(E, dE, f)));
  }

  {
    const auto d = testing::tiny_data(4, 40, 21, 8, 8.0);
    Model<double> m(d.schema, small_model());
    const Batch b = testing::batch_of(testing::truncated(d, 4, 2), d.schema);
    LossOptions opt;
    opt.aggregation = Aggregation::kSimple;
    opt.plan = NegativeSamplingPlan::shared(6);
    auto value = [&]() {
      Graph<double> g(false);
      Rng rng(5);
      const auto out = m.forward(g, b);
      return g.value(m.loss(g, out, b, opt, rng))(0, 0);
    };
    m.params().zero_grad();
    {
      Graph<double> g;
      Rng rng(5);
      const auto out = m.forward(g, b);
      g.backward(m.loss(g, out, b, opt, rng));
    }
    double model_worst = 0.0;
    for (std::size_t i = 0; i < m.params().size(); ++i) {
      auto& prm = m.params()[i];
      const Mat<double> analytic = prm.grad;
      model_worst = std::max(model_worst, max_fd_error(prm.value, analytic, value));
    }
    o.data["model_parameters"] = m.params().size();
    note("full_model", model_worst);
  }
  o.pass = worst <= 1e-3;
  o.detail = "max relative error " + fmt(worst) + " over nll, ce, 3 hcat kernels and the full model (tol 1e-3)";
  return o;
}

Mat<float> outputs_matrix(Model<float>& m, const Batch& b) {
  Graph<float> g(false);
  const auto out = m.forward(g, b);
  std::vector<Mat<float>> parts{g.value(out.hidden)};
  for (const auto* h : {&out.next, &out.current}) {
    if (h->mu.valid()) {
      parts.push_back(g.value(h->mu));
      parts.push_back(g.value(h->sigma));
    }
    for (Var v : h->vecs) parts.push_back(g.value(v));
  }
  Eigen::Index cols = 0;
  for (const auto& p : parts) cols += p.cols();
  Mat<float> all(parts[0].rows(), cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    all.middleCols(c, p.cols()) = p;
    c += p.cols();
  }
  return all;
}

Outcome causality() {
  Outcome o{"causality"};
  const auto d = testing::tiny_data(12, 40, 9, 16, 14.0);
  Model<float> m(d.schema, small_model());
  const Batch base = testing::batch_of(testing::truncated(d, 10, 4), d.schema);
  const Mat<float> ref = outputs_matrix(m, base);
  const Widths w = Widths::of(d.schema);
  const auto& attrs = d.schema.attributes();
  Rng rng(17);
  const int probes = 1000;
  int violations = 0, changed = 0;
  for (int probe = 0; probe < probes; ++probe) {
    Batch b = base;
    const int card = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(b.batch_size)));
    const int len = b.lengths[static_cast<std::size_t>(card)];
    const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(len)));
    const std::size_t row = static_cast<std::size_t>(card * b.steps + j);
    for (int c = 0; c < w.dyn_num; ++c) b.dyn_num[row * w.dyn_num + c] += static_cast<float>(1 + rng.uniform() * 50);
    for (int c = 0; c < w.dyn_cat; ++c) {
      const auto card_c = *attrs[static_cast<std::size_t>(d.schema.layout().dyn_cat[static_cast<std::size_t>(c)])]
                               .cardinality;
      b.dyn_cat[row * w.dyn_cat + c] = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(card_c)));
    }
    const Mat<float> out = outputs_matrix(m, b);
    for (int t = 0; t < j; ++t) {
      const Eigen::Index r = Eigen::Index(card) * b.steps + t;
      if (std::memcmp(out.row(r).eval().data(), ref.row(r).eval().data(), sizeof(float) * std::size_t(out.cols()))) {
        ++violations;
      }
    }
    const Eigen::Index rj = Eigen::Index(card) * b.steps + j;
    if (!(out.row(rj) == ref.row(rj))) ++changed;
  }
  o.data["probes"] = probes;
  o.data["violations"] = violations;
  o.data["probes_changing_step_j"] = changed;
  o.pass = violations == 0 && changed > 0;
  o.detail = std::to_string(probes) + " probes, " + std::to_string(violations) +
             " earlier-step differences, step j changed in " + std::to_string(changed);
  return o;
}

Outcome memory() {
  Outcome o{"memory"};
  BenchmarkConfig base;
  base.batch = 32;
  base.steps = 64;
  base.dim = 64;
  base.seed = 1;
  BenchmarkConfig shared = base;
  shared.strategies = {NegativeStrategy::kShared};
  shared.n_negatives = {64, 128, 256, 512, 1024};
  BenchmarkConfig indep = base;
  indep.strategies = {NegativeStrategy::kIndependent};
  indep.n_negatives = {1024};
  indep.cap_elements = std::int64_t{1} << 31;
  const BenchmarkReport rs = memory_benchmark(shared);
  const BenchmarkReport ri = memory_benchmark(indep);
  const BenchmarkRow* s = rs.find(NegativeStrategy::kShared, 1024);
  const BenchmarkRow* i = ri.find(NegativeStrategy::kIndependent, 1024);
  if (!s || !i || s->exceeded || i->exceeded) {
    o.detail = "benchmark rows missing or over the cap";
    return o;
  }
  const double analytic = double(i->analytic_forward + i->analytic_backward) /
                          double(s->analytic_forward + s->analytic_backward);
  const double counted = double(i->forward_elements + i->backward_elements) /
                         double(s->forward_elements + s->backward_elements);
  const bool heap = s->peak_heap_bytes > 0 && i->peak_heap_bytes > 0;
  const double heap_ratio = heap ? double(i->peak_heap_bytes) / double(s->peak_heap_bytes) : 0.0;
  const LinearFit fit = rs.fit(NegativeStrategy::kShared);
  o.data["shared"] = rs.to_json();
  o.data["independent"] = ri.to_json();
  o.data["analytic_ratio"] = analytic;
  o.data["counted_ratio"] = counted;
  o.data["peak_heap_ratio"] = heap ? ordered_json(heap_ratio) : ordered_json(nullptr);
  o.data["shared_fit_r2"] = fit.r2;
  o.pass = analytic >= 50 && counted >= 50 && (!heap || heap_ratio >= 50) && fit.r2 >= 0.99;
  o.detail = "independent/shared at N=1024: analytic " + fmt(analytic) + "x, counted " + fmt(counted) + "x, peak heap " +
             (heap ? fmt(heap_ratio) + "x" : std::string("n/a")) + " (min 50x); shared fit R2 " + fmt(fit.r2, 6) +
             " (min 0.99)";
  return o;
}

// ---------------------------------------------------------------------------
// Trained-model criteria share one synthetic corpus and one set of runs.

struct Study {
  WorldConfig world;
  CorpusDir corpus;
  std::vector<MerchantTruth> truth;
  int epochs = 4;
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  struct Arm {
    std::string name;
    std::uint64_t seed = 0;
    MetricReport report;
    int best_epoch = 0;
    Checkpoint best;
    double seconds = 0.0;
  };
  std::vector<Arm> arms;
  bool trained = false;

  const Arm& arm(const std::string& name, std::uint64_t seed) const {
    for (const auto& a : arms) {
      if (a.name == name && a.seed == seed) return a;
    }
    throw Error("no run " + name);
  }
};

WorldConfig study_world() {
  WorldConfig w;
  w.n_cards = 10000;
  w.n_merchants = 2000;
  w.n_countries = 12;
  w.n_categories = 16;
  w.n_cities = 40;
  w.time_span_days = 180;
  w.mean_txns_per_card = 24;
  w.favorites_per_card = 6;
  w.seed = 42;
  return w;
}

ModelConfig study_model(std::uint64_t seed) {
  ModelConfig c;
  c.hidden_dim = 64;
  c.n_layers = 2;
  c.n_heads = 4;
  c.input_layers = 1;
  c.ffn_multiplier = 2;
  c.max_seq_len = 64;
  c.init_seed = seed;
  return c;
}

void prepare(Study& s) {
  s.world = study_world();
  const Schema base(Schema::default_transactions().attributes(), kDefaultCardinalityThreshold);
  const auto raw = generate(s.world, base);
  s.corpus = build_corpus(raw, base, TemporalSplit::months(4, 1, 1), 64);
  s.truth = ground_truth(s.world);
  std::cout << "study corpus: " << raw.size() << " transactions, " << s.corpus.parts.train.size() << " train / "
            << s.corpus.parts.val.size() << " val / " << s.corpus.parts.test.size() << " test sequences" << std::endl;
}

void train_arms(Study& s) {
  if (s.trained) return;
  s.trained = true;
  struct Spec {
    const char* name;
    Aggregation agg;
    NegativeSamplingPlan plan;
  };
  const Spec specs[] = {{"treasure_shared", Aggregation::kTreasure, NegativeSamplingPlan::shared(1024)},
                        {"simple_shared", Aggregation::kSimple, NegativeSamplingPlan::shared(1024)},
                        {"treasure_independent", Aggregation::kTreasure, NegativeSamplingPlan::independent(5)}};
  for (std::uint64_t seed : s.seeds) {
    for (const auto& spec : specs) {
      const auto start = std::chrono::steady_clock::now();
      TrainConfig tc;
      tc.epochs = s.epochs;
      tc.batch_size = 64;
      tc.learning_rate = 1e-3;
      tc.aggregation = spec.agg;
      tc.negatives = spec.plan.strategy;
      tc.n_negative = spec.plan.n_negative;
      tc.seed = seed;
      const TrainResult r = train(s.corpus.schema, s.corpus.parts.train, s.corpus.parts.val, study_model(seed), tc);
      Study::Arm a;
      a.name = spec.name;
      a.seed = seed;
      a.best = r.best;
      for (const auto& e : r.history) {
        if (e.best) a.best_epoch = e.epoch;
      }
      Model<float> model = restore_model(r.best);
      a.report = evaluate(model, s.corpus.parts.test);
      a.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << "  " << a.name << " seed " << seed << ": best epoch " << a.best_epoch << ", merchant Prec@1 "
                << fmt(a.report.prec_at_1.at("merchant").value_or(0)) << ", AUC " << fmt(a.report.auc.value_or(0))
                << " (" << fmt(a.seconds, 3) << " s)" << std::endl;
      s.arms.push_back(std::move(a));
    }
  }
}

ordered_json arm_json(const Study::Arm& a) {
  ordered_json j = a.report.to_json();
  j["best_epoch"] = a.best_epoch;
  j["seconds"] = a.seconds;
  return j;
}

Outcome learnability(Study& s) {
  Outcome o{"learnability"};
  train_arms(s);
  const auto& main = s.arm("treasure_shared", s.seeds[0]);
  const double chance = 1.0 / double(s.world.n_merchants);
  const double prec = main.report.prec_at_1.at("merchant").value_or(0.0);
  const double auc = main.report.auc.value_or(0.0);
  double worst_smape = 0.0;
  bool smape_defined = !main.report.smape.empty();
  for (const auto& [name, v] : main.report.smape) {
    if (!v) smape_defined = false;
    worst_smape = std::max(worst_smape, v.value_or(INFINITY));
  }
  int wins = 0;
  ordered_json per_seed = ordered_json::array();
  for (std::uint64_t seed : s.seeds) {
    const double t = s.arm("treasure_shared", seed).report.auc.value_or(0.0);
    const double m = s.arm("simple_shared", seed).report.auc.value_or(0.0);
    wins += t >= m ? 1 : 0;
    per_seed.push_back({{"seed", seed}, {"treasure_auc", t}, {"simple_auc", m}});
  }
  o.data["epochs"] = s.epochs;
  o.data["main"] = arm_json(main);
  o.data["aggregation"] = per_seed;
  o.pass = prec >= 10 * chance && auc >= 0.80 && smape_defined && worst_smape < 1.0 && 2 * wins > int(s.seeds.size());
  o.detail = "merchant Prec@1 " + fmt(prec) + " (min " + fmt(10 * chance) + "), AUC " + fmt(auc) +
             " (min 0.8), max sMAPE " + fmt(worst_smape) + " (max 1), treasure AUC >= simple in " +
             std::to_string(wins) + "/" + std::to_string(s.seeds.size()) + " seeds";
  return o;
}

Outcome shared_vs_independent(Study& s) {
  Outcome o{"shared_vs_independent"};
  train_arms(s);
  int wins = 0;
  ordered_json per_seed = ordered_json::array();
  std::string detail;
  for (std::uint64_t seed : s.seeds) {
    const double sh = s.arm("treasure_shared", seed).report.prec_at_1.at("merchant").value_or(0.0);
    const double in = s.arm("treasure_independent", seed).report.prec_at_1.at("merchant").value_or(0.0);
    wins += sh >= in ? 1 : 0;
    per_seed.push_back({{"seed", seed}, {"shared", sh}, {"independent", in}});
    detail += (detail.empty() ? "" : ", ") + fmt(sh) + " vs " + fmt(in);
  }
  o.data["merchant_prec_at_1"] = per_seed;
  o.pass = 2 * wins > int(s.seeds.size());
  o.detail = "merchant Prec@1 shared vs independent: " + detail + "; shared wins " + std::to_string(wins) + "/" +
             std::to_string(s.seeds.size());
  return o;
}

EmbeddingExport export_of(const Study& s, const Study::Arm& a) {
  Model<float> model = restore_model(a.best);
  return export_embeddings(model, s.corpus.parts.train);
}

// Up to `per_group` rows from each of the `groups` largest groups.
LabelledRows sample_groups(const LabelledRows& all, int groups, int per_group, std::uint64_t seed) {
  std::vector<std::vector<std::int64_t>> by(all.names.size());
  for (std::size_t i = 0; i < all.rows.size(); ++i) by[static_cast<std::size_t>(all.labels[i])].push_back(all.rows[i]);
  std::vector<std::size_t> order(by.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return by[a].size() > by[b].size(); });
  Rng rng = Rng(seed).split("groups");
  LabelledRows out;
  for (std::size_t k = 0; k < order.size() && int(k) < groups; ++k) {
    auto rows = by[order[k]];
    for (std::size_t i = rows.size(); i > 1; --i) std::swap(rows[i - 1], rows[rng.uniform_int(i)]);
    rows.resize(std::min(rows.size(), static_cast<std::size_t>(per_group)));
    for (auto r : rows) {
      out.rows.push_back(r);
      out.labels.push_back(int(k));
    }
    out.names.push_back(all.names[order[k]]);
  }
  return out;
}

struct Structure {
  ProbeResult probe;
  SilhouetteTest silhouette;
  std::size_t sampled = 0;

  ordered_json to_json() const {
    return {{"probe", {{"accuracy", probe.accuracy}, {"chance", probe.chance}, {"classes", probe.classes},
                       {"train", probe.train}, {"test", probe.test}}},
            {"silhouette", {{"observed", silhouette.observed}, {"random_p95", silhouette.random_p95},
                            {"merchants", sampled}}}};
  }
};

Structure structure_of(const Study& s, const Study::Arm& a) {
  const EmbeddingExport e = export_of(s, a);
  const EmbeddingTable& merchants = *e.find("merchant");
  const Metadata meta = Metadata::from_ground_truth(s.truth);
  Structure r;
  const LabelledRows cat = labelled_rows(merchants, meta, "category");
  r.probe = linear_probe(gather(merchants, cat.rows), cat.labels);
  const LabelledRows country = sample_groups(labelled_rows(merchants, meta, "country"), 10, 50, 1);
  r.silhouette = silhouette_vs_random(gather(merchants, country.rows), country.labels, 100, 1);
  r.sampled = country.rows.size();
  return r;
}

Outcome embedding_structure(Study& s) {
  Outcome o{"embedding_structure"};
  train_arms(s);
  const Structure main = structure_of(s, s.arm("treasure_shared", s.seeds[0]));
  o.data["main"] = main.to_json();
  // Reported for comparison only.
  o.data["simple_shared"] = structure_of(s, s.arm("simple_shared", s.seeds[0])).to_json();
  const double uniform = 1.0 / double(main.probe.classes);
  o.pass = main.probe.accuracy >= 5 * main.probe.chance && main.silhouette.exceeds();
  o.detail = "category probe " + fmt(main.probe.accuracy) + " vs chance " + fmt(main.probe.chance) + " (min 5x; 1/" +
             std::to_string(main.probe.classes) + " = " + fmt(uniform) + "); country silhouette " +
             fmt(main.silhouette.observed) + " vs random p95 " + fmt(main.silhouette.random_p95) + " over " +
             std::to_string(main.sampled) + " merchants";
  return o;
}

Outcome two_tower(Study& s) {
  Outcome o{"two_tower"};
  train_arms(s);
  std::vector<CardSequence> later = s.corpus.parts.val;
  later.insert(later.end(), s.corpus.parts.test.begin(), s.corpus.parts.test.end());
  const InteractionSplit split = split_interactions(interactions(later, s.corpus.schema));
  int wins = 0;
  ordered_json per_seed = ordered_json::array();
  std::string detail;
  for (std::uint64_t seed : s.seeds) {
    const EmbeddingExport e = export_of(s, s.arm("treasure_shared", seed));
    TowerConfig tc;
    tc.projection = {128, 64};
    tc.seed = seed;
    const RecComparison r = compare_arms(*e.find(kCardTable), *e.find("merchant"), split, tc);
    const double ph = r.pretrained.hr_at(10), pn = r.pretrained.ndcg_at(10);
    const double sh = r.scratch.hr_at(10), sn = r.scratch.ndcg_at(10);
    const bool win = ph >= sh && pn >= sn;
    wins += win ? 1 : 0;
    per_seed.push_back({{"seed", seed}, {"comparison", r.to_json()}});
    detail += (detail.empty() ? "" : "; ") + std::string("HR@10 ") + fmt(ph) + " vs " + fmt(sh) + ", NDCG@10 " +
              fmt(pn) + " vs " + fmt(sn);
    std::cout << "  two-tower seed " << seed << ": " << detail.substr(detail.rfind("HR@10")) << std::endl;
  }
  o.data["interactions"] = {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}};
  o.data["per_seed"] = per_seed;
  o.pass = 2 * wins > int(s.seeds.size());
  o.detail = "pretrained vs scratch " + detail + "; pretrained wins " + std::to_string(wins) + "/" +
             std::to_string(s.seeds.size());
  return o;
}

// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int quiet_dispatch(const std::vector<std::string>& args) {
  std::ostringstream sink;
  auto* old = std::cout.rdbuf(sink.rdbuf());
  const int code = dispatch(args);
  std::cout.rdbuf(old);
  return code;
}

bool pipeline(const fs::path& root, const std::string& configs) {
  const std::string r = root.string();
  const std::vector<std::vector<std::string>> steps = {
      {"generate", "--config", configs + "generate.json", "--out", r + "/gen"},
      {"build-corpus", "--config", configs + "build-corpus.json", "--data", r + "/gen", "--out", r + "/corpus"},
      {"train", "--config", configs + "train.json", "--data", r + "/corpus", "--out", r + "/run"},
      {"eval", "--data", r + "/corpus", "--checkpoint", r + "/run/best.ckpt", "--out", r + "/eval"},
      {"export-embeddings", "--data", r + "/corpus", "--checkpoint", r + "/run/best.ckpt", "--out", r + "/emb"},
      {"rec", "--config", configs + "rec.json", "--embeddings", r + "/emb", "--interactions", r + "/corpus", "--out",
       r + "/rec"}};
  for (const auto& s : steps) {
    if (quiet_dispatch(s) != 0) return false;
  }
  return true;
}

Outcome determinism(const fs::path& out, const std::string& configs) {
  Outcome o{"determinism"};
  const fs::path a = out / "determinism" / "a", b = out / "determinism" / "b";
  fs::remove_all(out / "determinism");
  if (!pipeline(a, configs) || !pipeline(b, configs)) {
    o.detail = "pipeline failed";
    return o;
  }
  const char* files[] = {"run/metrics.ndjson", "eval/metrics.json", "eval/metrics.csv", "rec/rec.json", "rec/rec.csv"};
  int same = 0;
  ordered_json diffs = ordered_json::array();
  for (const char* f : files) {
    const std::string x = slurp(a / f), y = slurp(b / f);
    if (!x.empty() && x == y) ++same;
    else diffs.push_back(f);
  }
  // Every artifact, not only the metrics, must match.
  for (const char* stage : {"gen", "corpus", "run", "eval", "emb", "rec"}) {
    const auto ma = RunManifest::read((a / stage).string()), mb = RunManifest::read((b / stage).string());
    if (ma.checksums != mb.checksums || ma.config != mb.config || ma.seeds != mb.seeds) diffs.push_back(stage);
  }
  // Timings are excluded from the comparison; metrics.ndjson carries none.
  o.data["differences"] = diffs;
  o.pass = diffs.empty() && same == int(std::size(files));
  o.detail = std::to_string(same) + "/" + std::to_string(std::size(files)) +
             " metrics files bit-identical across two runs; manifest checksums " +
             (diffs.empty() ? "identical" : "differ: " + diffs.dump());
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"txn-foundry acceptance suite"};
  std::string out = "acceptance_out";
  std::string configs = std::string(TXNF_SOURCE_DIR) + "/configs/tiny/";
  std::vector<std::string> only;
  Study study;
  app.add_option("--out", out, "Directory for acceptance.json and scratch artifacts");
  app.add_option("--configs", configs, "Directory holding the tiny pipeline configs");
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--epochs", study.epochs, "Pretraining epochs per study run")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  if (!configs.empty() && configs.back() != '/') configs += '/';
  fs::create_directories(out);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"loss_oracles", loss_oracles},
      {"infonce_equivalence", infonce_equivalence},
      {"gradient_checks", gradient_checks},
      {"causality", causality},
      {"memory", memory},
      {"learnability", [&] { return learnability(study); }},
      {"shared_vs_independent", [&] { return shared_vs_independent(study); }},
      {"embedding_structure", [&] { return embedding_structure(study); }},
      {"two_tower", [&] { return two_tower(study); }},
      {"determinism", [&] { return determinism(out, configs); }},
  };
  const std::set<std::string> wanted(only.begin(), only.end());
  const std::set<std::string> needs_study = {"learnability", "shared_vs_independent", "embedding_structure",
                                             "two_tower"};

  std::vector<Outcome> outcomes;
  bool prepared = false;
  for (const auto& [name, run] : criteria) {
    if (!wanted.empty() && !wanted.count(name)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      if (needs_study.count(name) && !prepared) {
        prepare(study);
        prepared = true;
      }
      o = run();
    } catch (const std::exception& e) {
      o.name = name;
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (o.pass ? "PASS " : "FAIL ") << o.name << ": " << o.detail << " [" << fmt(o.seconds, 3) << " s]"
              << std::endl;
    outcomes.push_back(std::move(o));
  }

  ordered_json report = ordered_json::object();
  int failed = 0;
  for (const auto& o : outcomes) {
    failed += o.pass ? 0 : 1;
    report[o.name] = {{"pass", o.pass}, {"detail", o.detail}, {"seconds", o.seconds}, {"data", o.data}};
  }
  std::ofstream(fs::path(out) / "acceptance.json") << report.dump(2) << "\n";
  std::cout << outcomes.size() - std::size_t(failed) << "/" << outcomes.size() << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
