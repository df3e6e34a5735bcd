#include "txnf/rec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "txnf/error.hpp"
#include "txnf/objective.hpp"
#include "txnf/ops.hpp"
#include "txnf/trainer.hpp"

namespace txnf {

using nlohmann::json;
using nlohmann::ordered_json;
using ops::gather_rows;
using ops::gelu;
using ops::linear;

std::string to_string(EmbeddingSource s) {
  return s == EmbeddingSource::kPretrainedFrozen ? "pretrained_frozen" : "supervised_scratch";
}

EmbeddingSource embedding_source_from(const std::string& s) {
  if (s == "pretrained_frozen") return EmbeddingSource::kPretrainedFrozen;
  if (s == "supervised_scratch") return EmbeddingSource::kSupervisedScratch;
  throw ValidationError("rec.source", "expected pretrained_frozen or supervised_scratch, got '" + s + "'");
}

void TowerConfig::validate() const {
  if (projection.empty()) throw ValidationError("rec.projection", "need at least one layer");
  for (int w : projection) {
    if (w < 1) throw ValidationError("rec.projection", "widths must be >= 1");
  }
  if (n_negative < 0) throw ValidationError("rec.n_negative", "must be >= 0");
  if (k.empty()) throw ValidationError("rec.k", "must not be empty");
  for (int v : k) {
    if (v < 1) throw ValidationError("rec.k", "values must be >= 1");
  }
  if (epochs < 0) throw ValidationError("rec.epochs", "must be >= 0");
  if (batch_size < 1) throw ValidationError("rec.batch_size", "must be >= 1");
  if (!(learning_rate > 0)) throw ValidationError("rec.learning_rate", "must be positive");
  if (weight_decay < 0) throw ValidationError("rec.weight_decay", "must be >= 0");
}

ordered_json TowerConfig::to_json() const {
  return {{"source", to_string(source)}, {"projection", projection}, {"n_negative", n_negative},
          {"k", k},                      {"epochs", epochs},         {"batch_size", batch_size},
          {"learning_rate", learning_rate}, {"weight_decay", weight_decay}, {"seed", seed}};
}

TowerConfig TowerConfig::from_json(const json& j) {
  TowerConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "source") c.source = embedding_source_from(v.get<std::string>());
      else if (key == "projection") c.projection = v.get<std::vector<int>>();
      else if (key == "n_negative") c.n_negative = v.get<std::int64_t>();
      else if (key == "k") c.k = v.get<std::vector<int>>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ValidationError("rec." + key, "unknown field");
    } catch (const json::exception& e) {
      throw ValidationError("rec." + key, e.what());
    }
  }
  c.validate();
  return c;
}

InteractionSplit split_interactions(std::vector<Interaction> xs, double train_fraction, double val_fraction) {
  if (!(train_fraction > 0 && val_fraction >= 0 && train_fraction + val_fraction < 1)) {
    throw ValidationError("rec.split", "fractions must be positive and sum below 1");
  }
  std::stable_sort(xs.begin(), xs.end(), [](const Interaction& a, const Interaction& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.card_id < b.card_id;
  });
  const auto n = static_cast<double>(xs.size());
  const auto a = static_cast<std::ptrdiff_t>(std::floor(train_fraction * n));
  const auto b = static_cast<std::ptrdiff_t>(std::floor((train_fraction + val_fraction) * n));
  InteractionSplit s;
  s.train.assign(xs.begin(), xs.begin() + a);
  s.val.assign(xs.begin() + a, xs.begin() + b);
  s.test.assign(xs.begin() + b, xs.end());
  return s;
}

double RankingMetrics::hr_at(int kk) const {
  for (std::size_t i = 0; i < k.size(); ++i) {
    if (k[i] == kk) return hr[i];
  }
  throw Error("no HR@" + std::to_string(kk) + " in this report");
}

double RankingMetrics::ndcg_at(int kk) const {
  for (std::size_t i = 0; i < k.size(); ++i) {
    if (k[i] == kk) return ndcg[i];
  }
  throw Error("no NDCG@" + std::to_string(kk) + " in this report");
}

ordered_json RankingMetrics::to_json() const {
  ordered_json hr_j = ordered_json::object(), nd_j = ordered_json::object();
  for (std::size_t i = 0; i < k.size(); ++i) {
    hr_j[std::to_string(k[i])] = hr[i];
    nd_j[std::to_string(k[i])] = ndcg[i];
  }
  return {{"queries", queries}, {"hr", hr_j}, {"ndcg", nd_j}};
}

RankingMetrics hr_ndcg(const Mat<float>& queries, const Mat<float>& items, std::span<const std::int32_t> truth,
                       const std::vector<int>& k) {
  if (queries.rows() != static_cast<Eigen::Index>(truth.size())) throw Error("hr_ndcg: one truth per query");
  if (queries.cols() != items.cols()) throw Error("hr_ndcg: query and item widths differ");
  RankingMetrics m;
  m.k = k;
  std::sort(m.k.begin(), m.k.end());
  m.k.erase(std::unique(m.k.begin(), m.k.end()), m.k.end());
  m.hr.assign(m.k.size(), 0.0);
  m.ndcg.assign(m.k.size(), 0.0);
  m.queries = queries.rows();
  if (m.queries == 0) return m;
  const Mat<float> scores = queries * items.transpose();
  for (Eigen::Index q = 0; q < scores.rows(); ++q) {
    const std::int32_t y = truth[static_cast<std::size_t>(q)];
    if (y < 0 || y >= items.rows()) throw Error("hr_ndcg: truth outside the candidate set");
    const float s = scores(q, y);
    std::int64_t rank = 1;
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      if (c != y && scores(q, c) >= s) ++rank;
    }
    for (std::size_t i = 0; i < m.k.size(); ++i) {
      if (rank <= m.k[i]) {
        m.hr[i] += 1.0;
        m.ndcg[i] += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
      }
    }
  }
  for (std::size_t i = 0; i < m.k.size(); ++i) {
    m.hr[i] /= static_cast<double>(m.queries);
    m.ndcg[i] /= static_cast<double>(m.queries);
  }
  return m;
}

namespace {

double rms(const Mat<float>& x) {
  if (x.size() == 0) return 0.0;
  return std::sqrt(x.cast<double>().squaredNorm() / static_cast<double>(x.size()));
}

Mat<float> normal_matrix(Eigen::Index rows, Eigen::Index cols, double sd, Rng& rng) {
  Mat<float> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal(0.0, sd));
  return m;
}

}  // namespace

TwoTower::TwoTower(const EmbeddingTable& cards, const EmbeddingTable& merchants, const TowerConfig& config)
    : config_(config) {
  config_.validate();
  for (std::int64_t r = 0; r < cards.rows(); ++r) {
    card_index_[std::stoull(cards.tokens[static_cast<std::size_t>(r)])] = static_cast<std::int32_t>(r);
  }
  candidates_ = merchants.rows();
  if (candidates_ > 0 && merchants.tokens.back() == kPadToken) --candidates_;
  if (candidates_ < 1) throw ValidationError("merchants", "no candidate merchants");

  Rng rng = Rng(config_.seed).split("two_tower");
  const Eigen::Index card_rows = cards.rows() + 1;  // trailing oov row
  if (config_.source == EmbeddingSource::kPretrainedFrozen) {
    frozen_cards_ = Mat<float>::Zero(card_rows, cards.vectors.cols());
    frozen_cards_.topRows(cards.rows()) = cards.vectors;
    frozen_merchants_ = merchants.vectors.topRows(candidates_);
  } else {
    // Same shapes, scale matched to the exported tables, no information from them.
    const double card_sd = std::max(rms(cards.vectors), 1e-2);
    const double merchant_sd = std::max(rms(merchants.vectors.topRows(candidates_)), 1e-2);
    Rng base = rng.split("base");
    params_.add("card.base", normal_matrix(card_rows, cards.vectors.cols(), card_sd, base), false);
    params_.add("merchant.base", normal_matrix(candidates_, merchants.vectors.cols(), merchant_sd, base), false);
  }
  for (const char* prefix : {"card", "merchant"}) {
    Rng lr = rng.split(prefix);
    Eigen::Index in = std::string(prefix) == "card" ? cards.vectors.cols() : merchants.vectors.cols();
    for (std::size_t l = 0; l < config_.projection.size(); ++l) {
      const Eigen::Index out = config_.projection[l];
      const std::string name = std::string(prefix) + ".l" + std::to_string(l);
      params_.add(name + ".w", normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), lr));
      params_.add(name + ".b", Mat<float>::Zero(1, out), false);
      in = out;
    }
  }
}

const Mat<float>& TwoTower::card_base() const {
  return config_.source == EmbeddingSource::kPretrainedFrozen ? frozen_cards_
                                                              : params_.get("card.base").value;
}

const Mat<float>& TwoTower::merchant_base() const {
  return config_.source == EmbeddingSource::kPretrainedFrozen
             ? frozen_merchants_
             : params_.get("merchant.base").value;
}

std::int32_t TwoTower::card_row(std::uint64_t card_id) const {
  const auto it = card_index_.find(card_id);
  return it == card_index_.end() ? static_cast<std::int32_t>(card_index_.size()) : it->second;
}

Var TwoTower::tower(Graph<float>& g, Var x, const std::string& prefix) {
  for (std::size_t l = 0; l < config_.projection.size(); ++l) {
    const std::string name = prefix + ".l" + std::to_string(l);
    if (l > 0) x = gelu(g, x);
    x = linear(g, x, g.param(params_.get(name + ".w")), g.param(params_.get(name + ".b")));
  }
  return x;
}

Var TwoTower::card_tower(Graph<float>& g, const std::vector<std::int32_t>& rows) {
  // Frozen tables enter as constants, so no gradient ever reaches them.
  const Var base = config_.source == EmbeddingSource::kPretrainedFrozen ? g.push(frozen_cards_, false, {})
                                                                         : g.param(params_.get("card.base"));
  return tower(g, gather_rows(g, base, rows), "card");
}

Var TwoTower::merchant_tower(Graph<float>& g) {
  const Var base = config_.source == EmbeddingSource::kPretrainedFrozen ? g.push(frozen_merchants_, false, {})
                                                                         : g.param(params_.get("merchant.base"));
  return tower(g, base, "merchant");
}

Mat<float> TwoTower::card_vectors(const std::vector<Interaction>& xs) {
  std::vector<std::int32_t> rows;
  rows.reserve(xs.size());
  for (const auto& x : xs) rows.push_back(card_row(x.card_id));
  Graph<float> g(false);
  return g.value(card_tower(g, rows));
}

Mat<float> TwoTower::merchant_vectors() {
  Graph<float> g(false);
  return g.value(merchant_tower(g));
}

RankingMetrics evaluate_two_tower(TwoTower& model, const std::vector<Interaction>& xs, const std::vector<int>& k) {
  std::vector<std::int32_t> truth;
  truth.reserve(xs.size());
  for (const auto& x : xs) {
    if (x.merchant < 0 || x.merchant >= model.candidates()) {
      throw ValidationError("interactions", "merchant index " + std::to_string(x.merchant) + " is not a candidate");
    }
    truth.push_back(x.merchant);
  }
  return hr_ndcg(model.card_vectors(xs), model.merchant_vectors(), truth, k);
}

namespace {

int selection_k(const std::vector<int>& ks) {
  int best = *std::min_element(ks.begin(), ks.end());
  for (int k : ks) {
    if (k <= 10) best = std::max(best, k);
  }
  return best;
}

}  // namespace

TwoTowerRun train_two_tower(TwoTower& model, const InteractionSplit& data) {
  const TowerConfig& c = model.config();
  TrainConfig opt_config;
  opt_config.learning_rate = c.learning_rate;
  opt_config.weight_decay = c.weight_decay;
  AdamW opt(opt_config);
  const int sel_k = selection_k(c.k);
  TwoTowerRun run;
  double best = -1.0;
  std::vector<Mat<float>> best_params;
  auto snapshot = [&] {
    best_params.clear();
    for (std::size_t i = 0; i < model.params().size(); ++i) best_params.push_back(model.params()[i].value);
  };
  snapshot();

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;
  for (int epoch = 0; epoch < c.epochs && !data.train.empty(); ++epoch) {
    Rng shuffle = Rng(c.seed).split("rec_shuffle").split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_int(i)]);
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(c.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(c.batch_size));
      std::vector<std::int32_t> rows, labels;
      for (std::size_t i = start; i < end; ++i) {
        const auto& x = data.train[order[i]];
        rows.push_back(model.card_row(x.card_id));
        labels.push_back(x.merchant);
      }
      const int B = static_cast<int>(rows.size());
      model.params().zero_grad();
      Graph<float> g;
      const Var cards = model.card_tower(g, rows);
      const Var merchants = model.merchant_tower(g);
      Rng rng = Rng(c.seed).split("rec_negatives").split(static_cast<std::uint64_t>(step));
      // One step per batch: every sample's positive is a candidate for the others.
      const Var loss = hcat_loss(g, cards, merchants, labels, std::vector<std::uint8_t>(rows.size(), 1), B, 1,
                                 NegativeSamplingPlan::shared(c.n_negative), rng);
      const double v = g.value(loss)(0, 0);
      if (!std::isfinite(v)) throw NonFiniteLoss("two_tower");
      g.backward(loss);
      clip_grad_norm(model.params(), 1.0);
      opt.step(model.params());
      loss_sum += v;
      ++batches;
      ++step;
    }
    run.train_loss.push_back(loss_sum / static_cast<double>(batches));
    run.val.push_back(evaluate_two_tower(model, data.val, c.k));
    const double score = data.val.empty() ? -static_cast<double>(epoch) : run.val.back().ndcg_at(sel_k);
    if (data.val.empty() || score > best) {
      best = score;
      run.best_epoch = epoch + 1;
      snapshot();
    }
  }
  for (std::size_t i = 0; i < model.params().size(); ++i) model.params()[i].value = best_params[i];
  return run;
}

ordered_json RecComparison::to_json() const {
  auto arm = [](const RankingMetrics& m, const TwoTowerRun& r) {
    return ordered_json{{"test", m.to_json()}, {"train_loss", r.train_loss}, {"best_epoch", r.best_epoch}};
  };
  return {{"interactions", {{"train", train}, {"val", val}, {"test", test}}},
          {"pretrained_frozen", arm(pretrained, pretrained_run)},
          {"supervised_scratch", arm(scratch, scratch_run)}};
}

std::string RecComparison::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "arm,k,hr,ndcg\n";
  const std::pair<const char*, const RankingMetrics*> arms[] = {{"pretrained_frozen", &pretrained},
                                                               {"supervised_scratch", &scratch}};
  for (auto [name, m] : arms) {
    for (std::size_t i = 0; i < m->k.size(); ++i) out << name << ',' << m->k[i] << ',' << m->hr[i] << ',' << m->ndcg[i] << '\n';
  }
  return out.str();
}

RecComparison compare_arms(const EmbeddingTable& cards, const EmbeddingTable& merchants, const InteractionSplit& data,
                           TowerConfig config) {
  RecComparison r;
  r.train = static_cast<std::int64_t>(data.train.size());
  r.val = static_cast<std::int64_t>(data.val.size());
  r.test = static_cast<std::int64_t>(data.test.size());
  config.source = EmbeddingSource::kPretrainedFrozen;
  TwoTower pre(cards, merchants, config);
  r.pretrained_run = train_two_tower(pre, data);
  r.pretrained = evaluate_two_tower(pre, data.test, config.k);
  config.source = EmbeddingSource::kSupervisedScratch;
  TwoTower scratch(cards, merchants, config);
  r.scratch_run = train_two_tower(scratch, data);
  r.scratch = evaluate_two_tower(scratch, data.test, config.k);
  return r;
}

}  // namespace txnf
