#include "txnf/trainer.hpp"

#include <cmath>
#include <limits>

#include "txnf/error.hpp"

namespace txnf {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("epochs", "must be >= 0");
  if (!(learning_rate > 0)) throw ValidationError("learning_rate", "must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) throw ValidationError("beta1", "must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ValidationError("beta2", "must be in [0, 1)");
  if (!(adam_eps > 0)) throw ValidationError("adam_eps", "must be positive");
  if (weight_decay < 0) throw ValidationError("weight_decay", "must be >= 0");
  if (grad_clip < 0) throw ValidationError("grad_clip", "must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
  if (negatives != NegativeStrategy::kExhaustive && n_negative < 1) {
    throw ValidationError("n_negative", "must be >= 1");
  }
}

LossOptions TrainConfig::loss_options() const {
  LossOptions o;
  o.plan = {negatives, n_negative, seed};
  o.aggregation = aggregation;
  o.task = task;
  o.merchant_attribute = merchant_attribute;
  return o;
}

ordered_json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"learning_rate", learning_rate},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"weight_decay", weight_decay},
          {"grad_clip", grad_clip},
          {"batch_size", batch_size},
          {"aggregation_mode", to_string(aggregation)},
          {"task_mode", to_string(task)},
          {"negative_strategy", to_string(negatives)},
          {"n_negative", n_negative},
          {"merchant_attribute", merchant_attribute},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "grad_clip") c.grad_clip = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "aggregation_mode") c.aggregation = aggregation_from(v.get<std::string>());
      else if (key == "task_mode") c.task = task_mode_from(v.get<std::string>());
      else if (key == "negative_strategy") c.negatives = negative_strategy_from(v.get<std::string>());
      else if (key == "n_negative") c.n_negative = v.get<std::int64_t>();
      else if (key == "merchant_attribute") c.merchant_attribute = v.get<std::string>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ValidationError("train." + key, "unknown field");
    } catch (const json::exception& e) {
      throw ValidationError("train." + key, e.what());
    }
  }
  c.validate();
  return c;
}

void AdamW::step(ParamStore<float>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(c_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(c_.beta2, double(t_));
  const float lr = static_cast<float>(c_.learning_rate);
  const float b1 = static_cast<float>(c_.beta1), b2 = static_cast<float>(c_.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto [mi, fresh_m] = m_.try_emplace(p.name, Mat<float>::Zero(p.value.rows(), p.value.cols()));
    auto [vi, fresh_v] = v_.try_emplace(p.name, Mat<float>::Zero(p.value.rows(), p.value.cols()));
    Mat<float>& m = mi->second;
    Mat<float>& v = vi->second;
    m = b1 * m + (1.0f - b1) * p.grad;
    v = b2 * v + (1.0f - b2) * p.grad.cwiseProduct(p.grad);
    if (p.decay && c_.weight_decay > 0) p.value *= 1.0f - lr * static_cast<float>(c_.weight_decay);
    const float step = static_cast<float>(c_.learning_rate / bc1);
    const float denom_scale = static_cast<float>(1.0 / std::sqrt(bc2));
    p.value.array() -= step * m.array() / (v.array().sqrt() * denom_scale + static_cast<float>(c_.adam_eps));
  }
}

std::vector<NamedTensor> AdamW::state() const {
  std::vector<NamedTensor> out;
  for (const auto& [name, m] : m_) out.push_back({"m/" + name, m});
  for (const auto& [name, v] : v_) out.push_back({"v/" + name, v});
  return out;
}

void AdamW::restore(const std::vector<NamedTensor>& state, std::int64_t steps) {
  m_.clear();
  v_.clear();
  for (const auto& t : state) {
    if (t.name.rfind("m/", 0) == 0) m_[t.name.substr(2)] = t.value;
    else if (t.name.rfind("v/", 0) == 0) v_[t.name.substr(2)] = t.value;
    else throw Error("unknown optimizer tensor " + t.name);
  }
  t_ = steps;
}

double clip_grad_norm(ParamStore<float>& params, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) sq += params[i].grad.cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / (norm + 1e-12));
    for (std::size_t i = 0; i < params.size(); ++i) params[i].grad *= scale;
  }
  return norm;
}

ordered_json EpochMetrics::to_json() const {
  ordered_json t = ordered_json::object(), v = ordered_json::object();
  for (const auto& [k, x] : train) t[k] = x;
  for (const auto& [k, x] : val) v[k] = x;
  return {{"epoch", epoch}, {"steps", steps}, {"train", t}, {"val", v}, {"selection", selection}, {"best", best}};
}

namespace {

/// Position-weighted accumulation of LossReports.
struct LossMeans {
  std::map<std::string, double> sum, weight;
  std::string pivot;

  void add(const LossReport& r) {
    pivot = r.pivot;
    for (const auto& e : r.entries) {
      sum[e.name] += e.value * static_cast<double>(e.positions);
      weight[e.name] += static_cast<double>(e.positions);
    }
  }

  std::map<std::string, double> means(const LossOptions& opt) const {
    std::map<std::string, double> out;
    for (const auto& [k, s] : sum) out[k] = weight.at(k) > 0 ? s / weight.at(k) : 0.0;
    if (out.empty()) return out;
    std::vector<double> others;
    for (const auto& [k, x] : out) {
      if (k != pivot) others.push_back(x);
    }
    double agg = 0.0;
    switch (opt.task) {
      case TaskMode::kMulti: agg = aggregate(out.at(pivot), others, opt.aggregation).value; break;
      case TaskMode::kMerchantOnly: agg = out.count(opt.merchant_attribute) ? out.at(opt.merchant_attribute) : 0.0; break;
      case TaskMode::kAbnormalOnly: agg = out.at(pivot); break;
    }
    out["aggregate"] = agg;
    return out;
  }
};

void check_finite(const LossReport& r) {
  for (const auto& e : r.entries) {
    if (!std::isfinite(e.value)) throw NonFiniteLoss(e.name);
  }
  if (!std::isfinite(r.aggregate)) throw NonFiniteLoss("aggregate");
}

double selection_of(const std::map<std::string, double>& val, const TrainConfig& c, const std::string& pivot) {
  const std::string& key = c.task == TaskMode::kMerchantOnly ? c.merchant_attribute : pivot;
  return val.at(key);
}

struct Progress {
  int epochs_done = 0;
  std::int64_t steps = 0;
  double best_selection = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
};

ordered_json progress_json(const Progress& p, const TrainConfig& c) {
  return {{"epochs_done", p.epochs_done},
          {"steps", p.steps},
          {"best_selection", std::isfinite(p.best_selection) ? json(p.best_selection) : json(nullptr)},
          {"best_epoch", p.best_epoch},
          {"config", c.to_json()}};
}

TrainResult run(Model<float>& model, AdamW& opt, Progress progress, const std::vector<CardSequence>& train_set,
                const std::vector<CardSequence>& val_set, const TrainConfig& config, int end_epoch,
                const TrainHooks& hooks) {
  if (train_set.empty()) throw ValidationError("train", "training partition is empty");
  if (val_set.empty()) throw ValidationError("val", "validation partition is empty");
  const Schema& schema = model.schema();
  const LossOptions options = config.loss_options();
  const std::string pivot = schema.attributes()[static_cast<std::size_t>(schema.layout().pivot)].name;
  TrainResult result;

  for (int epoch = progress.epochs_done; epoch < end_epoch; ++epoch) {
    EpochMetrics metrics;
    metrics.epoch = epoch + 1;
    LossMeans train_means;
    const auto batches = batch(train_set, schema, config.batch_size, config.seed, static_cast<std::uint64_t>(epoch));
    for (const Batch& b : batches) {
      model.params().zero_grad();
      Graph<float> g;
      Rng rng = Rng(config.seed).split("negatives").split(static_cast<std::uint64_t>(progress.steps));
      LossReport report;
      const Var total = model.loss(g, model.forward(g, b), b, options, rng, &report);
      check_finite(report);
      g.backward(total);
      clip_grad_norm(model.params(), config.grad_clip);
      opt.step(model.params());
      ++progress.steps;
      ++metrics.steps;
      train_means.add(report);
      if (hooks.on_step) hooks.on_step(progress.steps, report);
    }
    metrics.train = train_means.means(options);
    metrics.val = validation_losses(model, val_set, config);
    metrics.selection = selection_of(metrics.val, config, pivot);
    progress.epochs_done = epoch + 1;
    if (metrics.selection < progress.best_selection) {
      progress.best_selection = metrics.selection;
      progress.best_epoch = epoch + 1;
      metrics.best = true;
      result.best = make_checkpoint(model);
      result.best.meta["trainer"] = progress_json(progress, config);
    }
    result.history.push_back(metrics);
    if (hooks.on_epoch) hooks.on_epoch(metrics);
  }
  result.total_steps = progress.steps;
  result.last = make_checkpoint(model);
  result.last.meta["trainer"] = progress_json(progress, config);
  result.last.optimizer = opt.state();
  if (result.best.params.empty() && progress.best_epoch == 0) {
    // No epoch ran; the current parameters are the best known.
    result.best = result.last;
    result.best.optimizer.clear();
  }
  return result;
}

}  // namespace

std::map<std::string, double> validation_losses(Model<float>& model, const std::vector<CardSequence>& seqs,
                                                const TrainConfig& config) {
  const LossOptions options = config.loss_options();
  LossMeans means;
  const auto batches = batch_in_order(seqs, model.schema(), config.batch_size);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    Graph<float> g(false);
    Rng rng = Rng(config.seed).split("validation").split(static_cast<std::uint64_t>(i));
    LossReport report;
    model.loss(g, model.forward(g, batches[i]), batches[i], options, rng, &report);
    means.add(report);
  }
  return means.means(options);
}

TrainResult train(const Schema& schema, const std::vector<CardSequence>& train_set,
                  const std::vector<CardSequence>& val_set, const ModelConfig& model_config,
                  const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  Model<float> model(schema, model_config);
  AdamW opt(config);
  return run(model, opt, Progress{}, train_set, val_set, config, config.epochs, hooks);
}

TrainResult resume(const Checkpoint& last, const Schema& schema, const std::vector<CardSequence>& train_set,
                   const std::vector<CardSequence>& val_set, const TrainConfig& config, int extra_epochs,
                   const TrainHooks& hooks) {
  config.validate();
  if (extra_epochs < 0) throw ValidationError("epochs", "must be >= 0");
  if (last.schema_hash != schema.hash()) throw SchemaMismatch("checkpoint schema hash does not match the corpus");
  if (!(last.flags & Checkpoint::kOptimizerState) && last.optimizer.empty()) {
    throw ValidationError("checkpoint", "resume needs a checkpoint with optimizer state");
  }
  if (!last.meta.contains("trainer")) throw ValidationError("checkpoint", "no trainer progress recorded");
  Model<float> model = restore_model(last);
  const json& t = last.meta.at("trainer");
  Progress progress;
  progress.epochs_done = t.at("epochs_done").get<int>();
  progress.steps = t.at("steps").get<std::int64_t>();
  progress.best_selection =
      t.at("best_selection").is_null() ? std::numeric_limits<double>::infinity() : t.at("best_selection").get<double>();
  progress.best_epoch = t.at("best_epoch").get<int>();
  AdamW opt(config);
  opt.restore(last.optimizer, progress.steps);
  TrainResult r = run(model, opt, progress, train_set, val_set, config, progress.epochs_done + extra_epochs, hooks);
  return r;
}

}  // namespace txnf
