#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnf/checkpoint.hpp"
#include "txnf/corpus.hpp"
#include "txnf/model.hpp"

namespace txnf {

struct TrainConfig {
  int epochs = 20;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global norm; 0 disables
  int batch_size = 256;
  Aggregation aggregation = Aggregation::kTreasure;
  TaskMode task = TaskMode::kMulti;
  NegativeStrategy negatives = NegativeStrategy::kShared;
  std::int64_t n_negative = 1024;
  std::string merchant_attribute = "merchant";
  std::uint64_t seed = 0;

  void validate() const;
  LossOptions loss_options() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const TrainConfig& c) : c_(c) {}

  /// One update from the gradients currently held by `params`.
  void step(ParamStore<float>& params);
  std::int64_t steps() const { return t_; }

  std::vector<NamedTensor> state() const;
  void restore(const std::vector<NamedTensor>& state, std::int64_t steps);

 private:
  TrainConfig c_;
  std::int64_t t_ = 0;
  std::map<std::string, Mat<float>> m_, v_;
};

/// Scales every gradient so the global L2 norm is at most max_norm. Returns the norm before scaling.
double clip_grad_norm(ParamStore<float>& params, double max_norm);

struct EpochMetrics {
  int epoch = 0;  // 1-based
  std::int64_t steps = 0;  // optimizer steps taken in this epoch
  std::map<std::string, double> train;  // per-attribute position-weighted means, plus "aggregate"
  std::map<std::string, double> val;
  double selection = 0.0;  // validation quantity the best checkpoint is chosen by
  bool best = false;

  nlohmann::ordered_json to_json() const;
};

/// Per-attribute validation losses (position-weighted means) and their aggregate.
std::map<std::string, double> validation_losses(Model<float>& model, const std::vector<CardSequence>& seqs,
                                                const TrainConfig& config);

struct TrainResult {
  Checkpoint best;  // empty params when this run never improved on the resumed best
  Checkpoint last;  // includes optimizer state and trainer progress
  std::vector<EpochMetrics> history;
  std::int64_t total_steps = 0;
};

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  std::function<void(std::int64_t step, const LossReport&)> on_step;
};

/// Trains from freshly initialized parameters for config.epochs epochs.
TrainResult train(const Schema& schema, const std::vector<CardSequence>& train_set,
                  const std::vector<CardSequence>& val_set, const ModelConfig& model_config,
                  const TrainConfig& config, const TrainHooks& hooks = {});

/// Continues the run saved in `last` for `extra_epochs` more epochs. The
/// checkpoint must carry optimizer state and match the corpus schema.
TrainResult resume(const Checkpoint& last, const Schema& schema, const std::vector<CardSequence>& train_set,
                   const std::vector<CardSequence>& val_set, const TrainConfig& config, int extra_epochs,
                   const TrainHooks& hooks = {});

}  // namespace txnf
