#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnf/corpus.hpp"
#include "txnf/model.hpp"
#include "txnf/objective.hpp"
#include "txnf/syngen.hpp"
#include "txnf/trainer.hpp"

namespace txnf {

// ---------------------------------------------------------------------------
// Metrics. Each returns nullopt when it is undefined for the input.

/// Fraction of positions where predicted == truth.
std::optional<double> prec_at_1(std::span<const std::int64_t> predicted, std::span<const std::int64_t> truth);

/// Index of the largest entry of each row; the first one wins ties.
std::vector<std::int64_t> row_argmax(const Mat<float>& logits);

/// Mean of 2|ŷ−y| / (|ŷ|+|y|); a term where both are zero counts as 0.
std::optional<double> smape(std::span<const double> predicted, std::span<const double> truth);

/// Rank-based ROC-AUC with midranks for ties. Undefined for a single class.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct MetricReport {
  std::map<std::string, std::optional<double>> prec_at_1;  // categorical next targets
  std::map<std::string, std::optional<double>> smape;      // numerical next targets
  std::optional<double> auc;                               // pivot flag
  std::string pivot;
  std::int64_t next_positions = 0;    // steps with a scored successor
  std::int64_t signal_positions = 0;  // scored steps
  std::int64_t pivot_positives = 0;

  nlohmann::ordered_json to_json() const;
};

struct EvalOptions {
  int batch_size = 64;
  std::string positive_token = "1";  // pivot token counted as the positive class
};

/// Prec@1 over full-vocabulary logits, sMAPE of exp(μ) and the pivot AUC.
MetricReport evaluate(Model<float>& model, const std::vector<CardSequence>& seqs, const EvalOptions& options = {});

// ---------------------------------------------------------------------------
// Memory benchmark of the high-cardinality loss kernels.

struct BenchmarkConfig {
  int batch = 32;
  int steps = 64;
  int dim = 64;
  std::int64_t cardinality = 4096;
  std::vector<NegativeStrategy> strategies = {NegativeStrategy::kShared, NegativeStrategy::kIndependent};
  // Per batch for the shared strategy, per positive for the independent one.
  std::vector<std::int64_t> n_negatives = {0, 64, 128, 256, 512, 1024};
  std::int64_t cap_elements = std::int64_t{1} << 29;  // forward + backward
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static BenchmarkConfig from_json(const nlohmann::json& j);
};

struct BenchmarkRow {
  NegativeStrategy strategy = NegativeStrategy::kShared;
  std::int64_t n_negative = 0;
  bool exceeded = false;
  std::int64_t forward_elements = 0;  // counted while running
  std::int64_t backward_elements = 0;
  std::int64_t analytic_forward = 0;  // closed form
  std::int64_t analytic_backward = 0;
  std::int64_t peak_heap_bytes = 0;
  double forward_ms = 0.0;
  double backward_ms = 0.0;
  double loss = 0.0;  // mean over unmasked positions
};

struct LinearFit {
  double slope = 0.0, intercept = 0.0, r2 = 0.0;
};
/// Least squares y = slope·x + intercept.
LinearFit fit_line(std::span<const double> x, std::span<const double> y);

struct BenchmarkReport {
  BenchmarkConfig config;
  std::vector<BenchmarkRow> rows;

  const BenchmarkRow* find(NegativeStrategy s, std::int64_t n) const;
  /// Fit of total counted elements against n_negative over the non-exceeded rows of one strategy.
  LinearFit fit(NegativeStrategy s) const;
  nlohmann::ordered_json to_json() const;
  /// Plot-ready rows, one per (strategy, n_negative, pass).
  std::string to_csv() const;
  std::string to_table() const;
};

/// Runs forward and backward of each (strategy, n_negative) kernel on random
/// inputs. Configurations whose analytic footprint exceeds the cap are
/// recorded as exceeded without running.
BenchmarkReport memory_benchmark(const BenchmarkConfig& config);

// ---------------------------------------------------------------------------
// Scaling study.

enum class ScalingAxis { kCards, kHiddenDim };
std::string to_string(ScalingAxis a);
ScalingAxis scaling_axis_from(const std::string& s);

struct ScalingConfig {
  ScalingAxis axis = ScalingAxis::kCards;
  std::vector<std::int64_t> points = {1000, 4000, 16000};
  WorldConfig world;
  std::int64_t train_months = 24;
  std::int64_t val_months = 1;
  std::int64_t test_months = 1;
  std::int64_t max_seq_len = 512;
  std::int64_t cardinality_threshold = kDefaultCardinalityThreshold;
  ModelConfig model;
  TrainConfig train;
  EvalOptions eval;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ScalingConfig from_json(const nlohmann::json& j);
};

struct ScalingRow {
  std::int64_t size = 0;
  double val_pivot_loss = 0.0;  // at the best epoch
  std::optional<double> merchant_prec_at_1;
  std::optional<double> auc;
  std::int64_t train_sequences = 0;
  std::int64_t parameters = 0;
};

struct Monotonicity {
  std::string metric;
  int improving = 0;  // adjacent pairs that moved in the better direction
  int pairs = 0;
  bool monotone() const { return pairs > 0 && improving == pairs; }
};

struct ScalingReport {
  ScalingAxis axis = ScalingAxis::kCards;
  std::vector<ScalingRow> rows;
  std::vector<Monotonicity> summary;

  nlohmann::ordered_json to_json() const;
  std::string to_csv() const;
};

/// Per-axis summary: loss should fall, Prec@1 and AUC should rise.
std::vector<Monotonicity> monotonicity(const std::vector<ScalingRow>& rows);

/// Trains and evaluates one model per point with the config's fixed seeds.
ScalingReport scaling_study(const ScalingConfig& config,
                            const std::function<void(const ScalingRow&)>& on_row = {});

}  // namespace txnf
