#pragma once

// The sequence model: static and dynamic input modules, a causal pre-norm
// transformer decoder without positional encoding, and two output heads
// ("next" for the following transaction, "current" for the signals of the
// transaction just seen).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnf/autodiff.hpp"
#include "txnf/corpus.hpp"
#include "txnf/objective.hpp"
#include "txnf/schema.hpp"

namespace txnf {

struct ModelConfig {
  int hidden_dim = 256;
  int n_layers = 3;
  int n_heads = 4;
  int input_layers = 3;
  int ffn_multiplier = 4;
  int numeric_width = 8;  // linear width per numerical input attribute
  std::int64_t max_seq_len = 512;
  std::map<std::string, int> attribute_dims;  // overrides of the default embedding width
  std::uint64_t init_seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// min(d, ceil(cardinality^0.25)·8)
int default_attribute_dim(std::int64_t cardinality, int hidden_dim);

enum class TaskMode { kMulti, kMerchantOnly, kAbnormalOnly };
std::string to_string(TaskMode m);
TaskMode task_mode_from(const std::string& s);

struct LossOptions {
  NegativeSamplingPlan plan;
  Aggregation aggregation = Aggregation::kTreasure;
  TaskMode task = TaskMode::kMulti;
  std::string merchant_attribute = "merchant";
};

/// A predicted attribute and the batch column holding its ground truth.
struct Target {
  std::string name;
  int attribute = -1;  // position in the schema
  Kind kind = Kind::kNumerical;
  CardinalityClass cls = CardinalityClass::kNumerical;
  int column = -1;  // column in next_num/next_cat or sig_num/sig_cat
  int slot = -1;    // column in the head's μ/σ block, or index into the head-vector list
};

template <class T>
class Model {
 public:
  struct Head {
    Var mu, sigma;           // [B*T × numerical targets]; invalid when there are none
    std::vector<Var> vecs;  // per categorical target, [B*T × d_attr]
  };
  struct Outputs {
    int batch = 0, steps = 0;
    Var hidden;  // [B*T × d], transaction positions after the final norm
    Head next, current;
  };

  Model(Schema schema, ModelConfig config);

  const Schema& schema() const { return schema_; }
  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  const std::vector<Target>& next_targets() const { return next_; }
  const std::vector<Target>& current_targets() const { return current_; }
  int attribute_dim(const std::string& name) const;

  /// Throws ValidationError when the batch is longer than max_seq_len.
  Outputs forward(Graph<T>& g, const Batch& batch);

  /// head · Eᵀ over the attribute's full table.
  Var logits(Graph<T>& g, Var head, const std::string& attribute);

  /// Per-attribute losses and their aggregate. `report` receives values and weights.
  Var loss(Graph<T>& g, const Outputs& out, const Batch& batch, const LossOptions& options, Rng& rng,
           LossReport* report = nullptr);

  /// Embedding table of a categorical attribute.
  const Mat<T>& embeddings(const std::string& attribute) const;
  void set_embeddings(const std::string& attribute, const Mat<T>& table);

  /// Final-norm hidden state at each card's last valid step, [B × d].
  Mat<T> card_embeddings(const Batch& batch);

 private:
  Var input_module(Graph<T>& g, const std::string& prefix, const std::vector<int>& num_cols,
                   const std::vector<int>& num_attrs, const std::vector<float>& num_block, int num_width,
                   const std::vector<int>& cat_cols, const std::vector<int>& cat_attrs,
                   const std::vector<std::int32_t>& cat_block, int cat_width, std::size_t rows);
  void add_input_module(const std::string& prefix, const std::vector<int>& num_attrs,
                        const std::vector<int>& cat_attrs, Rng& rng);
  void add_head(const std::string& prefix, const std::vector<Target>& targets, Rng& rng);
  Head head(Graph<T>& g, const std::string& prefix, const std::vector<Target>& targets, Var h);
  Var p(Graph<T>& g, const std::string& name) { return g.param(params_.get(name)); }

  Schema schema_;
  ModelConfig config_;
  ParamStore<T> params_;
  std::vector<Target> next_, current_;
  // Input columns fed to the dynamic module (positions in the batch blocks).
  std::vector<int> dyn_num_cols_, dyn_cat_cols_, dyn_num_attrs_, dyn_cat_attrs_;
  std::vector<int> static_num_cols_, static_cat_cols_;
};

/// exp(z), z ~ N(μ, σ).
double sample_numerical(double mu, double sigma, Rng& rng);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace txnf
