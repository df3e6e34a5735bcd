#pragma once

// Two-tower retrieval on post-cutoff (card, merchant) interactions.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnf/autodiff.hpp"
#include "txnf/corpus.hpp"
#include "txnf/embedsvc.hpp"

namespace txnf {

enum class EmbeddingSource { kPretrainedFrozen, kSupervisedScratch };
std::string to_string(EmbeddingSource s);
EmbeddingSource embedding_source_from(const std::string& s);

struct TowerConfig {
  EmbeddingSource source = EmbeddingSource::kPretrainedFrozen;
  std::vector<int> projection = {64, 32};  // layer widths per tower, GELU between layers
  std::int64_t n_negative = 256;           // shared per batch, on top of in-batch positives
  std::vector<int> k = {1, 5, 10, 20};
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TowerConfig from_json(const nlohmann::json& j);
};

struct InteractionSplit {
  std::vector<Interaction> train, val, test;
};

/// Chronological split at the given fractions of the interaction count.
InteractionSplit split_interactions(std::vector<Interaction> xs, double train_fraction = 0.7,
                                    double val_fraction = 0.15);

struct RankingMetrics {
  std::vector<int> k;
  std::vector<double> hr, ndcg;
  std::int64_t queries = 0;

  double hr_at(int k) const;
  double ndcg_at(int k) const;
  nlohmann::ordered_json to_json() const;
};

/// Ranks truth[i] among every row of `items` by dot product with
/// queries.row(i). Ties count against the true item. HR@K is the fraction
/// with rank <= K; NDCG@K averages 1/log2(rank+1) over those hits.
RankingMetrics hr_ndcg(const Mat<float>& queries, const Mat<float>& items, std::span<const std::int32_t> truth,
                       const std::vector<int>& k);

class TwoTower {
 public:
  /// `cards` and `merchants` provide the base tables for the pretrained arm
  /// and the shapes for the scratch arm. The merchant pad row is never a candidate.
  TwoTower(const EmbeddingTable& cards, const EmbeddingTable& merchants, const TowerConfig& config);

  const TowerConfig& config() const { return config_; }
  ParamStore<float>& params() { return params_; }
  const Mat<float>& card_base() const;
  const Mat<float>& merchant_base() const;

  /// Base-table row of a card; unknown cards map to the trailing oov row.
  std::int32_t card_row(std::uint64_t card_id) const;

  Var card_tower(Graph<float>& g, const std::vector<std::int32_t>& rows);
  Var merchant_tower(Graph<float>& g);  // every candidate merchant

  Mat<float> card_vectors(const std::vector<Interaction>& xs);
  Mat<float> merchant_vectors();

  std::int64_t candidates() const { return candidates_; }

 private:
  Var tower(Graph<float>& g, Var base, const std::string& prefix);

  TowerConfig config_;
  std::map<std::uint64_t, std::int32_t> card_index_;
  Mat<float> frozen_cards_, frozen_merchants_;
  std::int64_t candidates_ = 0;
  ParamStore<float> params_;
};

struct TwoTowerRun {
  std::vector<double> train_loss;       // per epoch
  std::vector<RankingMetrics> val;      // per epoch
  int best_epoch = 0;                   // 0 when no epoch ran
};

/// Sampled-softmax training; parameters end at the epoch with the best
/// validation NDCG at the largest K <= 10.
TwoTowerRun train_two_tower(TwoTower& model, const InteractionSplit& data);

RankingMetrics evaluate_two_tower(TwoTower& model, const std::vector<Interaction>& xs, const std::vector<int>& k);

struct RecComparison {
  RankingMetrics pretrained, scratch;
  TwoTowerRun pretrained_run, scratch_run;
  std::int64_t train = 0, val = 0, test = 0;

  nlohmann::ordered_json to_json() const;
  /// arm,k,hr,ndcg
  std::string to_csv() const;
};

/// Trains both arms with the same architecture and seed on `data`.
RecComparison compare_arms(const EmbeddingTable& cards, const EmbeddingTable& merchants, const InteractionSplit& data,
                           TowerConfig config);

}  // namespace txnf
