#pragma once

// Training objectives: log-normal NLL for numerical targets, full softmax
// cross-entropy for low-cardinality targets, InfoNCE with shared or
// independent negatives for high-cardinality targets, and the pivot-scaled
// loss aggregation.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnf/autodiff.hpp"
#include "txnf/rng.hpp"

namespace txnf {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2π)/2

// ---------------------------------------------------------------------------
// Per-position primitives

/// (y−μ)²/(2σ²) + log σ + log(2π)/2
template <class T>
T nll_normal(T mu, T sigma, T y) {
  if (!(sigma > T(0))) throw Error("nll_normal: sigma must be positive");
  const T r = y - mu;
  return r * r / (T(2) * sigma * sigma) + std::log(sigma) + T(kHalfLog2Pi);
}

template <class T>
struct NllGrad {
  T dmu, dsigma;
};

template <class T>
NllGrad<T> nll_normal_grad(T mu, T sigma, T y) {
  const T r = y - mu;
  return {-r / (sigma * sigma), T(1) / sigma - r * r / (sigma * sigma * sigma)};
}

/// −log softmax(z)[y]
template <class T>
T cross_entropy(std::span<const T> logits, std::int64_t y) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T z : logits) mx = std::max(mx, z);
  T sum = T(0);
  for (T z : logits) sum += std::exp(z - mx);
  return mx + std::log(sum) - logits[static_cast<std::size_t>(y)];
}

// ---------------------------------------------------------------------------
// Intermediate-memory accounting for the high-cardinality losses.

struct MemoryCounter {
  std::int64_t forward_elements = 0;
  std::int64_t backward_elements = 0;
  // Heap high-water mark above the baseline taken at reset(), sampled after
  // each tracked allocation. Zero where the platform exposes no heap stats.
  std::int64_t peak_heap_bytes = 0;

  void reset();
  void allocated(std::int64_t elements, bool backward);

 private:
  std::int64_t baseline_ = 0;
};

/// Bytes currently allocated from the heap, or -1 if unavailable.
std::int64_t heap_in_use();

enum class NegativeStrategy { kShared, kIndependent, kExhaustive };

struct NegativeSamplingPlan {
  NegativeStrategy strategy = NegativeStrategy::kShared;
  std::int64_t n_negative = 1024;  // per batch (shared) or per positive (independent)
  std::uint64_t seed = 0;

  static NegativeSamplingPlan shared(std::int64_t n = 1024, std::uint64_t seed = 0) {
    return {NegativeStrategy::kShared, n, seed};
  }
  static NegativeSamplingPlan independent(std::int64_t n = 5, std::uint64_t seed = 0) {
    return {NegativeStrategy::kIndependent, n, seed};
  }
  static NegativeSamplingPlan exhaustive() { return {NegativeStrategy::kExhaustive, 0, 0}; }
};

std::string to_string(NegativeStrategy s);
NegativeStrategy negative_strategy_from(const std::string& s);

/// n indices drawn uniformly with replacement from [0, cardinality).
std::vector<std::int32_t> sample_negatives(std::int64_t cardinality, std::int64_t n, Rng& rng);

// ---------------------------------------------------------------------------
// High-cardinality losses. Inputs are laid out as rows b*steps + t:
//   hidden [B*T × d], table [C × d], labels [B*T], mask [B*T].
// Output is [B × T]; masked positions are 0.

/// InfoNCE with one negative set shared by every sample and step. At step
/// t the candidates for row (b, t) are the positives of every unmasked
/// sample at step t plus all negatives. With `unique_candidates`, each
/// category index enters the candidate set once (the exhaustive oracle).
template <class T>
class SharedNegativeLoss {
 public:
  Mat<T> forward(const Mat<T>& hidden, const Mat<T>& table, std::span<const std::int32_t> labels,
                 std::span<const std::uint8_t> mask, int batch, int steps, std::vector<std::int32_t> negatives,
                 bool unique_candidates = false, MemoryCounter* mem = nullptr);

  /// upstream [B × T] = dLoss_total/dloss[b, t]. hidden and table must be
  /// the forward inputs. Accumulates into d_hidden [B*T × d] and d_table
  /// [C × d] when non-null.
  void backward(const Mat<T>& upstream, const Mat<T>& hidden, const Mat<T>& table, Mat<T>* d_hidden,
                Mat<T>* d_table, MemoryCounter* mem = nullptr) const;

 private:
  bool include_pos(int i, int l, int t) const;
  bool include_neg(std::size_t m, int t) const;

  std::vector<std::int32_t> labels_;
  std::vector<std::uint8_t> mask_;
  std::vector<std::int32_t> negatives_;
  int batch_ = 0, steps_ = 0;
  bool unique_ = false;
  Mat<T> pos_rows_;  // P = E[y]         [B*T × d]
  Mat<T> neg_rows_;  // N = E[negatives] [n × d]
  std::vector<Mat<T>> dot_pos_;  // per step [B × B]: H[i,t]·P[l,t]
  Mat<T> dot_neg_;               // [B*T × n]
  Mat<T> lse_;                   // [B × T]
  std::vector<std::vector<std::uint8_t>> neg_keep_;  // per step, unique mode only
};

/// InfoNCE with `n_per_positive` negatives drawn independently for every
/// (sample, step); no cross-sample positives.
template <class T>
class IndependentNegativeLoss {
 public:
  Mat<T> forward(const Mat<T>& hidden, const Mat<T>& table, std::span<const std::int32_t> labels,
                 std::span<const std::uint8_t> mask, int batch, int steps, std::int64_t n_per_positive, Rng& rng,
                 MemoryCounter* mem = nullptr);
  void backward(const Mat<T>& upstream, const Mat<T>& hidden, const Mat<T>& table, Mat<T>* d_hidden,
                Mat<T>* d_table, MemoryCounter* mem = nullptr) const;

  const std::vector<std::int32_t>& negatives() const { return negatives_; }

 private:
  std::vector<std::int32_t> labels_;
  std::vector<std::uint8_t> mask_;
  std::vector<std::int32_t> negatives_;  // [B*T × n]
  int batch_ = 0, steps_ = 0;
  std::int64_t n_ = 0;
  Mat<T> pos_rows_;  // [B*T × d]
  Mat<T> neg_rows_;  // [B*T*n × d]
  Mat<T> dot_pos_;   // [B*T × 1]
  Mat<T> dot_neg_;   // [B*T × n]
  Mat<T> lse_;       // [B*T × 1]
};

inline constexpr std::int64_t kExhaustiveCardinalityLimit = std::int64_t{1} << 16;

/// Full-softmax cross-entropy over hidden·tableᵀ. Refuses tables larger than 2^16 rows.
template <class T>
class ExhaustiveLoss {
 public:
  Mat<T> forward(const Mat<T>& hidden, const Mat<T>& table, std::span<const std::int32_t> labels,
                 std::span<const std::uint8_t> mask, int batch, int steps, MemoryCounter* mem = nullptr);
  void backward(const Mat<T>& upstream, const Mat<T>& hidden, const Mat<T>& table, Mat<T>* d_hidden,
                Mat<T>* d_table, MemoryCounter* mem = nullptr) const;

 private:
  std::vector<std::int32_t> labels_;
  std::vector<std::uint8_t> mask_;
  int batch_ = 0, steps_ = 0;
  Mat<T> prob_;  // softmax [B*T × C]
};

/// Convenience value-only wrappers with the loss_hcat_* call shapes.
template <class T>
Mat<T> loss_hcat_shared(const Mat<T>& hidden, const Mat<T>& table, std::span<const std::int32_t> labels,
                        std::span<const std::uint8_t> mask, int batch, int steps, std::int64_t n_negative,
                        std::uint64_t seed) {
  Rng rng(seed);
  SharedNegativeLoss<T> loss;
  return loss.forward(hidden, table, labels, mask, batch, steps, sample_negatives(table.rows(), n_negative, rng));
}

template <class T>
Mat<T> loss_hcat_independent(const Mat<T>& hidden, const Mat<T>& table, std::span<const std::int32_t> labels,
                             std::span<const std::uint8_t> mask, int batch, int steps, std::int64_t n_per_positive,
                             std::uint64_t seed) {
  Rng rng(seed);
  IndependentNegativeLoss<T> loss;
  return loss.forward(hidden, table, labels, mask, batch, steps, n_per_positive, rng);
}

template <class T>
Mat<T> loss_hcat_exhaustive(const Mat<T>& hidden, const Mat<T>& table, std::span<const std::int32_t> labels,
                            std::span<const std::uint8_t> mask, int batch, int steps) {
  ExhaustiveLoss<T> loss;
  return loss.forward(hidden, table, labels, mask, batch, steps);
}

/// Analytic intermediate element counts of one forward (and backward) pass.
struct HcatFootprint {
  std::int64_t forward = 0;
  std::int64_t backward = 0;
};
HcatFootprint hcat_footprint(NegativeStrategy s, std::int64_t batch, std::int64_t steps, std::int64_t dim,
                             std::int64_t n_negative, std::int64_t cardinality = 0);

// ---------------------------------------------------------------------------
// Aggregation

enum class Aggregation { kTreasure, kSimple, kEqual };
std::string to_string(Aggregation a);
Aggregation aggregation_from(const std::string& s);

/// Detached per-term weights such that value == pivot_weight·L_pivot + Σ wᵢ·Lᵢ.
struct AggregateWeights {
  double pivot_weight = 1.0;
  std::vector<double> weights;
  double value = 0.0;
};

/// kTreasure: L_pivot + (1/n)·Σ min(Lᵢ, Lᵢ·L̂_pivot/L̂ᵢ), hats detached.
/// kSimple:   L_pivot + Σ Lᵢ.
/// kEqual:    Σ L/|L̂| over every term including the pivot; each term's magnitude is 1.
AggregateWeights aggregate(double pivot_loss, std::span<const double> losses, Aggregation mode);

/// Per-attribute losses of one step together with their aggregate.
struct LossReport {
  struct Entry {
    std::string name;
    double value = 0.0;
    double weight = 0.0;  // detached multiplier used in the aggregate
    std::int64_t positions = 0;
  };
  std::vector<Entry> entries;  // every target attribute, pivot included
  std::string pivot;
  double aggregate = 0.0;

  double value(const std::string& name) const;
  const Entry* find(const std::string& name) const;
  nlohmann::ordered_json to_json() const;
};

// ---------------------------------------------------------------------------
// Graph ops. Each returns a 1x1 node holding the mean over unmasked
// positions (0 when there are none).

/// Mean NLL of column `col` of mu/sigma against log-scale targets.
template <class T>
Var nll_loss(Graph<T>& g, Var mu, Var sigma, Eigen::Index col, std::vector<T> y_log, std::vector<std::uint8_t> mask) {
  const Mat<T>& M = g.value(mu);
  const Mat<T>& S = g.value(sigma);
  if (static_cast<std::size_t>(M.rows()) != y_log.size() || y_log.size() != mask.size()) {
    throw Error("nll_loss shape mismatch");
  }
  std::int64_t n = 0;
  T total = T(0);
  for (std::size_t r = 0; r < y_log.size(); ++r) {
    if (!mask[r]) continue;
    ++n;
    total += nll_normal(M(Eigen::Index(r), col), S(Eigen::Index(r), col), y_log[r]);
  }
  Mat<T> out(1, 1);
  out(0, 0) = n ? total / T(n) : T(0);
  const bool needs = g.needs_grad(mu) || g.needs_grad(sigma);
  return g.push(std::move(out), needs && n > 0,
                [mu, sigma, col, n, y = std::move(y_log), mask = std::move(mask)](Graph<T>& g, Var self) {
                  const T up = g.grad(self)(0, 0) / T(n);
                  const Mat<T>& M = g.value(mu);
                  const Mat<T>& S = g.value(sigma);
                  Mat<T>* gm = g.needs_grad(mu) ? &g.grad(mu) : nullptr;
                  Mat<T>* gs = g.needs_grad(sigma) ? &g.grad(sigma) : nullptr;
                  for (std::size_t r = 0; r < y.size(); ++r) {
                    if (!mask[r]) continue;
                    const auto d = nll_normal_grad(M(Eigen::Index(r), col), S(Eigen::Index(r), col), y[r]);
                    if (gm) (*gm)(Eigen::Index(r), col) += up * d.dmu;
                    if (gs) (*gs)(Eigen::Index(r), col) += up * d.dsigma;
                  }
                });
}

/// Mean −log softmax(logits[r])[labels[r]] over unmasked rows.
template <class T>
Var softmax_ce_loss(Graph<T>& g, Var logits, std::vector<std::int32_t> labels, std::vector<std::uint8_t> mask) {
  const Mat<T>& Z = g.value(logits);
  if (static_cast<std::size_t>(Z.rows()) != labels.size() || labels.size() != mask.size()) {
    throw Error("softmax_ce_loss shape mismatch");
  }
  Mat<T> prob(Z.rows(), Z.cols());
  std::int64_t n = 0;
  T total = T(0);
  for (Eigen::Index r = 0; r < Z.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    ++n;
    const T mx = Z.row(r).maxCoeff();
    prob.row(r) = (Z.row(r).array() - mx).exp();
    const T sum = prob.row(r).sum();
    prob.row(r) /= sum;
    total += mx + std::log(sum) - Z(r, labels[static_cast<std::size_t>(r)]);
  }
  Mat<T> out(1, 1);
  out(0, 0) = n ? total / T(n) : T(0);
  return g.push(std::move(out), g.needs_grad(logits) && n > 0,
                [logits, n, labels = std::move(labels), mask = std::move(mask), prob = std::move(prob)](Graph<T>& g,
                                                                                                       Var self) {
                  const T up = g.grad(self)(0, 0) / T(n);
                  Mat<T>& gz = g.grad(logits);
                  for (Eigen::Index r = 0; r < gz.rows(); ++r) {
                    if (!mask[static_cast<std::size_t>(r)]) continue;
                    gz.row(r) += up * prob.row(r);
                    gz(r, labels[static_cast<std::size_t>(r)]) -= up;
                  }
                });
}

/// Mean high-cardinality loss under the given sampling plan. Negatives are
/// drawn from `rng`.
template <class T>
Var hcat_loss(Graph<T>& g, Var hidden, Var table, std::vector<std::int32_t> labels, std::vector<std::uint8_t> mask,
              int batch, int steps, const NegativeSamplingPlan& plan, Rng& rng) {
  const Mat<T>& H = g.value(hidden);
  const Mat<T>& E = g.value(table);
  std::int64_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  Mat<T> per;
  std::function<void(const Mat<T>&, const Mat<T>&, const Mat<T>&, Mat<T>*, Mat<T>*)> back;
  switch (plan.strategy) {
    case NegativeStrategy::kShared: {
      auto k = std::make_shared<SharedNegativeLoss<T>>();
      per = k->forward(H, E, labels, mask, batch, steps, sample_negatives(E.rows(), plan.n_negative, rng));
      back = [k](const Mat<T>& u, const Mat<T>& h, const Mat<T>& e, Mat<T>* dh, Mat<T>* de) { k->backward(u, h, e, dh, de); };
      break;
    }
    case NegativeStrategy::kIndependent: {
      auto k = std::make_shared<IndependentNegativeLoss<T>>();
      per = k->forward(H, E, labels, mask, batch, steps, plan.n_negative, rng);
      back = [k](const Mat<T>& u, const Mat<T>& h, const Mat<T>& e, Mat<T>* dh, Mat<T>* de) { k->backward(u, h, e, dh, de); };
      break;
    }
    case NegativeStrategy::kExhaustive: {
      auto k = std::make_shared<ExhaustiveLoss<T>>();
      per = k->forward(H, E, labels, mask, batch, steps);
      back = [k](const Mat<T>& u, const Mat<T>& h, const Mat<T>& e, Mat<T>* dh, Mat<T>* de) { k->backward(u, h, e, dh, de); };
      break;
    }
  }
  Mat<T> out(1, 1);
  out(0, 0) = n ? per.sum() / T(n) : T(0);
  const bool needs = (g.needs_grad(hidden) || g.needs_grad(table)) && n > 0;
  return g.push(std::move(out), needs, [hidden, table, n, batch, steps, back](Graph<T>& g, Var self) {
    const Mat<T> up = Mat<T>::Constant(batch, steps, g.grad(self)(0, 0) / T(n));
    back(up, g.value(hidden), g.value(table), g.needs_grad(hidden) ? &g.grad(hidden) : nullptr,
         g.needs_grad(table) ? &g.grad(table) : nullptr);
  });
}

}  // namespace txnf
