#include "txnf/objective.hpp"

#include <algorithm>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "txnf/error.hpp"

namespace txnf {

std::int64_t heap_in_use() {
#if defined(__GLIBC__) && (__GLIBC__ > 2 || (__GLIBC__ == 2 && __GLIBC_MINOR__ >= 33))
  const struct mallinfo2 mi = mallinfo2();
  return static_cast<std::int64_t>(mi.uordblks + mi.hblkhd);
#else
  return -1;
#endif
}

void MemoryCounter::reset() {
  forward_elements = backward_elements = peak_heap_bytes = 0;
  baseline_ = heap_in_use();
}

void MemoryCounter::allocated(std::int64_t elements, bool backward) {
  (backward ? backward_elements : forward_elements) += elements;
  const std::int64_t now = heap_in_use();
  if (now >= 0 && baseline_ >= 0) peak_heap_bytes = std::max(peak_heap_bytes, now - baseline_);
}

namespace {

void track(MemoryCounter* mem, std::int64_t elements, bool backward) {
  if (mem) mem->allocated(elements, backward);
}

template <class T>
Mat<T> gather(const Mat<T>& table, std::span<const std::int32_t> index) {
  Mat<T> out(static_cast<Eigen::Index>(index.size()), table.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= table.rows()) throw Error("category index out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.row(index[i]);
  }
  return out;
}

void check_layout(std::size_t labels, std::size_t mask, Eigen::Index rows, int batch, int steps) {
  const auto n = static_cast<std::size_t>(batch) * static_cast<std::size_t>(steps);
  if (labels != n || mask != n || static_cast<std::size_t>(rows) != n) throw Error("hcat loss: inconsistent shapes");
}

}  // namespace

std::string to_string(NegativeStrategy s) {
  switch (s) {
    case NegativeStrategy::kShared: return "shared";
    case NegativeStrategy::kIndependent: return "independent";
    case NegativeStrategy::kExhaustive: return "exhaustive";
  }
  return "?";
}

NegativeStrategy negative_strategy_from(const std::string& s) {
  if (s == "shared") return NegativeStrategy::kShared;
  if (s == "independent") return NegativeStrategy::kIndependent;
  if (s == "exhaustive") return NegativeStrategy::kExhaustive;
  throw ValidationError("negative_sampling.strategy", "unknown strategy '" + s + "'");
}

std::vector<std::int32_t> sample_negatives(std::int64_t cardinality, std::int64_t n, Rng& rng) {
  if (n < 0) throw ValidationError("n_negative", "must be >= 0");
  std::vector<std::int32_t> out(static_cast<std::size_t>(n));
  for (auto& v : out) v = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(cardinality)));
  return out;
}

// ---------------------------------------------------------------------------
// Shared negatives

template <class T>
bool SharedNegativeLoss<T>::include_pos(int i, int l, int t) const {
  const auto row = [&](int b) { return static_cast<std::size_t>(b) * static_cast<std::size_t>(steps_) + static_cast<std::size_t>(t); };
  if (!mask_[row(l)]) return false;
  if (l == i || !unique_) return true;
  const auto label = labels_[row(l)];
  if (label == labels_[row(i)]) return false;
  for (int k = 0; k < l; ++k) {
    if (mask_[row(k)] && labels_[row(k)] == label) return false;
  }
  return true;
}

template <class T>
bool SharedNegativeLoss<T>::include_neg(std::size_t m, int t) const {
  return !unique_ || neg_keep_[static_cast<std::size_t>(t)][m] != 0;
}

template <class T>
Mat<T> SharedNegativeLoss<T>::forward(const Mat<T>& hidden, const Mat<T>& table, std::span<const std::int32_t> labels,
                                      std::span<const std::uint8_t> mask, int batch, int steps,
                                      std::vector<std::int32_t> negatives, bool unique_candidates,
                                      MemoryCounter* mem) {
  check_layout(labels.size(), mask.size(), hidden.rows(), batch, steps);
  if (hidden.cols() != table.cols()) throw Error("hcat loss: hidden and table widths differ");
  labels_.assign(labels.begin(), labels.end());
  mask_.assign(mask.begin(), mask.end());
  negatives_ = std::move(negatives);
  batch_ = batch;
  steps_ = steps;
  unique_ = unique_candidates;
  const auto B = static_cast<Eigen::Index>(batch), Tn = static_cast<Eigen::Index>(steps);
  const auto n = static_cast<Eigen::Index>(negatives_.size());
  const Eigen::Index d = hidden.cols();

  pos_rows_ = gather(table, labels_);
  track(mem, B * Tn * d, false);
  neg_rows_ = gather(table, negatives_);
  track(mem, n * d, false);

  dot_pos_.assign(static_cast<std::size_t>(steps), Mat<T>());
  Mat<T> ht(B, d), pt(B, d);
  for (int t = 0; t < steps; ++t) {
    for (Eigen::Index b = 0; b < B; ++b) {
      ht.row(b) = hidden.row(b * Tn + t);
      pt.row(b) = pos_rows_.row(b * Tn + t);
    }
    dot_pos_[static_cast<std::size_t>(t)].noalias() = ht * pt.transpose();
  }
  track(mem, B * B * Tn, false);
  dot_neg_.noalias() = hidden * neg_rows_.transpose();
  track(mem, B * Tn * n, false);

  neg_keep_.clear();
  if (unique_) {
    neg_keep_.assign(static_cast<std::size_t>(steps), std::vector<std::uint8_t>(negatives_.size(), 1));
    for (int t = 0; t < steps; ++t) {
      std::unordered_set<std::int32_t> seen;
      for (int b = 0; b < batch; ++b) {
        const auto r = static_cast<std::size_t>(b * steps + t);
        if (mask_[r]) seen.insert(labels_[r]);
      }
      for (std::size_t m = 0; m < negatives_.size(); ++m) {
        if (!seen.insert(negatives_[m]).second) neg_keep_[static_cast<std::size_t>(t)][m] = 0;
      }
    }
  }

  lse_ = Mat<T>::Zero(B, Tn);
  Mat<T> loss = Mat<T>::Zero(B, Tn);
  track(mem, 2 * B * Tn, false);
  for (int t = 0; t < steps; ++t) {
    const Mat<T>& dp = dot_pos_[static_cast<std::size_t>(t)];
    for (int i = 0; i < batch; ++i) {
      const Eigen::Index r = Eigen::Index(i) * Tn + t;
      if (!mask_[static_cast<std::size_t>(r)]) continue;
      T mx = -std::numeric_limits<T>::infinity();
      for (int l = 0; l < batch; ++l) {
        if (include_pos(i, l, t)) mx = std::max(mx, dp(i, l));
      }
      for (Eigen::Index m = 0; m < n; ++m) {
        if (include_neg(static_cast<std::size_t>(m), t)) mx = std::max(mx, dot_neg_(r, m));
      }
      T sum = T(0);
      for (int l = 0; l < batch; ++l) {
        if (include_pos(i, l, t)) sum += std::exp(dp(i, l) - mx);
      }
      for (Eigen::Index m = 0; m < n; ++m) {
        if (include_neg(static_cast<std::size_t>(m), t)) sum += std::exp(dot_neg_(r, m) - mx);
      }
      lse_(i, t) = mx + std::log(sum);
      loss(i, t) = lse_(i, t) - dp(i, i);
    }
  }
  return loss;
}

template <class T>
void SharedNegativeLoss<T>::backward(const Mat<T>& upstream, const Mat<T>& hidden, const Mat<T>& table,
                                     Mat<T>* d_hidden, Mat<T>* d_table, MemoryCounter* mem) const {
  const auto B = static_cast<Eigen::Index>(batch_), Tn = static_cast<Eigen::Index>(steps_);
  const auto n = static_cast<Eigen::Index>(negatives_.size());
  const Eigen::Index d = hidden.cols();
  (void)table;

  std::vector<Mat<T>> g_pos(static_cast<std::size_t>(steps_), Mat<T>::Zero(B, B));
  track(mem, B * B * Tn, true);
  Mat<T> g_neg = Mat<T>::Zero(B * Tn, n);
  track(mem, B * Tn * n, true);
  for (int t = 0; t < steps_; ++t) {
    const Mat<T>& dp = dot_pos_[static_cast<std::size_t>(t)];
    Mat<T>& gp = g_pos[static_cast<std::size_t>(t)];
    for (int i = 0; i < batch_; ++i) {
      const Eigen::Index r = Eigen::Index(i) * Tn + t;
      if (!mask_[static_cast<std::size_t>(r)]) continue;
      const T u = upstream(i, t);
      if (u == T(0)) continue;
      const T lse = lse_(i, t);
      for (int l = 0; l < batch_; ++l) {
        if (include_pos(i, l, t)) gp(i, l) = u * std::exp(dp(i, l) - lse);
      }
      gp(i, i) -= u;
      for (Eigen::Index m = 0; m < n; ++m) {
        if (include_neg(static_cast<std::size_t>(m), t)) g_neg(r, m) = u * std::exp(dot_neg_(r, m) - lse);
      }
    }
  }

  Mat<T> ht(B, d), pt(B, d);
  Mat<T> d_pos = Mat<T>::Zero(B * Tn, d);
  track(mem, B * Tn * d, true);
  Mat<T> dh;
  if (d_hidden) {
    dh.noalias() = g_neg * neg_rows_;
    track(mem, B * Tn * d, true);
  }
  for (int t = 0; t < steps_; ++t) {
    const Mat<T>& gp = g_pos[static_cast<std::size_t>(t)];
    for (Eigen::Index b = 0; b < B; ++b) {
      ht.row(b) = hidden.row(b * Tn + t);
      pt.row(b) = pos_rows_.row(b * Tn + t);
    }
    const Mat<T> dpt = gp.transpose() * ht;
    for (Eigen::Index b = 0; b < B; ++b) d_pos.row(b * Tn + t) = dpt.row(b);
    if (d_hidden) {
      const Mat<T> dht = gp * pt;
      for (Eigen::Index b = 0; b < B; ++b) dh.row(b * Tn + t) += dht.row(b);
    }
  }
  if (d_hidden) *d_hidden += dh;
  if (d_table) {
    Mat<T> d_neg;
    d_neg.noalias() = g_neg.transpose() * hidden;
    track(mem, n * d, true);
    for (Eigen::Index r = 0; r < B * Tn; ++r) {
      if (mask_[static_cast<std::size_t>(r)]) d_table->row(labels_[static_cast<std::size_t>(r)]) += d_pos.row(r);
    }
    for (Eigen::Index m = 0; m < n; ++m) d_table->row(negatives_[static_cast<std::size_t>(m)]) += d_neg.row(m);
  }
}

// ---------------------------------------------------------------------------
// Independent negatives

template <class T>
Mat<T> IndependentNegativeLoss<T>::forward(const Mat<T>& hidden, const Mat<T>& table,
                                           std::span<const std::int32_t> labels, std::span<const std::uint8_t> mask,
                                           int batch, int steps, std::int64_t n_per_positive, Rng& rng,
                                           MemoryCounter* mem) {
  check_layout(labels.size(), mask.size(), hidden.rows(), batch, steps);
  if (hidden.cols() != table.cols()) throw Error("hcat loss: hidden and table widths differ");
  if (n_per_positive < 0) throw ValidationError("n_negative", "must be >= 0");
  labels_.assign(labels.begin(), labels.end());
  mask_.assign(mask.begin(), mask.end());
  batch_ = batch;
  steps_ = steps;
  n_ = n_per_positive;
  const Eigen::Index rows = hidden.rows(), d = hidden.cols(), n = n_per_positive;

  negatives_.assign(static_cast<std::size_t>(rows * n), 0);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (!mask_[static_cast<std::size_t>(r)]) continue;
    for (Eigen::Index m = 0; m < n; ++m) {
      negatives_[static_cast<std::size_t>(r * n + m)] =
          static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(table.rows())));
    }
  }
  pos_rows_ = gather(table, labels_);
  track(mem, rows * d, false);
  neg_rows_ = gather(table, negatives_);
  track(mem, rows * n * d, false);
  dot_pos_ = (hidden.array() * pos_rows_.array()).rowwise().sum().matrix();
  track(mem, rows, false);
  dot_neg_.resize(rows, n);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (n > 0) dot_neg_.row(r).noalias() = hidden.row(r) * neg_rows_.middleRows(r * n, n).transpose();
  }
  track(mem, rows * n, false);

  lse_ = Mat<T>::Zero(rows, 1);
  Mat<T> loss = Mat<T>::Zero(batch, steps);
  track(mem, 2 * rows, false);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (!mask_[static_cast<std::size_t>(r)]) continue;
    T mx = dot_pos_(r, 0);
    for (Eigen::Index m = 0; m < n; ++m) mx = std::max(mx, dot_neg_(r, m));
    T sum = std::exp(dot_pos_(r, 0) - mx);
    for (Eigen::Index m = 0; m < n; ++m) sum += std::exp(dot_neg_(r, m) - mx);
    lse_(r, 0) = mx + std::log(sum);
    loss(r / steps, r % steps) = lse_(r, 0) - dot_pos_(r, 0);
  }
  return loss;
}

template <class T>
void IndependentNegativeLoss<T>::backward(const Mat<T>& upstream, const Mat<T>& hidden, const Mat<T>& table,
                                          Mat<T>* d_hidden, Mat<T>* d_table, MemoryCounter* mem) const {
  (void)table;
  const Eigen::Index rows = hidden.rows(), d = hidden.cols(), n = n_;
  Mat<T> g_pos = Mat<T>::Zero(rows, 1);
  track(mem, rows, true);
  Mat<T> g_neg = Mat<T>::Zero(rows, n);
  track(mem, rows * n, true);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (!mask_[static_cast<std::size_t>(r)]) continue;
    const T u = upstream(r / steps_, r % steps_);
    g_pos(r, 0) = u * (std::exp(dot_pos_(r, 0) - lse_(r, 0)) - T(1));
    for (Eigen::Index m = 0; m < n; ++m) g_neg(r, m) = u * std::exp(dot_neg_(r, m) - lse_(r, 0));
  }
  Mat<T> d_pos = (hidden.array().colwise() * g_pos.col(0).array()).matrix();
  track(mem, rows * d, true);
  Mat<T> d_neg(rows * n, d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index m = 0; m < n; ++m) d_neg.row(r * n + m) = g_neg(r, m) * hidden.row(r);
  }
  track(mem, rows * n * d, true);
  if (d_hidden) {
    Mat<T> dh = (pos_rows_.array().colwise() * g_pos.col(0).array()).matrix();
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (n > 0) dh.row(r).noalias() += g_neg.row(r) * neg_rows_.middleRows(r * n, n);
    }
    track(mem, rows * d, true);
    *d_hidden += dh;
  }
  if (d_table) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (!mask_[static_cast<std::size_t>(r)]) continue;
      d_table->row(labels_[static_cast<std::size_t>(r)]) += d_pos.row(r);
      for (Eigen::Index m = 0; m < n; ++m) {
        d_table->row(negatives_[static_cast<std::size_t>(r * n + m)]) += d_neg.row(r * n + m);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Exhaustive

template <class T>
Mat<T> ExhaustiveLoss<T>::forward(const Mat<T>& hidden, const Mat<T>& table, std::span<const std::int32_t> labels,
                                  std::span<const std::uint8_t> mask, int batch, int steps, MemoryCounter* mem) {
  check_layout(labels.size(), mask.size(), hidden.rows(), batch, steps);
  if (table.rows() > kExhaustiveCardinalityLimit) {
    throw Error("exhaustive loss refuses cardinality " + std::to_string(table.rows()) + " > 2^16");
  }
  labels_.assign(labels.begin(), labels.end());
  mask_.assign(mask.begin(), mask.end());
  batch_ = batch;
  steps_ = steps;
  prob_.noalias() = hidden * table.transpose();
  track(mem, prob_.size(), false);
  Mat<T> loss = Mat<T>::Zero(batch, steps);
  track(mem, 2 * hidden.rows(), false);
  for (Eigen::Index r = 0; r < prob_.rows(); ++r) {
    if (!mask_[static_cast<std::size_t>(r)]) {
      prob_.row(r).setZero();
      continue;
    }
    const T mx = prob_.row(r).maxCoeff();
    const T target = prob_(r, labels_[static_cast<std::size_t>(r)]);
    prob_.row(r) = (prob_.row(r).array() - mx).exp();
    const T sum = prob_.row(r).sum();
    prob_.row(r) /= sum;
    loss(r / steps, r % steps) = mx + std::log(sum) - target;
  }
  return loss;
}

template <class T>
void ExhaustiveLoss<T>::backward(const Mat<T>& upstream, const Mat<T>& hidden, const Mat<T>& table, Mat<T>* d_hidden,
                                 Mat<T>* d_table, MemoryCounter* mem) const {
  Mat<T> g = prob_;
  track(mem, g.size(), true);
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    if (!mask_[static_cast<std::size_t>(r)]) continue;
    const T u = upstream(r / steps_, r % steps_);
    g.row(r) *= u;
    g(r, labels_[static_cast<std::size_t>(r)]) -= u;
  }
  if (d_hidden) {
    d_hidden->noalias() += g * table;
    track(mem, hidden.size(), true);
  }
  if (d_table) {
    d_table->noalias() += g.transpose() * hidden;
    track(mem, table.size(), true);
  }
}

template class SharedNegativeLoss<float>;
template class SharedNegativeLoss<double>;
template class IndependentNegativeLoss<float>;
template class IndependentNegativeLoss<double>;
template class ExhaustiveLoss<float>;
template class ExhaustiveLoss<double>;

HcatFootprint hcat_footprint(NegativeStrategy s, std::int64_t B, std::int64_t T, std::int64_t d, std::int64_t n,
                             std::int64_t C) {
  const std::int64_t bt = B * T;
  switch (s) {
    case NegativeStrategy::kShared:
      return {bt * d + n * d + B * B * T + bt * n + 2 * bt, B * B * T + bt * n + bt * d + bt * d + n * d};
    case NegativeStrategy::kIndependent:
      return {bt * d + bt * n * d + bt + bt * n + 2 * bt, bt + bt * n + bt * d + bt * n * d + bt * d};
    case NegativeStrategy::kExhaustive:
      return {bt * C + 2 * bt, bt * C + bt * d + C * d};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Aggregation

std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::kTreasure: return "treasure";
    case Aggregation::kSimple: return "simple";
    case Aggregation::kEqual: return "equal";
  }
  return "?";
}

Aggregation aggregation_from(const std::string& s) {
  if (s == "treasure") return Aggregation::kTreasure;
  if (s == "simple") return Aggregation::kSimple;
  if (s == "equal") return Aggregation::kEqual;
  throw ValidationError("aggregation_mode", "unknown aggregation '" + s + "'");
}

AggregateWeights aggregate(double pivot, std::span<const double> losses, Aggregation mode) {
  AggregateWeights out;
  out.weights.resize(losses.size());
  const double n = static_cast<double>(losses.size());
  switch (mode) {
    case Aggregation::kTreasure:
      out.pivot_weight = 1.0;
      for (std::size_t i = 0; i < losses.size(); ++i) {
        const double li = losses[i];
        double w;
        if (li == 0.0) w = 0.0;
        else if (li <= pivot) w = 1.0;
        else w = pivot / li;
        out.weights[i] = w / n;
      }
      break;
    case Aggregation::kSimple:
      out.pivot_weight = 1.0;
      std::fill(out.weights.begin(), out.weights.end(), 1.0);
      break;
    case Aggregation::kEqual:
      out.pivot_weight = pivot == 0.0 ? 0.0 : 1.0 / std::abs(pivot);
      for (std::size_t i = 0; i < losses.size(); ++i) {
        out.weights[i] = losses[i] == 0.0 ? 0.0 : 1.0 / std::abs(losses[i]);
      }
      break;
  }
  out.value = out.pivot_weight * pivot;
  for (std::size_t i = 0; i < losses.size(); ++i) out.value += out.weights[i] * losses[i];
  return out;
}

double LossReport::value(const std::string& name) const {
  const Entry* e = find(name);
  if (!e) throw Error("loss report has no entry " + name);
  return e->value;
}

const LossReport::Entry* LossReport::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

nlohmann::ordered_json LossReport::to_json() const {
  nlohmann::ordered_json losses, weights;
  for (const auto& e : entries) {
    losses[e.name] = e.value;
    weights[e.name] = e.weight;
  }
  return nlohmann::ordered_json{{"pivot", pivot}, {"aggregate", aggregate}, {"losses", losses}, {"weights", weights}};
}

}  // namespace txnf
