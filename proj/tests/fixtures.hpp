#pragma once

#include <functional>

#include "txnf/corpus.hpp"
#include "txnf/model.hpp"
#include "txnf/schema.hpp"
#include "txnf/syngen.hpp"

namespace txnf::testing {

struct TinyData {
  WorldConfig world;
  Schema schema;
  std::vector<RawTransaction> raw;
  std::vector<CardSequence> seqs;
};

/// A small generated world with vocabularies fitted on every transaction.
/// `threshold` controls which attributes count as high-cardinality.
inline TinyData tiny_data(std::int64_t cards = 12, std::int64_t merchants = 40, std::uint64_t seed = 7,
                          std::int64_t threshold = 16, double txns_per_card = 6.0) {
  TinyData d;
  d.world.n_cards = cards;
  d.world.n_merchants = merchants;
  d.world.n_countries = 4;
  d.world.n_categories = 5;
  d.world.n_cities = 8;
  d.world.time_span_days = 60;
  d.world.abnormal_rate = 0.1;
  d.world.mean_txns_per_card = txns_per_card;
  d.world.favorites_per_card = 4;
  d.world.seed = seed;
  const Schema base(Schema::default_transactions().attributes(), threshold);
  d.raw = generate(d.world, base);
  d.schema = fit_vocabularies(base, d.raw, std::numeric_limits<std::int64_t>::max());
  d.seqs = group_and_sort(d.raw, d.schema);
  return d;
}

/// The first `count` sequences with at least `steps` steps, cut to exactly `steps`.
inline std::vector<CardSequence> truncated(const TinyData& d, std::int64_t steps, std::size_t count) {
  std::vector<CardSequence> out;
  const Widths w = Widths::of(d.schema);
  for (const auto& s : d.seqs) {
    if (out.size() == count) break;
    if (s.length() >= steps) out.push_back(s.slice(0, steps, w));
  }
  if (out.size() != count) throw Error("fixture has too few long sequences");
  return out;
}

inline Batch batch_of(const std::vector<CardSequence>& seqs, const Schema& schema) {
  std::vector<const CardSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  return make_batch(ptrs, schema);
}

/// Largest relative error |a − n| / max(|a|, |n|, floor) between an
/// analytic gradient and central differences of `f` w.r.t. `x`.
inline double max_fd_error(Mat<double>& x, const Mat<double>& analytic, const std::function<double()>& f,
                           double h = 1e-6, double floor = 1e-4) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = f();
    x.data()[i] = saved - h;
    const double down = f();
    x.data()[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.data()[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace txnf::testing
