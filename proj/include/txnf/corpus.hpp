#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnf/schema.hpp"
#include "txnf/syngen.hpp"

namespace txnf {

/// Column counts of each attribute group, taken from a Schema layout.
struct Widths {
  int static_num = 0, static_cat = 0;
  int dyn_num = 0, dyn_cat = 0;
  int sig_num = 0, sig_cat = 0;

  static Widths of(const Schema& schema);
  bool operator==(const Widths&) const = default;
};

/// One card's chronologically ordered transactions.
///
/// Per-step blocks are row-major [length × width]. Numerical values are
/// stored raw; categorical values are vocabulary indices. `scored` marks the
/// steps that belong to this sequence's partition; the remaining steps are
/// history carried as context.
struct CardSequence {
  std::uint64_t card_id = 0;
  std::vector<float> static_num;
  std::vector<std::int32_t> static_cat;
  std::vector<std::int64_t> timestamps;
  std::vector<std::uint8_t> scored;
  std::vector<float> dyn_num;
  std::vector<std::int32_t> dyn_cat;
  std::vector<float> sig_num;
  std::vector<std::int32_t> sig_cat;

  std::int64_t length() const { return static_cast<std::int64_t>(timestamps.size()); }
  std::int64_t scored_count() const;

  /// Steps [begin, end) with the static vector retained.
  CardSequence slice(std::int64_t begin, std::int64_t end, const Widths& w) const;
  bool operator==(const CardSequence&) const = default;
};

struct TemporalSplit {
  std::int64_t train_end = 0;
  std::int64_t val_end = 0;
  std::int64_t test_end = 0;

  void validate() const;
  /// Boundaries after `train_months` and one validation month of 30-day months.
  static TemporalSplit months(std::int64_t train_months, std::int64_t val_months, std::int64_t test_months);
};

struct Partitions {
  std::vector<CardSequence> train, val, test;
};

/// Builds the vocabularies from transactions before `train_end` and
/// installs them into a copy of `schema`.
Schema fit_vocabularies(const Schema& schema, const std::vector<RawTransaction>& raw, std::int64_t train_end,
                        std::int64_t min_count = 1, std::int64_t max_size = 1 << 20);

/// One sequence per card ordered by card id. Per-card order is
/// chronological; equal timestamps keep input order. Every step is scored.
std::vector<CardSequence> group_and_sort(const std::vector<RawTransaction>& raw, const Schema& schema);

/// Consecutive non-overlapping windows of at most max_seq_len steps.
std::vector<CardSequence> window(const CardSequence& seq, std::int64_t max_seq_len = 512);

/// Assigns every transaction to exactly one partition by timestamp. Later
/// partitions keep earlier history as unscored context, trimmed so that
/// context plus scored steps fit in `max_seq_len` where possible.
Partitions split(const std::vector<CardSequence>& seqs, const TemporalSplit& split,
                 std::int64_t max_seq_len = 1 << 30);

/// Windows every sequence of a partition; windows without scored steps are dropped.
std::vector<CardSequence> window_all(const std::vector<CardSequence>& seqs, std::int64_t max_seq_len);

/// Padded, masked bundle of sequences. Blocks over steps are [B*T × width].
struct Batch {
  int batch_size = 0;
  int steps = 0;  // T = longest sequence in the batch
  Widths widths;
  std::vector<std::uint64_t> card_ids;
  std::vector<int> lengths;
  std::vector<float> static_num;
  std::vector<std::int32_t> static_cat;
  std::vector<float> dyn_num;
  std::vector<std::int32_t> dyn_cat;
  std::vector<float> sig_num;
  std::vector<std::int32_t> sig_cat;
  std::vector<std::uint8_t> valid;      // real step
  std::vector<std::uint8_t> scored;     // real step counted by the current-signal losses
  std::vector<std::uint8_t> next_mask;  // scored step whose successor is present
  std::vector<float> next_num;
  std::vector<std::int32_t> next_cat;

  std::size_t rows() const { return static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(steps); }
};

Batch make_batch(const std::vector<const CardSequence*>& seqs, const Schema& schema);

/// Deterministic per-(seed, epoch) shuffle into batches of `batch_size`.
std::vector<Batch> batch(const std::vector<CardSequence>& corpus, const Schema& schema, int batch_size,
                         std::uint64_t seed, std::uint64_t epoch = 0);

/// Batches in corpus order, no shuffle. Used for evaluation.
std::vector<Batch> batch_in_order(const std::vector<CardSequence>& corpus, const Schema& schema, int batch_size);

// Shard files: little-endian binary records.
//
//   magic "TXNFSHRD" | u32 version | u64 schema hash | 6 × u32 widths |
//   u64 sequence count | sequences...
//   sequence: u64 card | u32 length | f32 static_num[] | i32 static_cat[] |
//             per step: i64 timestamp, u8 scored, f32 dyn_num[], i32 dyn_cat[],
//                       f32 sig_num[], i32 sig_cat[]
void write_shard(const std::string& path, const std::vector<CardSequence>& seqs, const Schema& schema);
/// Throws SchemaMismatch when the shard was written for another schema.
std::vector<CardSequence> read_shard(const std::string& path, const Schema& schema);

/// A corpus directory: schema.json, manifest.json, one shard per partition
/// and interactions.csv with the post-training-cutoff (card, merchant) pairs.
struct CorpusDir {
  Schema schema;
  Partitions parts;
  TemporalSplit split;
  std::int64_t max_seq_len = 512;
};

/// Fits vocabularies on the training range, then groups, splits and windows `raw`.
CorpusDir build_corpus(const std::vector<RawTransaction>& raw, const Schema& base, const TemporalSplit& split,
                       std::int64_t max_seq_len = 512, std::int64_t min_count = 1,
                       std::int64_t max_vocab = 1 << 20);

void write_corpus(const std::string& dir, const CorpusDir& corpus);
CorpusDir read_corpus(const std::string& dir);

struct Interaction {
  std::uint64_t card_id = 0;
  std::int32_t merchant = 0;  // merchant vocabulary index
  std::int64_t timestamp = 0;
};

/// Scored transactions of the given partitions as (card, merchant) pairs.
std::vector<Interaction> interactions(const std::vector<CardSequence>& seqs, const Schema& schema,
                                      const std::string& attribute = "merchant");
void write_interactions(const std::string& path, const std::vector<Interaction>& xs);
std::vector<Interaction> read_interactions(const std::string& path);

}  // namespace txnf
