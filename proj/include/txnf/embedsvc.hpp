#pragma once

// Embedding export, projection and structure analysis.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "txnf/corpus.hpp"
#include "txnf/model.hpp"
#include "txnf/syngen.hpp"

namespace txnf {

/// Labelled rows of one exported table.
struct EmbeddingTable {
  std::string attribute;
  std::vector<std::string> tokens;  // one per row
  Mat<float> vectors;

  std::int64_t rows() const { return vectors.rows(); }
  std::int64_t find(const std::string& token) const;  // -1 when absent
};

inline constexpr const char* kCardTable = "card";
inline const std::string kOovToken = "<oov>";
inline const std::string kPadToken = "<pad>";

/// An export directory: index.json plus one <attribute>.emb file per table.
///
///   .emb: magic "TXNFEMBD" | u32 version | string attribute | u32 rows |
///         u32 cols | rows × string token | f32 data (row-major)
struct EmbeddingExport {
  std::uint64_t schema_hash = 0;
  std::vector<EmbeddingTable> tables;

  const EmbeddingTable* find(const std::string& attribute) const;
};

void write_table(const std::string& path, const EmbeddingTable& table);
EmbeddingTable read_table(const std::string& path);
void write_export(const std::string& dir, const EmbeddingExport& e);
EmbeddingExport read_export(const std::string& dir);

/// Every categorical attribute table, plus a "card" table holding the
/// final-step representation of each card's latest sequence in `history`.
EmbeddingExport export_embeddings(Model<float>& model, const std::vector<CardSequence>& history,
                                  int batch_size = 64);

// ---------------------------------------------------------------------------

struct Projection {
  Eigen::MatrixXd coords;      // [n × dims]
  Eigen::MatrixXd components;  // [d × dims], unit columns
  Eigen::VectorXd mean;        // [d]
  std::vector<double> eigenvalues;      // all d covariance eigenvalues, descending
  std::vector<double> explained_ratio;  // first dims
};

/// PCA of mean-centered rows. Each component's largest-magnitude loading is
/// positive. Throws ValidationError unless n > dims and dims <= d.
Projection project_pca(const Eigen::MatrixXd& x, int dims);

/// Mean silhouette (Euclidean). Points in singleton groups score 0.
double silhouette(const Eigen::MatrixXd& x, const std::vector<int>& labels);

struct SilhouetteTest {
  double observed = 0.0;
  double random_p95 = 0.0;  // 95th percentile over label permutations
  std::vector<double> random;
  bool exceeds() const { return observed > random_p95; }
};

/// Compares the silhouette of `labels` with `permutations` random regroupings
/// of the same group sizes.
SilhouetteTest silhouette_vs_random(const Eigen::MatrixXd& x, const std::vector<int>& labels, int permutations,
                                    std::uint64_t seed);

struct ProbeResult {
  double accuracy = 0.0;  // held-out
  double chance = 0.0;    // max(1/classes, majority rate among held-out labels)
  std::int64_t train = 0, test = 0;
  int classes = 0;
};

/// Ridge one-vs-rest linear classifier on a seeded train/test split.
ProbeResult linear_probe(const Eigen::MatrixXd& x, const std::vector<int>& labels, double train_fraction = 0.7,
                         double ridge = 1e-2, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------

/// Per-attribute row metadata keyed by token, e.g. merchant -> country/city/category.
struct Metadata {
  std::map<std::string, std::vector<std::string>> keys;  // attribute -> metadata keys
  std::map<std::string, std::map<std::string, std::map<std::string, std::string>>> values;  // attribute -> token -> key -> value

  static Metadata from_ground_truth(const std::vector<MerchantTruth>& truth, const std::string& attribute = "merchant");
  std::optional<std::string> lookup(const std::string& attribute, const std::string& token, const std::string& key) const;
};

/// Rows of `table` that carry a real token, paired with integer labels of `key`.
struct LabelledRows {
  std::vector<std::int64_t> rows;
  std::vector<int> labels;
  std::vector<std::string> names;  // label id -> value
};
LabelledRows labelled_rows(const EmbeddingTable& table, const Metadata& meta, const std::string& key);

Eigen::MatrixXd gather(const EmbeddingTable& table, const std::vector<std::int64_t>& rows);

}  // namespace txnf
