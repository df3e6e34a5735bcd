#include "txnf/embedsvc.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "txnf/binio.hpp"
#include "txnf/error.hpp"
#include "txnf/rng.hpp"

namespace txnf {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr char kMagic[] = "TXNFEMBD";
constexpr std::uint32_t kVersion = 1;

bool special(const std::string& token) { return token == kOovToken || token == kPadToken; }

}  // namespace

std::int64_t EmbeddingTable::find(const std::string& token) const {
  const auto it = std::find(tokens.begin(), tokens.end(), token);
  return it == tokens.end() ? -1 : static_cast<std::int64_t>(it - tokens.begin());
}

const EmbeddingTable* EmbeddingExport::find(const std::string& attribute) const {
  for (const auto& t : tables) {
    if (t.attribute == attribute) return &t;
  }
  return nullptr;
}

void write_table(const std::string& path, const EmbeddingTable& t) {
  if (static_cast<std::int64_t>(t.tokens.size()) != t.rows()) throw Error("embedding table: one token per row");
  BinaryWriter w(path);
  w.put_bytes(std::string(kMagic, 8));
  w.put(kVersion);
  w.put_string(t.attribute);
  w.put(static_cast<std::uint32_t>(t.vectors.rows()));
  w.put(static_cast<std::uint32_t>(t.vectors.cols()));
  for (const auto& s : t.tokens) w.put_string(s);
  w.put_array(t.vectors.data(), static_cast<std::size_t>(t.vectors.size()));
  w.close();
}

EmbeddingTable read_table(const std::string& path) {
  BinaryReader r(path);
  if (r.get_bytes(8) != std::string(kMagic, 8)) throw Error(path + ": not an embedding table");
  if (r.get<std::uint32_t>() != kVersion) throw Error(path + ": unsupported embedding table version");
  EmbeddingTable t;
  t.attribute = r.get_string();
  const auto rows = r.get<std::uint32_t>(), cols = r.get<std::uint32_t>();
  t.tokens.reserve(rows);
  for (std::uint32_t i = 0; i < rows; ++i) t.tokens.push_back(r.get_string());
  t.vectors.resize(rows, cols);
  r.get_array(t.vectors.data(), static_cast<std::size_t>(t.vectors.size()));
  return t;
}

void write_export(const std::string& dir, const EmbeddingExport& e) {
  fs::create_directories(dir);
  ordered_json tables = ordered_json::array();
  for (const auto& t : e.tables) {
    const std::string file = t.attribute + ".emb";
    write_table(dir + "/" + file, t);
    tables.push_back({{"attribute", t.attribute}, {"file", file}, {"rows", t.rows()}, {"dim", t.vectors.cols()}});
  }
  std::ofstream out(dir + "/index.json");
  if (!out) throw Error("cannot write " + dir + "/index.json");
  out << ordered_json{{"format_version", 1}, {"schema_hash", hash_hex(e.schema_hash)}, {"tables", tables}}.dump(2)
      << "\n";
}

EmbeddingExport read_export(const std::string& dir) {
  std::ifstream in(dir + "/index.json");
  if (!in) throw Error("cannot read " + dir + "/index.json");
  const json j = json::parse(in);
  EmbeddingExport e;
  e.schema_hash = std::stoull(j.at("schema_hash").get<std::string>(), nullptr, 16);
  for (const auto& t : j.at("tables")) e.tables.push_back(read_table(dir + "/" + t.at("file").get<std::string>()));
  return e;
}

EmbeddingExport export_embeddings(Model<float>& model, const std::vector<CardSequence>& history, int batch_size) {
  if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
  const Schema& schema = model.schema();
  EmbeddingExport e;
  e.schema_hash = schema.hash();
  for (const auto& a : schema.attributes()) {
    if (!a.categorical()) continue;
    EmbeddingTable t;
    t.attribute = a.name;
    t.tokens = schema.vocabulary(a.name).tokens();
    t.tokens.push_back(kOovToken);
    t.tokens.push_back(kPadToken);
    t.vectors = model.embeddings(a.name);
    e.tables.push_back(std::move(t));
  }

  // Latest sequence per card, by last timestamp.
  std::map<std::uint64_t, const CardSequence*> latest;
  for (const auto& s : history) {
    if (s.length() == 0) continue;
    auto& slot = latest[s.card_id];
    if (!slot || slot->timestamps.back() < s.timestamps.back()) slot = &s;
  }
  EmbeddingTable cards;
  cards.attribute = kCardTable;
  cards.vectors.resize(static_cast<Eigen::Index>(latest.size()), model.config().hidden_dim);
  std::vector<const CardSequence*> chunk;
  Eigen::Index row = 0;
  auto flush = [&] {
    if (chunk.empty()) return;
    cards.vectors.middleRows(row, static_cast<Eigen::Index>(chunk.size())) =
        model.card_embeddings(make_batch(chunk, schema));
    row += static_cast<Eigen::Index>(chunk.size());
    chunk.clear();
  };
  for (const auto& [id, seq] : latest) {
    cards.tokens.push_back(std::to_string(id));
    chunk.push_back(seq);
    if (static_cast<int>(chunk.size()) == batch_size) flush();
  }
  flush();
  e.tables.push_back(std::move(cards));
  return e;
}

// ---------------------------------------------------------------------------

Projection project_pca(const Eigen::MatrixXd& x, int dims) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (dims < 1 || dims > d) throw ValidationError("dims", "must lie in [1, " + std::to_string(d) + "]");
  if (n <= dims) throw ValidationError("dims", "need more points than dimensions");
  Projection p;
  p.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd xc = x.rowwise() - p.mean.transpose();
  const Eigen::MatrixXd cov = xc.transpose() * xc / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw Error("pca: eigendecomposition failed");
  // Eigen sorts ascending.
  double total = 0.0;
  for (Eigen::Index i = d - 1; i >= 0; --i) {
    const double v = std::max(0.0, eig.eigenvalues()(i));
    p.eigenvalues.push_back(v);
    total += v;
  }
  p.components.resize(d, dims);
  for (int k = 0; k < dims; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < d; ++i) {
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    }
    if (v(arg) < 0) v = -v;
    p.components.col(k) = v;
    p.explained_ratio.push_back(total > 0 ? p.eigenvalues[static_cast<std::size_t>(k)] / total : 0.0);
  }
  p.coords = xc * p.components;
  return p;
}

namespace {

Eigen::MatrixXd distances(const Eigen::MatrixXd& x) {
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * x * x.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  return d2.cwiseMax(0.0).cwiseSqrt();
}

double silhouette_from(const Eigen::MatrixXd& dist, const std::vector<int>& labels) {
  const std::size_t n = labels.size();
  const int groups = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::int64_t> size(static_cast<std::size_t>(groups), 0);
  for (int l : labels) ++size[static_cast<std::size_t>(l)];
  double total = 0.0;
  std::vector<double> sum(static_cast<std::size_t>(groups));
  for (std::size_t i = 0; i < n; ++i) {
    const auto own = static_cast<std::size_t>(labels[i]);
    if (size[own] < 2) continue;  // singleton scores 0
    std::fill(sum.begin(), sum.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) sum[static_cast<std::size_t>(labels[j])] += dist(Eigen::Index(i), Eigen::Index(j));
    const double a = sum[own] / static_cast<double>(size[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < sum.size(); ++g) {
      if (g != own && size[g] > 0) b = std::min(b, sum[g] / static_cast<double>(size[g]));
    }
    if (!std::isfinite(b)) continue;  // one group only
    const double m = std::max(a, b);
    if (m > 0) total += (b - a) / m;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

void check_labels(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw Error("labels must match rows");
  for (int l : labels) {
    if (l < 0) throw Error("labels must be non-negative");
  }
}

}  // namespace

double silhouette(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
  check_labels(x, labels);
  return silhouette_from(distances(x), labels);
}

SilhouetteTest silhouette_vs_random(const Eigen::MatrixXd& x, const std::vector<int>& labels, int permutations,
                                    std::uint64_t seed) {
  check_labels(x, labels);
  if (permutations < 1) throw ValidationError("permutations", "must be >= 1");
  const Eigen::MatrixXd dist = distances(x);
  SilhouetteTest t;
  t.observed = silhouette_from(dist, labels);
  Rng rng = Rng(seed).split("silhouette");
  std::vector<int> shuffled = labels;
  for (int p = 0; p < permutations; ++p) {
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.uniform_int(i)]);
    t.random.push_back(silhouette_from(dist, shuffled));
  }
  std::vector<double> sorted = t.random;
  std::sort(sorted.begin(), sorted.end());
  // Linear interpolation between order statistics.
  const double pos = 0.95 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  t.random_p95 = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  return t;
}

ProbeResult linear_probe(const Eigen::MatrixXd& x, const std::vector<int>& labels, double train_fraction,
                         double ridge, std::uint64_t seed) {
  check_labels(x, labels);
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("train_fraction", "must lie in (0, 1)");
  const std::size_t n = labels.size();
  ProbeResult r;
  r.classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).split("probe");
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n_train < 1 || n_train >= n) throw ValidationError("train_fraction", "leaves an empty split");
  r.train = static_cast<std::int64_t>(n_train);
  r.test = static_cast<std::int64_t>(n - n_train);

  const Eigen::Index d = x.cols();
  Eigen::MatrixXd a(static_cast<Eigen::Index>(n_train), d + 1);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_train), r.classes);
  for (std::size_t i = 0; i < n_train; ++i) {
    a.row(Eigen::Index(i)) << x.row(Eigen::Index(order[i])), 1.0;
    y(Eigen::Index(i), labels[order[i]]) = 1.0;
  }
  Eigen::MatrixXd gram = a.transpose() * a;
  gram.diagonal().head(d).array() += ridge * static_cast<double>(n_train);
  const Eigen::MatrixXd w = gram.ldlt().solve(a.transpose() * y);

  std::vector<std::int64_t> counts(static_cast<std::size_t>(r.classes), 0);
  std::int64_t hits = 0;
  for (std::size_t i = n_train; i < n; ++i) {
    Eigen::RowVectorXd row(d + 1);
    row << x.row(Eigen::Index(order[i])), 1.0;
    Eigen::Index best;
    (row * w).maxCoeff(&best);
    hits += best == labels[order[i]];
    ++counts[static_cast<std::size_t>(labels[order[i]])];
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(r.test);
  const double majority = static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(r.test);
  r.chance = std::max(1.0 / static_cast<double>(r.classes), majority);
  return r;
}

// ---------------------------------------------------------------------------

Metadata Metadata::from_ground_truth(const std::vector<MerchantTruth>& truth, const std::string& attribute) {
  Metadata m;
  m.keys[attribute] = {"country", "city", "category"};
  auto& rows = m.values[attribute];
  for (const auto& t : truth) rows[t.token] = {{"country", t.country}, {"city", t.city}, {"category", t.category}};
  return m;
}

std::optional<std::string> Metadata::lookup(const std::string& attribute, const std::string& token,
                                            const std::string& key) const {
  const auto a = values.find(attribute);
  if (a == values.end()) return std::nullopt;
  const auto t = a->second.find(token);
  if (t == a->second.end()) return std::nullopt;
  const auto k = t->second.find(key);
  if (k == t->second.end()) return std::nullopt;
  return k->second;
}

LabelledRows labelled_rows(const EmbeddingTable& table, const Metadata& meta, const std::string& key) {
  LabelledRows out;
  std::map<std::string, int> ids;
  for (std::int64_t r = 0; r < table.rows(); ++r) {
    const auto& token = table.tokens[static_cast<std::size_t>(r)];
    if (special(token)) continue;
    const auto v = meta.lookup(table.attribute, token, key);
    if (!v) continue;
    auto [it, fresh] = ids.try_emplace(*v, static_cast<int>(out.names.size()));
    if (fresh) out.names.push_back(*v);
    out.rows.push_back(r);
    out.labels.push_back(it->second);
  }
  return out;
}

Eigen::MatrixXd gather(const EmbeddingTable& table, const std::vector<std::int64_t>& rows) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), table.vectors.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    x.row(Eigen::Index(i)) = table.vectors.row(Eigen::Index(rows[i])).cast<double>();
  }
  return x;
}

}  // namespace txnf
