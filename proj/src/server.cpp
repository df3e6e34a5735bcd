#include "txnf/server.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>

#include <httplib.h>

#include "txnf/error.hpp"
#include "txnf/rng.hpp"

namespace txnf {

using nlohmann::ordered_json;

namespace {

struct HttpError {
  int status;
  std::string code;
  std::string message;
};

Response error(const HttpError& e) {
  return {e.status, {{"error", {{"status", e.status}, {"code", e.code}, {"message", e.message}}}}};
}

std::int64_t int_param(const std::map<std::string, std::string>& q, const std::string& key, std::int64_t fallback,
                       std::int64_t lo, std::int64_t hi) {
  const auto it = q.find(key);
  if (it == q.end()) return fallback;
  std::int64_t v = 0;
  const auto& s = it->second;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw HttpError{400, "bad_parameter", key + ": expected an integer, got '" + s + "'"};
  }
  if (v < lo || v > hi) {
    throw HttpError{400, "bad_parameter", key + ": must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]"};
  }
  return v;
}

std::uint64_t seed_param(const std::map<std::string, std::string>& q, std::uint64_t fallback) {
  const auto it = q.find("seed");
  if (it == q.end()) return fallback;
  std::uint64_t v = 0;
  const auto& s = it->second;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw HttpError{400, "bad_parameter", "seed: expected a non-negative integer"};
  }
  return v;
}

void check_known(const std::map<std::string, std::string>& q, std::initializer_list<const char*> known) {
  for (const auto& [k, v] : q) {
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; })) {
      throw HttpError{400, "unknown_parameter", "unknown query parameter '" + k + "'"};
    }
  }
}

/// k of `pool` without replacement, returned in ascending order.
std::vector<std::int64_t> sample(std::vector<std::int64_t> pool, std::int64_t k, Rng& rng) {
  const auto n = static_cast<std::int64_t>(pool.size());
  if (k >= n) return pool;
  for (std::int64_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::vector<std::int64_t> real_rows(const EmbeddingTable& t) {
  std::vector<std::int64_t> rows;
  for (std::int64_t r = 0; r < t.rows(); ++r) {
    const auto& token = t.tokens[static_cast<std::size_t>(r)];
    if (token != kOovToken && token != kPadToken) rows.push_back(r);
  }
  return rows;
}

}  // namespace

std::uint64_t request_seed(const std::string& path, const std::map<std::string, std::string>& query) {
  std::string canon = path;
  for (const auto& [k, v] : query) {
    if (k != "seed") canon += "&" + k + "=" + v;
  }
  return fnv1a64(canon);
}

EmbeddingService::EmbeddingService(EmbeddingExport data, Metadata meta, ServiceOptions options)
    : data_(std::move(data)), meta_(std::move(meta)), options_(std::move(options)) {
  if (options_.sample_cap < 1) throw ValidationError("sample_cap", "must be >= 1");
}

Response EmbeddingService::handle(const std::string& path, const std::map<std::string, std::string>& query) const {
  try {
    if (path == "/attributes") {
      check_known(query, {});
      return attributes();
    }
    const auto second = path.find('/', 1);
    if (path.size() < 2 || path[0] != '/' || second == std::string::npos) {
      throw HttpError{404, "not_found", "no route for " + path};
    }
    const std::string route = path.substr(1, second - 1);
    const std::string attr = path.substr(second + 1);
    if (route != "embeddings" && route != "projection" && route != "metadata") {
      throw HttpError{404, "not_found", "no route for " + path};
    }
    const EmbeddingTable* t = data_.find(attr);
    if (!t || attr.empty()) throw HttpError{404, "unknown_attribute", "no embedding table for attribute '" + attr + "'"};
    const std::uint64_t seed = seed_param(query, request_seed(path, query));
    if (route == "embeddings") return embeddings(*t, query, seed);
    if (route == "projection") return projection(*t, query, seed);
    check_known(query, {});
    return metadata(*t);
  } catch (const HttpError& e) {
    return error(e);
  } catch (const ValidationError& e) {
    return error({400, "invalid_request", e.what()});
  }
}

Response EmbeddingService::attributes() const {
  ordered_json list = ordered_json::array();
  for (const auto& t : data_.tables) {
    const auto keys = meta_.keys.find(t.attribute);
    list.push_back({{"name", t.attribute},
                    {"rows", static_cast<std::int64_t>(real_rows(t).size())},
                    {"dim", t.vectors.cols()},
                    {"metadata_keys", keys == meta_.keys.end() ? std::vector<std::string>{} : keys->second}});
  }
  return {200, {{"schema_hash", hash_hex(data_.schema_hash)}, {"attributes", list}}};
}

Response EmbeddingService::embeddings(const EmbeddingTable& t, const std::map<std::string, std::string>& q,
                                      std::uint64_t seed) const {
  check_known(q, {"sample", "seed"});
  const auto pool = real_rows(t);
  const std::int64_t k = int_param(q, "sample", std::min<std::int64_t>(static_cast<std::int64_t>(pool.size()), options_.sample_cap), 1,
                                   options_.sample_cap);
  Rng rng = Rng(seed).split("embeddings");
  ordered_json rows = ordered_json::array();
  for (auto r : sample(pool, k, rng)) {
    const auto v = t.vectors.row(Eigen::Index(r));
    rows.push_back({{"token", t.tokens[static_cast<std::size_t>(r)]}, {"vector", std::vector<float>(v.begin(), v.end())}});
  }
  return {200, {{"attribute", t.attribute}, {"seed", seed}, {"dim", t.vectors.cols()}, {"rows", rows}}};
}

Response EmbeddingService::projection(const EmbeddingTable& t, const std::map<std::string, std::string>& q,
                                      std::uint64_t seed) const {
  check_known(q, {"method", "dims", "color_by", "sample", "groups", "per_group", "seed"});
  const auto method = q.count("method") ? q.at("method") : std::string("pca");
  if (method != "pca") throw HttpError{400, "bad_parameter", "method: only 'pca' is supported"};
  const int dims = static_cast<int>(int_param(q, "dims", 2, 2, 3));
  const std::string color_by = q.count("color_by") ? q.at("color_by") : std::string();
  Rng rng = Rng(seed).split("projection");

  std::vector<std::int64_t> chosen;
  std::vector<std::string> group_of;  // per chosen row
  if (!color_by.empty()) {
    const auto keys = meta_.keys.find(t.attribute);
    if (keys == meta_.keys.end() || std::find(keys->second.begin(), keys->second.end(), color_by) == keys->second.end()) {
      throw HttpError{404, "unknown_metadata_key", "attribute '" + t.attribute + "' has no metadata key '" + color_by + "'"};
    }
    const LabelledRows lr = labelled_rows(t, meta_, color_by);
    std::vector<std::vector<std::int64_t>> by_group(lr.names.size());
    for (std::size_t i = 0; i < lr.rows.size(); ++i) by_group[static_cast<std::size_t>(lr.labels[i])].push_back(lr.rows[i]);
    if (q.count("groups") || q.count("per_group")) {
      if (q.count("sample")) throw HttpError{400, "bad_parameter", "sample: give either sample or groups/per_group"};
      const auto groups = int_param(q, "groups", 10, 1, options_.sample_cap);
      const auto per = int_param(q, "per_group", 50, 1, options_.sample_cap);
      if (groups * per > options_.sample_cap) throw HttpError{400, "bad_parameter", "groups*per_group exceeds the sample cap"};
      // Most populous groups first; ties by name.
      std::vector<std::size_t> order(by_group.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (by_group[a].size() != by_group[b].size()) return by_group[a].size() > by_group[b].size();
        return lr.names[a] < lr.names[b];
      });
      order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(groups)));
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lr.names[a] < lr.names[b]; });
      for (auto g : order) {
        Rng grng = rng.split(lr.names[g]);
        for (auto r : sample(by_group[g], per, grng)) {
          chosen.push_back(r);
          group_of.push_back(lr.names[g]);
        }
      }
    } else {
      const auto k = int_param(q, "sample", options_.default_sample, 1, options_.sample_cap);
      std::map<std::int64_t, std::string> name_of;
      for (std::size_t i = 0; i < lr.rows.size(); ++i) name_of[lr.rows[i]] = lr.names[static_cast<std::size_t>(lr.labels[i])];
      for (auto r : sample(lr.rows, k, rng)) {
        chosen.push_back(r);
        group_of.push_back(name_of.at(r));
      }
    }
  } else {
    if (q.count("groups") || q.count("per_group")) throw HttpError{400, "bad_parameter", "groups: needs color_by"};
    chosen = sample(real_rows(t), int_param(q, "sample", options_.default_sample, 1, options_.sample_cap), rng);
  }
  if (static_cast<std::int64_t>(chosen.size()) <= dims) {
    throw HttpError{400, "too_few_points", "need more sampled points than dims"};
  }
  if (t.vectors.cols() < dims) throw HttpError{400, "bad_parameter", "dims exceeds the embedding width"};
  const Projection p = project_pca(gather(t, chosen), dims);

  ordered_json points = ordered_json::array();
  std::vector<std::string> groups;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    std::vector<double> c(static_cast<std::size_t>(dims));
    for (int k = 0; k < dims; ++k) c[static_cast<std::size_t>(k)] = p.coords(Eigen::Index(i), k);
    ordered_json pt{{"token", t.tokens[static_cast<std::size_t>(chosen[i])]}, {"coords", c}};
    if (!color_by.empty()) {
      pt["group"] = group_of[i];
      if (std::find(groups.begin(), groups.end(), group_of[i]) == groups.end()) groups.push_back(group_of[i]);
    }
    points.push_back(std::move(pt));
  }
  std::sort(groups.begin(), groups.end());
  ordered_json body{{"attribute", t.attribute}, {"method", method},     {"dims", dims},
                    {"color_by", color_by.empty() ? ordered_json(nullptr) : ordered_json(color_by)},
                    {"seed", seed},             {"explained_variance_ratio", p.explained_ratio},
                    {"groups", groups},         {"points", points}};
  return {200, std::move(body)};
}

Response EmbeddingService::metadata(const EmbeddingTable& t) const {
  const auto keys = meta_.keys.find(t.attribute);
  const std::vector<std::string> ks = keys == meta_.keys.end() ? std::vector<std::string>{} : keys->second;
  ordered_json rows = ordered_json::array();
  if (!ks.empty()) {
    for (auto r : real_rows(t)) {
      const auto& token = t.tokens[static_cast<std::size_t>(r)];
      ordered_json row{{"token", token}};
      for (const auto& k : ks) {
        const auto v = meta_.lookup(t.attribute, token, k);
        row[k] = v ? ordered_json(*v) : ordered_json(nullptr);
      }
      rows.push_back(std::move(row));
    }
  }
  return {200, {{"attribute", t.attribute}, {"keys", ks}, {"rows", rows}}};
}

// ---------------------------------------------------------------------------

HttpServer::HttpServer(const EmbeddingService& service, const std::string& host, int port)
    : server_(std::make_unique<httplib::Server>()) {
  const std::string origin = service.options().cors_origin;
  server_->set_default_headers({{"Access-Control-Allow-Origin", origin},
                                {"Access-Control-Allow-Methods", "GET, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
  server_->Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server_->Get(".*", [&service](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;  // last value wins
    const Response r = service.handle(req.path, query);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  });
  const auto methods_not_allowed = [](const httplib::Request&, httplib::Response& res) {
    res.status = 405;
    res.set_content(R"({"error":{"status":405,"code":"method_not_allowed","message":"the service is read-only"}})",
                    "application/json");
  };
  server_->Post(".*", methods_not_allowed);
  server_->Put(".*", methods_not_allowed);
  server_->Delete(".*", methods_not_allowed);
  server_->Patch(".*", methods_not_allowed);
  port_ = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (port_ < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

HttpServer::~HttpServer() {
  stop();
  if (thread_.joinable()) thread_.join();
}

void HttpServer::wait() {
  if (thread_.joinable()) thread_.join();
}

void HttpServer::stop() { server_->stop(); }

}  // namespace txnf
