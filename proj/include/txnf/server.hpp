#pragma once

// Read-only HTTP service over an embedding export.
//
//   GET /attributes
//   GET /embeddings/{attr}?sample=&seed=
//   GET /projection/{attr}?method=pca&dims=2|3&color_by=&sample=&groups=&per_group=&seed=
//   GET /metadata/{attr}
//
// Responses are JSON. Errors carry {"error": {"status", "code", "message"}}.
// Without an explicit seed, sampling is seeded by a hash of the request.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "txnf/embedsvc.hpp"

namespace httplib {
class Server;
}

namespace txnf {

struct ServiceOptions {
  std::int64_t sample_cap = 5000;
  std::int64_t default_sample = 500;
  std::string cors_origin = "*";
};

struct Response {
  int status = 200;
  nlohmann::ordered_json body;
};

class EmbeddingService {
 public:
  EmbeddingService(EmbeddingExport data, Metadata meta, ServiceOptions options = {});

  /// Routes one GET request. Thread-safe; never mutates state.
  Response handle(const std::string& path, const std::map<std::string, std::string>& query) const;

  const ServiceOptions& options() const { return options_; }

 private:
  Response attributes() const;
  Response embeddings(const EmbeddingTable& t, const std::map<std::string, std::string>& q, std::uint64_t seed) const;
  Response projection(const EmbeddingTable& t, const std::map<std::string, std::string>& q, std::uint64_t seed) const;
  Response metadata(const EmbeddingTable& t) const;

  EmbeddingExport data_;
  Metadata meta_;
  ServiceOptions options_;
};

/// Seed derived from the path and every query parameter except "seed".
std::uint64_t request_seed(const std::string& path, const std::map<std::string, std::string>& query);

/// Background HTTP server. Binds on construction; stops on destruction.
class HttpServer {
 public:
  /// port 0 picks a free port.
  HttpServer(const EmbeddingService& service, const std::string& host, int port);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  int port() const { return port_; }
  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();
  void stop();

 private:
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace txnf
