#pragma once

// Command-line entry point. Every command writes manifest.json into its
// output directory.

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace txnf {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kDataRootEnv = "TXNF_DATA_ROOT";
inline constexpr const char* kManifestFile = "manifest.json";

struct RunManifest {
  std::string command;
  std::string version = kVersion;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();  // effective, after flag overrides
  nlohmann::ordered_json seeds = nlohmann::ordered_json::object();
  std::map<std::string, std::string> inputs, outputs;
  std::string schema_hash;  // empty when the command has no schema
  std::map<std::string, std::string> checksums;  // output file name -> fnv1a-64 hex
  std::string started_at, finished_at;  // UTC, ISO 8601

  nlohmann::ordered_json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void write(const std::string& dir) const;
  static RunManifest read(const std::string& dir);
};

/// Checksums every regular file directly under `dir` except the manifest.
std::map<std::string, std::string> directory_checksums(const std::string& dir);

/// Relative paths resolve against $TXNF_DATA_ROOT when it is set.
std::string resolve_path(const std::string& path);

/// Runs one command. 0 on success, 1 on a pipeline or validation error
/// (reported as JSON on stderr), 2 on a usage error.
int dispatch(int argc, const char* const* argv);
int dispatch(const std::vector<std::string>& args);  // args exclude the program name

}  // namespace txnf
