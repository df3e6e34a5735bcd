#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnf/schema.hpp"

namespace txnf {

/// One attribute value of a raw record: absent, numeric, or a raw category token.
using RawValue = std::variant<std::monostate, double, std::string>;

struct RawTransaction {
  std::uint64_t card_id = 0;
  std::int64_t timestamp = 0;  // seconds since the start of the world
  std::vector<RawValue> values;  // indexed like Schema::attributes()
};

struct WorldConfig {
  std::int64_t n_cards = 1000;
  std::int64_t n_merchants = 500;
  std::int64_t n_countries = 20;
  std::int64_t n_categories = 20;
  std::int64_t n_cities = 60;
  std::int64_t time_span_days = 26 * 30;
  double abnormal_rate = 0.02;
  std::uint64_t seed = 42;
  // Generator shape knobs.
  double mean_txns_per_card = 40.0;
  std::int64_t favorites_per_card = 8;
  std::int64_t preferred_categories = 3;
  double explore_prob = 0.2;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static WorldConfig from_json(const nlohmann::json& j);
};

struct MerchantTruth {
  std::string token;
  std::string country;
  std::string city;
  std::string category;
};

/// Attribute names the generator emits.
const std::vector<std::string>& generator_attributes();

/// Deterministic, globally time-ordered stream. Output is identical for any
/// worker count.
std::vector<RawTransaction> generate(const WorldConfig& config, const Schema& schema, int workers = 1);

/// Planted merchant -> (country, city, category) assignment, indexed by merchant id.
std::vector<MerchantTruth> ground_truth(const WorldConfig& config);

std::string merchant_token(std::int64_t id);
std::string country_token(std::int64_t id);

/// Newline-delimited JSON, one record per line with fields in schema order.
void write_records(const std::string& path, const std::vector<RawTransaction>& txns, const Schema& schema);
/// Throws ValidationError naming the record (line) on unknown attributes.
std::vector<RawTransaction> read_records(const std::string& path, const Schema& schema);

void write_ground_truth(const std::string& path, const std::vector<MerchantTruth>& truth);
std::vector<MerchantTruth> read_ground_truth(const std::string& path);

}  // namespace txnf
