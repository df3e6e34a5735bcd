#include "txnf/syngen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

#include "txnf/error.hpp"
#include "txnf/rng.hpp"

namespace txnf {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr double kSecondsPerDay = 86400.0;
const char* const kTiers[] = {"classic", "gold", "platinum"};
const char* const kChannels[] = {"chip", "swipe", "online", "contactless"};

// Planted latent structure shared by every card.
struct World {
  std::vector<std::int64_t> city_country;
  std::vector<std::int64_t> merchant_city, merchant_country, merchant_category;
  std::vector<double> merchant_pop;
  std::vector<double> category_mu, category_sigma, category_online;
  std::vector<double> country_pop;
  std::vector<std::vector<std::int64_t>> merchants_by_country;
  std::vector<std::int64_t> countries_with_merchants;
};

std::int64_t pick_weighted(Rng& rng, const std::vector<double>& w) {
  double total = std::accumulate(w.begin(), w.end(), 0.0);
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    u -= w[i];
    if (u < 0) return static_cast<std::int64_t>(i);
  }
  return static_cast<std::int64_t>(w.size()) - 1;
}

World build_world(const WorldConfig& c) {
  World w;
  Rng rng = Rng(c.seed).split("world");
  w.country_pop.resize(static_cast<std::size_t>(c.n_countries));
  for (std::int64_t k = 0; k < c.n_countries; ++k) w.country_pop[static_cast<std::size_t>(k)] = 1.0 / std::pow(k + 1.0, 0.7);

  w.city_country.resize(static_cast<std::size_t>(c.n_cities));
  for (std::int64_t k = 0; k < c.n_cities; ++k) {
    w.city_country[static_cast<std::size_t>(k)] = k < c.n_countries ? k : pick_weighted(rng, w.country_pop);
  }

  std::vector<double> category_pop(static_cast<std::size_t>(c.n_categories));
  for (std::int64_t k = 0; k < c.n_categories; ++k) {
    category_pop[static_cast<std::size_t>(k)] = 1.0 / std::pow(k + 1.0, 0.5);
    w.category_mu.push_back(2.5 + 2.5 * rng.uniform());
    w.category_sigma.push_back(0.4 + 0.5 * rng.uniform());
    w.category_online.push_back(0.05 + 0.6 * rng.uniform());
  }

  // Cities are drawn with country popularity so that popular countries hold
  // most merchants.
  std::vector<double> city_pop(static_cast<std::size_t>(c.n_cities));
  for (std::int64_t k = 0; k < c.n_cities; ++k) {
    city_pop[static_cast<std::size_t>(k)] =
        w.country_pop[static_cast<std::size_t>(w.city_country[static_cast<std::size_t>(k)])] * (0.5 + rng.uniform());
  }
  w.merchants_by_country.resize(static_cast<std::size_t>(c.n_countries));
  for (std::int64_t m = 0; m < c.n_merchants; ++m) {
    std::int64_t city = m < c.n_cities ? m : pick_weighted(rng, city_pop);
    std::int64_t cat = m < c.n_categories ? m : pick_weighted(rng, category_pop);
    std::int64_t country = w.city_country[static_cast<std::size_t>(city)];
    w.merchant_city.push_back(city);
    w.merchant_country.push_back(country);
    w.merchant_category.push_back(cat);
    w.merchant_pop.push_back(std::exp(rng.normal(0.0, 1.0)));
    w.merchants_by_country[static_cast<std::size_t>(country)].push_back(m);
  }
  for (std::int64_t k = 0; k < c.n_countries; ++k) {
    if (!w.merchants_by_country[static_cast<std::size_t>(k)].empty()) w.countries_with_merchants.push_back(k);
  }
  return w;
}

struct CardTxn {
  std::int64_t timestamp;
  std::uint64_t card;
  std::int64_t seq;
  std::vector<RawValue> values;
};

class CardGenerator {
 public:
  CardGenerator(const WorldConfig& c, const World& w, const Schema& schema)
      : c_(c), w_(w), schema_(schema), n_attrs_(schema.attributes().size()) {}

  std::vector<CardTxn> card(std::uint64_t card_id) const {
    Rng rng = Rng(c_.seed).split("cards").split(card_id);
    std::vector<double> home_w;
    for (auto k : w_.countries_with_merchants) home_w.push_back(w_.country_pop[static_cast<std::size_t>(k)]);
    const std::int64_t home = w_.countries_with_merchants[static_cast<std::size_t>(pick_weighted(rng, home_w))];
    const auto& local = w_.merchants_by_country[static_cast<std::size_t>(home)];

    const double tier_u = rng.uniform();
    const int tier = tier_u < 0.6 ? 0 : (tier_u < 0.9 ? 1 : 2);
    const double credit_limit = std::exp(rng.normal(7.5 + 0.7 * tier, 0.3));

    std::vector<std::int64_t> preferred;
    for (std::int64_t i = 0; i < c_.preferred_categories; ++i) {
      preferred.push_back(static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(c_.n_categories))));
    }
    // Favorites: local merchants in preferred categories, popularity weighted.
    std::vector<std::int64_t> pool;
    for (auto m : local) {
      if (std::find(preferred.begin(), preferred.end(), w_.merchant_category[static_cast<std::size_t>(m)]) != preferred.end()) {
        pool.push_back(m);
      }
    }
    if (pool.empty()) pool = local;
    std::vector<std::int64_t> favorites;
    std::vector<double> pool_w;
    for (auto m : pool) pool_w.push_back(w_.merchant_pop[static_cast<std::size_t>(m)]);
    for (std::int64_t i = 0; i < c_.favorites_per_card; ++i) {
      favorites.push_back(pool[static_cast<std::size_t>(pick_weighted(rng, pool_w))]);
    }
    std::vector<double> fav_w;
    for (std::size_t r = 0; r < favorites.size(); ++r) fav_w.push_back(1.0 / (r + 1.0));

    const double span = static_cast<double>(c_.time_span_days) * kSecondsPerDay;
    const double rate = c_.mean_txns_per_card / span * std::exp(rng.normal(-0.125, 0.5));

    std::vector<CardTxn> out;
    double t = rng.exponential(rate);
    double prev = -1.0;
    std::int64_t seq = 0;
    while (t < span) {
      const auto ts = static_cast<std::int64_t>(t);
      const bool abnormal = rng.bernoulli(c_.abnormal_rate);
      std::int64_t m;
      double amount;
      std::string channel;
      if (abnormal) {
        // Off-profile: a foreign merchant, inflated amount, mostly card-not-present.
        m = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(c_.n_merchants)));
        if (w_.countries_with_merchants.size() > 1) {
          while (w_.merchant_country[static_cast<std::size_t>(m)] == home) {
            m = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(c_.n_merchants)));
          }
        }
        const auto cat = static_cast<std::size_t>(w_.merchant_category[static_cast<std::size_t>(m)]);
        amount = std::exp(rng.normal(w_.category_mu[cat] + 1.5 + 0.2 * tier, w_.category_sigma[cat] + 0.3));
        channel = rng.bernoulli(0.7) ? "online" : kChannels[rng.uniform_int(4)];
      } else {
        const double u = rng.uniform();
        if (u >= c_.explore_prob) {
          m = favorites[static_cast<std::size_t>(pick_weighted(rng, fav_w))];
        } else if (u < 0.7 * c_.explore_prob) {
          m = local[static_cast<std::size_t>(rng.uniform_int(local.size()))];
        } else {
          m = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(c_.n_merchants)));
        }
        const auto cat = static_cast<std::size_t>(w_.merchant_category[static_cast<std::size_t>(m)]);
        amount = std::exp(rng.normal(w_.category_mu[cat] + 0.2 * tier, w_.category_sigma[cat]));
        if (rng.bernoulli(w_.category_online[cat])) {
          channel = "online";
        } else {
          const char* const present[] = {"chip", "swipe", "contactless"};
          channel = present[rng.uniform_int(3)];
        }
      }
      amount = std::max(amount, 0.01);
      std::string response = "00";
      if (abnormal) {
        if (rng.bernoulli(0.9)) response = "05";
      } else {
        const double p = 0.02 + 0.05 / (1.0 + std::exp(-(std::log(amount / credit_limit) + 1.0) * 3.0));
        if (rng.bernoulli(p)) response = amount > 0.5 * credit_limit ? "51" : "05";
      }
      const double gap_hours = prev < 0 ? 0.0 : (static_cast<double>(ts) - prev) / 3600.0;

      CardTxn rec{ts, card_id, seq++, std::vector<RawValue>(n_attrs_)};
      set(rec, "issuer_country", country_token(home));
      set(rec, "card_tier", std::string(kTiers[tier]));
      set(rec, "credit_limit", credit_limit);
      set(rec, "merchant", merchant_token(m));
      set(rec, "merchant_country", country_token(w_.merchant_country[static_cast<std::size_t>(m)]));
      set(rec, "merchant_city", city_token(w_.merchant_city[static_cast<std::size_t>(m)]));
      set(rec, "merchant_category", category_token(w_.merchant_category[static_cast<std::size_t>(m)]));
      set(rec, "channel", channel);
      set(rec, "amount", amount);
      set(rec, "gap_hours", gap_hours);
      set(rec, "response_code", response);
      set(rec, "abnormal_flag", std::string(abnormal ? "1" : "0"));
      out.push_back(std::move(rec));
      prev = static_cast<double>(ts);
      // Gaps are at least one minute so that log(gap) stays finite.
      t += std::max(rng.exponential(rate), 60.0);
    }
    return out;
  }

  static std::string city_token(std::int64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "c%04lld", static_cast<long long>(id));
    return buf;
  }
  static std::string category_token(std::int64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "mcc%04lld", static_cast<long long>(5000 + id));
    return buf;
  }

 private:
  void set(CardTxn& rec, const char* name, RawValue v) const {
    const int i = schema_.index_of(name);
    if (i >= 0) rec.values[static_cast<std::size_t>(i)] = std::move(v);
  }

  const WorldConfig& c_;
  const World& w_;
  const Schema& schema_;
  std::size_t n_attrs_;
};

}  // namespace

void WorldConfig::validate() const {
  auto positive = [](const char* name, std::int64_t v) {
    if (v < 1) throw ValidationError(name, "must be >= 1");
  };
  positive("n_cards", n_cards);
  positive("n_merchants", n_merchants);
  positive("n_countries", n_countries);
  positive("n_categories", n_categories);
  positive("n_cities", n_cities);
  positive("time_span_days", time_span_days);
  positive("favorites_per_card", favorites_per_card);
  positive("preferred_categories", preferred_categories);
  if (!(abnormal_rate >= 0.0 && abnormal_rate <= 1.0)) throw ValidationError("abnormal_rate", "must lie in [0, 1]");
  if (!(explore_prob >= 0.0 && explore_prob <= 1.0)) throw ValidationError("explore_prob", "must lie in [0, 1]");
  if (!(mean_txns_per_card > 0.0)) throw ValidationError("mean_txns_per_card", "must be positive");
  if (n_merchants < n_cities) throw ValidationError("n_merchants", "must be >= n_cities");
  if (n_merchants < n_categories) throw ValidationError("n_merchants", "must be >= n_categories");
  if (n_countries > 1000) throw ValidationError("n_countries", "at most 1000 numeric-3 codes");
}

ordered_json WorldConfig::to_json() const {
  ordered_json j;
  j["n_cards"] = n_cards;
  j["n_merchants"] = n_merchants;
  j["n_countries"] = n_countries;
  j["n_categories"] = n_categories;
  j["n_cities"] = n_cities;
  j["time_span_days"] = time_span_days;
  j["abnormal_rate"] = abnormal_rate;
  j["seed"] = seed;
  j["mean_txns_per_card"] = mean_txns_per_card;
  j["favorites_per_card"] = favorites_per_card;
  j["preferred_categories"] = preferred_categories;
  j["explore_prob"] = explore_prob;
  return j;
}

WorldConfig WorldConfig::from_json(const json& j) {
  WorldConfig c;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      throw ValidationError(key, "wrong type");
    }
  };
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const char* const known[] = {"n_cards", "n_merchants", "n_countries", "n_categories",
                                        "n_cities", "time_span_days", "abnormal_rate", "seed",
                                        "mean_txns_per_card", "favorites_per_card",
                                        "preferred_categories", "explore_prob"};
    if (std::none_of(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; })) {
      throw ValidationError(it.key(), "unknown world config field");
    }
  }
  get("n_cards", c.n_cards);
  get("n_merchants", c.n_merchants);
  get("n_countries", c.n_countries);
  get("n_categories", c.n_categories);
  get("n_cities", c.n_cities);
  get("time_span_days", c.time_span_days);
  get("abnormal_rate", c.abnormal_rate);
  get("seed", c.seed);
  get("mean_txns_per_card", c.mean_txns_per_card);
  get("favorites_per_card", c.favorites_per_card);
  get("preferred_categories", c.preferred_categories);
  get("explore_prob", c.explore_prob);
  c.validate();
  return c;
}

const std::vector<std::string>& generator_attributes() {
  static const std::vector<std::string> names = {
      "issuer_country", "card_tier", "credit_limit", "merchant", "merchant_country", "merchant_city",
      "merchant_category", "channel", "amount", "gap_hours", "response_code", "abnormal_flag"};
  return names;
}

std::string merchant_token(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "m%05lld", static_cast<long long>(id));
  return buf;
}

std::string country_token(std::int64_t id) {
  // 37 is coprime with 1000, so the first 1000 ids get distinct codes.
  char buf[8];
  std::snprintf(buf, sizeof buf, "%03lld", static_cast<long long>((id * 37 + 4) % 1000));
  return buf;
}

std::vector<RawTransaction> generate(const WorldConfig& config, const Schema& schema, int workers) {
  config.validate();
  const auto& known = generator_attributes();
  for (const auto& a : schema.attributes()) {
    if (std::find(known.begin(), known.end(), a.name) == known.end()) {
      throw ValidationError(a.name, "attribute is not produced by the synthetic generator");
    }
  }
  const World world = build_world(config);
  const CardGenerator gen(config, world, schema);

  const auto n = static_cast<std::size_t>(config.n_cards);
  std::vector<std::vector<CardTxn>> per_card(n);
  workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t c = 0; c < n; ++c) per_card[c] = gen.card(c);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t c = static_cast<std::size_t>(w); c < n; c += static_cast<std::size_t>(workers)) {
          per_card[c] = gen.card(c);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  // k-way merge by (timestamp, card, per-card sequence).
  using Head = std::pair<std::size_t, std::size_t>;  // card, position
  auto later = [&](const Head& a, const Head& b) {
    const auto& x = per_card[a.first][a.second];
    const auto& y = per_card[b.first][b.second];
    if (x.timestamp != y.timestamp) return x.timestamp > y.timestamp;
    return x.card > y.card;
  };
  std::vector<Head> heap;
  std::size_t total = 0;
  for (std::size_t c = 0; c < n; ++c) {
    total += per_card[c].size();
    if (!per_card[c].empty()) heap.emplace_back(c, 0);
  }
  std::make_heap(heap.begin(), heap.end(), later);
  std::vector<RawTransaction> out;
  out.reserve(total);
  while (!heap.empty()) {
    std::pop_heap(heap.begin(), heap.end(), later);
    auto [c, pos] = heap.back();
    heap.pop_back();
    auto& rec = per_card[c][pos];
    out.push_back(RawTransaction{rec.card, rec.timestamp, std::move(rec.values)});
    if (pos + 1 < per_card[c].size()) {
      heap.emplace_back(c, pos + 1);
      std::push_heap(heap.begin(), heap.end(), later);
    }
  }
  return out;
}

std::vector<MerchantTruth> ground_truth(const WorldConfig& config) {
  config.validate();
  const World w = build_world(config);
  std::vector<MerchantTruth> out;
  out.reserve(static_cast<std::size_t>(config.n_merchants));
  for (std::int64_t m = 0; m < config.n_merchants; ++m) {
    const auto i = static_cast<std::size_t>(m);
    out.push_back({merchant_token(m), country_token(w.merchant_country[i]), CardGenerator::city_token(w.merchant_city[i]),
                   CardGenerator::category_token(w.merchant_category[i])});
  }
  return out;
}

void write_records(const std::string& path, const std::vector<RawTransaction>& txns, const Schema& schema) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  const auto& attrs = schema.attributes();
  for (const auto& t : txns) {
    ordered_json j;
    j["card_id"] = t.card_id;
    j["timestamp"] = t.timestamp;
    for (std::size_t i = 0; i < attrs.size(); ++i) {
      const auto& v = t.values[i];
      if (const auto* d = std::get_if<double>(&v)) j[attrs[i].name] = *d;
      else if (const auto* s = std::get_if<std::string>(&v)) j[attrs[i].name] = *s;
      else j[attrs[i].name] = nullptr;
    }
    out << j.dump() << '\n';
  }
}

std::vector<RawTransaction> read_records(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  std::vector<RawTransaction> out;
  std::string line;
  std::size_t lineno = 0;
  const auto& attrs = schema.attributes();
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(where, e.what());
    }
    RawTransaction t;
    t.values.resize(attrs.size());
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& key = it.key();
      if (key == "card_id") {
        t.card_id = it->get<std::uint64_t>();
        continue;
      }
      if (key == "timestamp") {
        t.timestamp = it->get<std::int64_t>();
        continue;
      }
      const int idx = schema.index_of(key);
      if (idx < 0) throw ValidationError(where, "record has unknown attribute '" + key + "'");
      const auto& spec = attrs[static_cast<std::size_t>(idx)];
      if (it->is_null()) continue;
      if (spec.categorical()) {
        t.values[static_cast<std::size_t>(idx)] = it->is_string() ? it->get<std::string>() : it->dump();
      } else {
        if (!it->is_number()) throw ValidationError(where, "attribute '" + key + "' must be numeric");
        t.values[static_cast<std::size_t>(idx)] = it->get<double>();
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

void write_ground_truth(const std::string& path, const std::vector<MerchantTruth>& truth) {
  ordered_json rows = ordered_json::array();
  for (const auto& m : truth) {
    rows.push_back(ordered_json{{"merchant", m.token}, {"country", m.country}, {"city", m.city}, {"category", m.category}});
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << ordered_json{{"attribute", "merchant"}, {"rows", rows}}.dump(1) << "\n";
}

std::vector<MerchantTruth> read_ground_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  const json j = json::parse(in);
  std::vector<MerchantTruth> out;
  for (const auto& r : j.at("rows")) {
    out.push_back({r.at("merchant").get<std::string>(), r.at("country").get<std::string>(),
                   r.at("city").get<std::string>(), r.at("category").get<std::string>()});
  }
  return out;
}

}  // namespace txnf
