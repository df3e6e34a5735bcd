#include "txnf/schema.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "txnf/error.hpp"
#include "txnf/rng.hpp"

namespace txnf {

using nlohmann::json;
using nlohmann::ordered_json;

Vocabulary::Vocabulary(std::string attribute, std::vector<std::string> tokens)
    : attribute_(std::move(attribute)), tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int64_t>(i)).second) {
      throw ValidationError(attribute_, "duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

std::int64_t Vocabulary::lookup(std::string_view token) const {
  auto it = index_.find(token);
  return it == index_.end() ? oov_index() : it->second;
}

const std::string& Vocabulary::token(std::int64_t index) const {
  static const std::string kOov = "<oov>";
  static const std::string kPad = "<pad>";
  if (index == oov_index()) return kOov;
  if (index == pad_index()) return kPad;
  if (index < 0 || index > pad_index()) throw Error("vocabulary index out of range for " + attribute_);
  return tokens_[static_cast<std::size_t>(index)];
}

ordered_json Vocabulary::to_json() const {
  // Stored sorted by token for readable diffs; the index carries the order.
  std::vector<std::pair<std::string, std::int64_t>> sorted(index_.begin(), index_.end());
  ordered_json entries = ordered_json::array();
  for (auto& [tok, idx] : sorted) entries.push_back(ordered_json::array({tok, idx}));
  ordered_json j;
  j["attribute"] = attribute_;
  j["oov_index"] = oov_index();
  j["pad_index"] = pad_index();
  j["cardinality"] = cardinality();
  j["tokens"] = std::move(entries);
  return j;
}

Vocabulary Vocabulary::from_json(const json& j) {
  const auto& entries = j.at("tokens");
  std::vector<std::string> tokens(entries.size());
  std::vector<bool> seen(entries.size(), false);
  const std::string attr = j.at("attribute").get<std::string>();
  for (const auto& e : entries) {
    auto idx = e.at(1).get<std::int64_t>();
    if (idx < 0 || idx >= static_cast<std::int64_t>(tokens.size()) || seen[static_cast<std::size_t>(idx)]) {
      throw ValidationError(attr, "vocabulary indices are not dense");
    }
    seen[static_cast<std::size_t>(idx)] = true;
    tokens[static_cast<std::size_t>(idx)] = e.at(0).get<std::string>();
  }
  return Vocabulary(attr, std::move(tokens));
}

Vocabulary build_vocabulary(std::string attribute, const std::vector<std::string>& tokens,
                            std::int64_t min_count, std::int64_t max_size) {
  if (min_count < 1) throw ValidationError("min_count", "must be >= 1");
  if (max_size < 2) throw ValidationError("max_size", "must be >= 2");
  std::unordered_map<std::string, std::int64_t> counts;
  for (const auto& t : tokens) ++counts[t];
  std::vector<std::pair<std::string, std::int64_t>> ranked;
  for (auto& [tok, n] : counts) {
    if (n >= min_count) ranked.emplace_back(tok, n);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (static_cast<std::int64_t>(ranked.size()) > max_size) ranked.resize(static_cast<std::size_t>(max_size));
  std::vector<std::string> kept;
  kept.reserve(ranked.size());
  for (auto& r : ranked) kept.push_back(std::move(r.first));
  return Vocabulary(std::move(attribute), std::move(kept));
}

CardinalityClass classify(const AttributeSpec& spec, std::int64_t threshold) {
  if (spec.kind == Kind::kNumerical) return CardinalityClass::kNumerical;
  if (!spec.cardinality) throw ValidationError(spec.name, "categorical attribute has no cardinality");
  return *spec.cardinality <= threshold ? CardinalityClass::kLowCat : CardinalityClass::kHighCat;
}

Schema::Schema(std::vector<AttributeSpec> attributes, std::int64_t threshold)
    : attributes_(std::move(attributes)), threshold_(threshold) {
  rebuild_layout();
}

void Schema::rebuild_layout() {
  layout_ = Layout{};
  for (int i = 0; i < static_cast<int>(attributes_.size()); ++i) {
    const auto& a = attributes_[static_cast<std::size_t>(i)];
    const bool cat = a.categorical();
    if (a.has(kCurrentSignal)) {
      (cat ? layout_.sig_cat : layout_.sig_num).push_back(i);
    } else if (a.scope == Scope::kStatic) {
      (cat ? layout_.static_cat : layout_.static_num).push_back(i);
    } else {
      (cat ? layout_.dyn_cat : layout_.dyn_num).push_back(i);
    }
    if (a.is_pivot) layout_.pivot = i;
  }
}

const AttributeSpec& Schema::attribute(std::string_view name) const {
  int i = index_of(name);
  if (i < 0) throw ValidationError(std::string(name), "unknown attribute");
  return attributes_[static_cast<std::size_t>(i)];
}

int Schema::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < attributes_.size(); ++i) {
    if (attributes_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

void Schema::set_vocabulary(Vocabulary vocab) {
  int i = index_of(vocab.attribute());
  if (i < 0) throw ValidationError(vocab.attribute(), "vocabulary for unknown attribute");
  auto& spec = attributes_[static_cast<std::size_t>(i)];
  if (!spec.categorical()) throw ValidationError(spec.name, "vocabulary for numerical attribute");
  spec.cardinality = vocab.cardinality();
  vocabularies_.insert_or_assign(vocab.attribute(), std::move(vocab));
}

const Vocabulary& Schema::vocabulary(std::string_view name) const {
  auto it = vocabularies_.find(name);
  if (it == vocabularies_.end()) throw ValidationError(std::string(name), "no vocabulary");
  return it->second;
}

bool Schema::has_vocabulary(std::string_view name) const { return vocabularies_.find(name) != vocabularies_.end(); }

void Schema::validate(bool require_cardinality) const {
  if (threshold_ < 1) throw ValidationError("threshold", "must be positive");
  int pivots = 0;
  std::map<std::string, int, std::less<>> names;
  for (const auto& a : attributes_) {
    if (a.name.empty()) throw ValidationError("attributes", "attribute with empty name");
    if (++names[a.name] > 1) throw ValidationError(a.name, "duplicate attribute name");
    if (a.roles == 0) throw ValidationError(a.name, "attribute has no role");
    if (a.categorical()) {
      if (a.cardinality && *a.cardinality < 2) throw ValidationError(a.name, "cardinality must be >= 2");
      if (require_cardinality && !a.cardinality) throw ValidationError(a.name, "missing cardinality");
    } else if (a.cardinality) {
      throw ValidationError(a.name, "numerical attribute must not carry a cardinality");
    }
    if (a.has(kCurrentSignal) && a.has(kInput)) {
      throw ValidationError(a.name, "current_signal attributes cannot be inputs");
    }
    if (a.has(kCurrentSignal) && a.scope != Scope::kDynamic) {
      throw ValidationError(a.name, "current_signal attributes must be dynamic");
    }
    if (a.has(kNextTarget) && a.scope != Scope::kDynamic) {
      throw ValidationError(a.name, "next_target attributes must be dynamic");
    }
    if (a.scope == Scope::kStatic && !a.has(kInput)) {
      throw ValidationError(a.name, "static attributes must be inputs");
    }
    if (a.is_pivot) {
      ++pivots;
      if (!a.categorical() || !a.has(kCurrentSignal)) {
        throw ValidationError(a.name, "pivot must be a categorical current_signal attribute");
      }
    }
  }
  if (pivots != 1) throw ValidationError("is_pivot", "exactly one pivot attribute required, found " + std::to_string(pivots));
}

std::string to_string(Kind k) { return k == Kind::kNumerical ? "numerical" : "categorical"; }
std::string to_string(Scope s) { return s == Scope::kStatic ? "static" : "dynamic"; }

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

ordered_json roles_json(unsigned roles) {
  ordered_json r = ordered_json::array();
  if (roles & kInput) r.push_back("input");
  if (roles & kNextTarget) r.push_back("next_target");
  if (roles & kCurrentSignal) r.push_back("current_signal");
  return r;
}

unsigned roles_from(const json& j, const std::string& name) {
  unsigned roles = 0;
  for (const auto& r : j) {
    const auto s = r.get<std::string>();
    if (s == "input") roles |= kInput;
    else if (s == "next_target") roles |= kNextTarget;
    else if (s == "current_signal") roles |= kCurrentSignal;
    else throw ValidationError(name + ".role", "unknown role '" + s + "'");
  }
  return roles;
}

}  // namespace

ordered_json Schema::to_json() const {
  ordered_json j;
  j["format_version"] = kFormatVersion;
  j["cardinality_threshold"] = threshold_;
  ordered_json attrs = ordered_json::array();
  for (const auto& a : attributes_) {
    ordered_json e;
    e["name"] = a.name;
    e["kind"] = to_string(a.kind);
    e["scope"] = to_string(a.scope);
    e["role"] = roles_json(a.roles);
    if (a.cardinality) e["cardinality"] = *a.cardinality;
    e["is_pivot"] = a.is_pivot;
    attrs.push_back(std::move(e));
  }
  j["attributes"] = std::move(attrs);
  ordered_json vocabs = ordered_json::array();
  for (const auto& [name, v] : vocabularies_) vocabs.push_back(v.to_json());
  j["vocabularies"] = std::move(vocabs);
  return j;
}

Schema Schema::from_json(const json& j) {
  if (!j.contains("format_version")) throw ValidationError("format_version", "missing");
  if (j.at("format_version").get<int>() != kFormatVersion) {
    throw ValidationError("format_version", "unsupported schema format version");
  }
  std::vector<AttributeSpec> attrs;
  for (const auto& e : j.at("attributes")) {
    AttributeSpec a;
    a.name = e.at("name").get<std::string>();
    const auto kind = e.at("kind").get<std::string>();
    if (kind == "numerical") a.kind = Kind::kNumerical;
    else if (kind == "categorical") a.kind = Kind::kCategorical;
    else throw ValidationError(a.name + ".kind", "unknown kind '" + kind + "'");
    const auto scope = e.at("scope").get<std::string>();
    if (scope == "static") a.scope = Scope::kStatic;
    else if (scope == "dynamic") a.scope = Scope::kDynamic;
    else throw ValidationError(a.name + ".scope", "unknown scope '" + scope + "'");
    a.roles = roles_from(e.at("role"), a.name);
    if (e.contains("cardinality")) a.cardinality = e.at("cardinality").get<std::int64_t>();
    a.is_pivot = e.value("is_pivot", false);
    attrs.push_back(std::move(a));
  }
  Schema s(std::move(attrs), j.value("cardinality_threshold", kDefaultCardinalityThreshold));
  if (j.contains("vocabularies")) {
    for (const auto& v : j.at("vocabularies")) {
      auto vocab = Vocabulary::from_json(v);
      const auto declared = s.attribute(vocab.attribute()).cardinality;
      if (declared && *declared != vocab.cardinality()) {
        throw ValidationError(vocab.attribute(), "declared cardinality disagrees with vocabulary");
      }
      s.set_vocabulary(std::move(vocab));
    }
  }
  return s;
}

void Schema::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << to_json().dump(2) << "\n";
}

Schema Schema::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path, e.what());
  }
  return from_json(j);
}

std::uint64_t Schema::hash() const { return fnv1a64(to_json().dump()); }

Schema Schema::default_transactions() {
  auto cat = [](std::string name, Scope scope, unsigned roles, bool pivot = false) {
    AttributeSpec a;
    a.name = std::move(name);
    a.kind = Kind::kCategorical;
    a.scope = scope;
    a.roles = roles;
    a.is_pivot = pivot;
    return a;
  };
  auto num = [](std::string name, Scope scope, unsigned roles) {
    AttributeSpec a;
    a.name = std::move(name);
    a.kind = Kind::kNumerical;
    a.scope = scope;
    a.roles = roles;
    return a;
  };
  const unsigned dyn = kInput | kNextTarget;
  return Schema({
      cat("issuer_country", Scope::kStatic, kInput),
      cat("card_tier", Scope::kStatic, kInput),
      num("credit_limit", Scope::kStatic, kInput),
      cat("merchant", Scope::kDynamic, dyn),
      cat("merchant_country", Scope::kDynamic, dyn),
      cat("merchant_city", Scope::kDynamic, dyn),
      cat("merchant_category", Scope::kDynamic, dyn),
      cat("channel", Scope::kDynamic, dyn),
      num("amount", Scope::kDynamic, dyn),
      num("gap_hours", Scope::kDynamic, dyn),
      cat("response_code", Scope::kDynamic, kCurrentSignal),
      cat("abnormal_flag", Scope::kDynamic, kCurrentSignal, true),
  });
}

}  // namespace txnf
