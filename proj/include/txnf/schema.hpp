#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace txnf {

enum class Kind { kNumerical, kCategorical };
enum class Scope { kStatic, kDynamic };

/// Bit set of attribute roles.
enum Role : unsigned {
  kInput = 1u << 0,
  kNextTarget = 1u << 1,
  kCurrentSignal = 1u << 2,
};

enum class CardinalityClass { kNumerical, kLowCat, kHighCat };

inline constexpr std::int64_t kDefaultCardinalityThreshold = 1024;

struct AttributeSpec {
  std::string name;
  Kind kind = Kind::kNumerical;
  Scope scope = Scope::kDynamic;
  unsigned roles = kInput;
  // Categorical only. Counts every embedding row, including the oov and
  // padding rows.
  std::optional<std::int64_t> cardinality;
  bool is_pivot = false;

  bool has(Role r) const { return (roles & r) != 0; }
  bool categorical() const { return kind == Kind::kCategorical; }
};

/// Dense token -> index mapping for one categorical attribute.
///
/// Kept tokens occupy [0, size), followed by one shared oov index and one
/// padding index. cardinality() therefore equals size + 2.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::string attribute, std::vector<std::string> tokens);

  const std::string& attribute() const { return attribute_; }
  std::int64_t lookup(std::string_view token) const;
  const std::string& token(std::int64_t index) const;
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  std::int64_t oov_index() const { return static_cast<std::int64_t>(tokens_.size()); }
  std::int64_t pad_index() const { return oov_index() + 1; }
  std::int64_t cardinality() const { return oov_index() + 2; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::ordered_json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  bool operator==(const Vocabulary& o) const { return attribute_ == o.attribute_ && tokens_ == o.tokens_; }

 private:
  std::string attribute_;
  std::vector<std::string> tokens_;
  std::map<std::string, std::int64_t, std::less<>> index_;
};

/// Frequency-threshold vocabulary. Tokens seen fewer than min_count times and
/// everything past the max_size most frequent fall into the oov index. Kept
/// tokens are ordered by descending count, ties by lexicographic token.
Vocabulary build_vocabulary(std::string attribute, const std::vector<std::string>& tokens,
                            std::int64_t min_count = 1, std::int64_t max_size = 1 << 20);

CardinalityClass classify(const AttributeSpec& spec,
                          std::int64_t threshold = kDefaultCardinalityThreshold);

/// Column layout of the attribute groups the corpus and model work with.
/// Every list holds attribute positions into Schema::attributes().
struct Layout {
  std::vector<int> static_num, static_cat;
  // Dynamic non-signal attributes; the model sees those flagged kInput and
  // predicts those flagged kNextTarget.
  std::vector<int> dyn_num, dyn_cat;
  std::vector<int> sig_num, sig_cat;
  int pivot = -1;
};

class Schema {
 public:
  static constexpr int kFormatVersion = 1;

  Schema() = default;
  explicit Schema(std::vector<AttributeSpec> attributes,
                  std::int64_t threshold = kDefaultCardinalityThreshold);

  const std::vector<AttributeSpec>& attributes() const { return attributes_; }
  const AttributeSpec& attribute(std::string_view name) const;
  int index_of(std::string_view name) const;  // -1 when absent
  std::int64_t threshold() const { return threshold_; }
  const Layout& layout() const { return layout_; }

  /// Installs a vocabulary and sets the attribute's cardinality from it.
  void set_vocabulary(Vocabulary vocab);
  const Vocabulary& vocabulary(std::string_view name) const;
  bool has_vocabulary(std::string_view name) const;

  CardinalityClass class_of(std::string_view name) const { return classify(attribute(name), threshold_); }

  /// Throws ValidationError unless every invariant holds. When
  /// require_cardinality is set, every categorical attribute must have one.
  void validate(bool require_cardinality = true) const;

  nlohmann::ordered_json to_json() const;
  static Schema from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static Schema load(const std::string& path);

  /// FNV-1a of the canonical serialized form, vocabularies included.
  std::uint64_t hash() const;

  /// Three static, seven dynamic and two signal attributes matching the
  /// synthetic generator.
  static Schema default_transactions();

 private:
  void rebuild_layout();

  std::vector<AttributeSpec> attributes_;
  std::int64_t threshold_ = kDefaultCardinalityThreshold;
  std::map<std::string, Vocabulary, std::less<>> vocabularies_;
  Layout layout_;
};

std::string to_string(Kind k);
std::string to_string(Scope s);
std::string hash_hex(std::uint64_t h);

}  // namespace txnf
