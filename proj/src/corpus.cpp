#include "txnf/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "txnf/binio.hpp"
#include "txnf/error.hpp"
#include "txnf/rng.hpp"

namespace txnf {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::int64_t kSecondsPerMonth = 30LL * 86400;
constexpr std::uint32_t kShardVersion = 1;

template <class T>
void append_rows(std::vector<T>& dst, const std::vector<T>& src, std::int64_t begin, std::int64_t end, int width) {
  dst.insert(dst.end(), src.begin() + begin * width, src.begin() + end * width);
}

}  // namespace

std::uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::uint64_t h = fnv1a64("");
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a64(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
  }
  return h;
}

Widths Widths::of(const Schema& schema) {
  const auto& l = schema.layout();
  auto n = [](const std::vector<int>& v) { return static_cast<int>(v.size()); };
  return Widths{n(l.static_num), n(l.static_cat), n(l.dyn_num), n(l.dyn_cat), n(l.sig_num), n(l.sig_cat)};
}

std::int64_t CardSequence::scored_count() const {
  return std::count(scored.begin(), scored.end(), std::uint8_t{1});
}

CardSequence CardSequence::slice(std::int64_t begin, std::int64_t end, const Widths& w) const {
  CardSequence out;
  out.card_id = card_id;
  out.static_num = static_num;
  out.static_cat = static_cat;
  out.timestamps.assign(timestamps.begin() + begin, timestamps.begin() + end);
  out.scored.assign(scored.begin() + begin, scored.begin() + end);
  append_rows(out.dyn_num, dyn_num, begin, end, w.dyn_num);
  append_rows(out.dyn_cat, dyn_cat, begin, end, w.dyn_cat);
  append_rows(out.sig_num, sig_num, begin, end, w.sig_num);
  append_rows(out.sig_cat, sig_cat, begin, end, w.sig_cat);
  return out;
}

void TemporalSplit::validate() const {
  if (!(train_end < val_end)) throw ValidationError("split", "train_end must precede val_end");
  if (!(val_end < test_end)) throw ValidationError("split", "val_end must precede test_end");
}

TemporalSplit TemporalSplit::months(std::int64_t train_months, std::int64_t val_months, std::int64_t test_months) {
  TemporalSplit s;
  s.train_end = train_months * kSecondsPerMonth;
  s.val_end = s.train_end + val_months * kSecondsPerMonth;
  s.test_end = s.val_end + test_months * kSecondsPerMonth;
  s.validate();
  return s;
}

Schema fit_vocabularies(const Schema& schema, const std::vector<RawTransaction>& raw, std::int64_t train_end,
                        std::int64_t min_count, std::int64_t max_size) {
  Schema out = schema;
  const auto& attrs = schema.attributes();
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    if (!attrs[i].categorical()) continue;
    std::vector<std::string> tokens;
    for (const auto& t : raw) {
      if (t.timestamp >= train_end) continue;
      if (const auto* s = std::get_if<std::string>(&t.values[i])) tokens.push_back(*s);
    }
    out.set_vocabulary(build_vocabulary(attrs[i].name, tokens, min_count, max_size));
  }
  out.validate();
  return out;
}

std::vector<CardSequence> group_and_sort(const std::vector<RawTransaction>& raw, const Schema& schema) {
  const auto& attrs = schema.attributes();
  const auto& l = schema.layout();
  for (const auto& a : attrs) {
    if (a.categorical() && !schema.has_vocabulary(a.name)) throw ValidationError(a.name, "no vocabulary");
  }
  std::map<std::uint64_t, std::vector<std::size_t>> by_card;
  for (std::size_t r = 0; r < raw.size(); ++r) {
    if (raw[r].values.size() != attrs.size()) {
      throw ValidationError("record " + std::to_string(r), "record does not fit the schema");
    }
    by_card[raw[r].card_id].push_back(r);
  }

  auto num = [&](const RawTransaction& t, int a) -> float {
    if (const auto* d = std::get_if<double>(&t.values[static_cast<std::size_t>(a)])) return static_cast<float>(*d);
    return 0.0f;
  };
  auto cat = [&](const RawTransaction& t, int a) -> std::int32_t {
    const auto& vocab = schema.vocabulary(attrs[static_cast<std::size_t>(a)].name);
    if (const auto* s = std::get_if<std::string>(&t.values[static_cast<std::size_t>(a)])) {
      return static_cast<std::int32_t>(vocab.lookup(*s));
    }
    return static_cast<std::int32_t>(vocab.oov_index());
  };

  std::vector<CardSequence> out;
  out.reserve(by_card.size());
  for (auto& [card, rows] : by_card) {
    std::stable_sort(rows.begin(), rows.end(),
                     [&](std::size_t a, std::size_t b) { return raw[a].timestamp < raw[b].timestamp; });
    CardSequence s;
    s.card_id = card;
    const auto& first = raw[rows.front()];
    for (int a : l.static_num) s.static_num.push_back(num(first, a));
    for (int a : l.static_cat) s.static_cat.push_back(cat(first, a));
    for (auto r : rows) {
      const auto& t = raw[r];
      s.timestamps.push_back(t.timestamp);
      s.scored.push_back(1);
      for (int a : l.dyn_num) s.dyn_num.push_back(num(t, a));
      for (int a : l.dyn_cat) s.dyn_cat.push_back(cat(t, a));
      for (int a : l.sig_num) s.sig_num.push_back(num(t, a));
      for (int a : l.sig_cat) s.sig_cat.push_back(cat(t, a));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<CardSequence> window(const CardSequence& seq, std::int64_t max_seq_len) {
  if (max_seq_len < 2) throw ValidationError("max_seq_len", "must be >= 2");
  Widths w{static_cast<int>(seq.static_num.size()), static_cast<int>(seq.static_cat.size()), 0, 0, 0, 0};
  const auto n = seq.length();
  if (n > 0) {
    w.dyn_num = static_cast<int>(seq.dyn_num.size() / static_cast<std::size_t>(n));
    w.dyn_cat = static_cast<int>(seq.dyn_cat.size() / static_cast<std::size_t>(n));
    w.sig_num = static_cast<int>(seq.sig_num.size() / static_cast<std::size_t>(n));
    w.sig_cat = static_cast<int>(seq.sig_cat.size() / static_cast<std::size_t>(n));
  }
  if (n <= max_seq_len) return {seq};
  std::vector<CardSequence> out;
  for (std::int64_t b = 0; b < n; b += max_seq_len) out.push_back(seq.slice(b, std::min(n, b + max_seq_len), w));
  return out;
}

std::vector<CardSequence> window_all(const std::vector<CardSequence>& seqs, std::int64_t max_seq_len) {
  std::vector<CardSequence> out;
  for (const auto& s : seqs) {
    for (auto& w : window(s, max_seq_len)) {
      if (w.scored_count() > 0) out.push_back(std::move(w));
    }
  }
  return out;
}

Partitions split(const std::vector<CardSequence>& seqs, const TemporalSplit& sp, std::int64_t max_seq_len) {
  sp.validate();
  Partitions p;
  const std::int64_t bounds[4] = {std::numeric_limits<std::int64_t>::min(), sp.train_end, sp.val_end,
                                  std::numeric_limits<std::int64_t>::max()};
  std::vector<CardSequence>* targets[3] = {&p.train, &p.val, &p.test};
  for (const auto& s : seqs) {
    Widths w{static_cast<int>(s.static_num.size()), static_cast<int>(s.static_cat.size()), 0, 0, 0, 0};
    const auto n = s.length();
    if (n == 0) continue;
    w.dyn_num = static_cast<int>(s.dyn_num.size() / static_cast<std::size_t>(n));
    w.dyn_cat = static_cast<int>(s.dyn_cat.size() / static_cast<std::size_t>(n));
    w.sig_num = static_cast<int>(s.sig_num.size() / static_cast<std::size_t>(n));
    w.sig_cat = static_cast<int>(s.sig_cat.size() / static_cast<std::size_t>(n));
    for (int part = 0; part < 3; ++part) {
      // Steps with bounds[part] <= ts < bounds[part + 1]; test also keeps
      // everything past test_end so nothing is dropped.
      std::int64_t first = 0;
      while (first < n && s.timestamps[static_cast<std::size_t>(first)] < bounds[part]) ++first;
      std::int64_t last = first;
      while (last < n && s.timestamps[static_cast<std::size_t>(last)] < bounds[part + 1]) ++last;
      if (last == first) continue;
      const std::int64_t scored = last - first;
      const std::int64_t context = std::min(first, std::max<std::int64_t>(0, max_seq_len - scored));
      CardSequence out = s.slice(first - context, last, w);
      std::fill(out.scored.begin(), out.scored.begin() + context, std::uint8_t{0});
      std::fill(out.scored.begin() + context, out.scored.end(), std::uint8_t{1});
      targets[part]->push_back(std::move(out));
    }
  }
  static const char* const names[] = {"train", "val", "test"};
  for (int part = 0; part < 3; ++part) {
    if (targets[part]->empty()) std::cerr << "warning: empty " << names[part] << " partition\n";
  }
  return p;
}

Batch make_batch(const std::vector<const CardSequence*>& seqs, const Schema& schema) {
  Batch b;
  b.widths = Widths::of(schema);
  const auto& w = b.widths;
  b.batch_size = static_cast<int>(seqs.size());
  for (const auto* s : seqs) b.steps = std::max(b.steps, static_cast<int>(s->length()));
  const auto B = static_cast<std::size_t>(b.batch_size);
  const auto T = static_cast<std::size_t>(b.steps);
  const auto& l = schema.layout();
  auto pad_of = [&](int attr) {
    return static_cast<std::int32_t>(schema.vocabulary(schema.attributes()[static_cast<std::size_t>(attr)].name).pad_index());
  };
  std::vector<std::int32_t> dyn_pad, sig_pad;
  for (int a : l.dyn_cat) dyn_pad.push_back(pad_of(a));
  for (int a : l.sig_cat) sig_pad.push_back(pad_of(a));

  b.static_num.reserve(B * static_cast<std::size_t>(w.static_num));
  b.static_cat.reserve(B * static_cast<std::size_t>(w.static_cat));
  b.dyn_num.assign(B * T * static_cast<std::size_t>(w.dyn_num), 0.0f);
  b.next_num.assign(B * T * static_cast<std::size_t>(w.dyn_num), 0.0f);
  b.sig_num.assign(B * T * static_cast<std::size_t>(w.sig_num), 0.0f);
  b.dyn_cat.resize(B * T * static_cast<std::size_t>(w.dyn_cat));
  b.next_cat.resize(B * T * static_cast<std::size_t>(w.dyn_cat));
  b.sig_cat.resize(B * T * static_cast<std::size_t>(w.sig_cat));
  for (std::size_t r = 0; r < B * T; ++r) {
    for (int c = 0; c < w.dyn_cat; ++c) {
      b.dyn_cat[r * static_cast<std::size_t>(w.dyn_cat) + static_cast<std::size_t>(c)] = dyn_pad[static_cast<std::size_t>(c)];
      b.next_cat[r * static_cast<std::size_t>(w.dyn_cat) + static_cast<std::size_t>(c)] = dyn_pad[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < w.sig_cat; ++c) {
      b.sig_cat[r * static_cast<std::size_t>(w.sig_cat) + static_cast<std::size_t>(c)] = sig_pad[static_cast<std::size_t>(c)];
    }
  }
  b.valid.assign(B * T, 0);
  b.scored.assign(B * T, 0);
  b.next_mask.assign(B * T, 0);

  for (std::size_t i = 0; i < B; ++i) {
    const auto& s = *seqs[i];
    b.card_ids.push_back(s.card_id);
    b.lengths.push_back(static_cast<int>(s.length()));
    b.static_num.insert(b.static_num.end(), s.static_num.begin(), s.static_num.end());
    b.static_cat.insert(b.static_cat.end(), s.static_cat.begin(), s.static_cat.end());
    const auto n = static_cast<std::size_t>(s.length());
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t row = i * T + t;
      b.valid[row] = 1;
      b.scored[row] = s.scored[t];
      std::copy_n(s.dyn_num.begin() + static_cast<std::ptrdiff_t>(t * w.dyn_num), w.dyn_num,
                  b.dyn_num.begin() + static_cast<std::ptrdiff_t>(row * w.dyn_num));
      std::copy_n(s.dyn_cat.begin() + static_cast<std::ptrdiff_t>(t * w.dyn_cat), w.dyn_cat,
                  b.dyn_cat.begin() + static_cast<std::ptrdiff_t>(row * w.dyn_cat));
      std::copy_n(s.sig_num.begin() + static_cast<std::ptrdiff_t>(t * w.sig_num), w.sig_num,
                  b.sig_num.begin() + static_cast<std::ptrdiff_t>(row * w.sig_num));
      std::copy_n(s.sig_cat.begin() + static_cast<std::ptrdiff_t>(t * w.sig_cat), w.sig_cat,
                  b.sig_cat.begin() + static_cast<std::ptrdiff_t>(row * w.sig_cat));
      if (t + 1 < n && s.scored[t]) {
        b.next_mask[row] = 1;
        std::copy_n(s.dyn_num.begin() + static_cast<std::ptrdiff_t>((t + 1) * w.dyn_num), w.dyn_num,
                    b.next_num.begin() + static_cast<std::ptrdiff_t>(row * w.dyn_num));
        std::copy_n(s.dyn_cat.begin() + static_cast<std::ptrdiff_t>((t + 1) * w.dyn_cat), w.dyn_cat,
                    b.next_cat.begin() + static_cast<std::ptrdiff_t>(row * w.dyn_cat));
      }
    }
  }
  return b;
}

std::vector<Batch> batch(const std::vector<CardSequence>& corpus, const Schema& schema, int batch_size,
                         std::uint64_t seed, std::uint64_t epoch) {
  if (corpus.empty()) throw ValidationError("corpus", "cannot batch an empty corpus");
  if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).split("batch").split(epoch);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  std::vector<Batch> out;
  for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(batch_size)) {
    std::vector<const CardSequence*> members;
    for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(batch_size)); ++i) {
      members.push_back(&corpus[order[i]]);
    }
    out.push_back(make_batch(members, schema));
  }
  return out;
}

std::vector<Batch> batch_in_order(const std::vector<CardSequence>& corpus, const Schema& schema, int batch_size) {
  std::vector<Batch> out;
  for (std::size_t b = 0; b < corpus.size(); b += static_cast<std::size_t>(batch_size)) {
    std::vector<const CardSequence*> members;
    for (std::size_t i = b; i < std::min(corpus.size(), b + static_cast<std::size_t>(batch_size)); ++i) {
      members.push_back(&corpus[i]);
    }
    out.push_back(make_batch(members, schema));
  }
  return out;
}

void write_shard(const std::string& path, const std::vector<CardSequence>& seqs, const Schema& schema) {
  const Widths w = Widths::of(schema);
  BinaryWriter out(path);
  out.put_bytes("TXNFSHRD");
  out.put(kShardVersion);
  out.put(schema.hash());
  for (int v : {w.static_num, w.static_cat, w.dyn_num, w.dyn_cat, w.sig_num, w.sig_cat}) {
    out.put(static_cast<std::uint32_t>(v));
  }
  out.put(static_cast<std::uint64_t>(seqs.size()));
  for (const auto& s : seqs) {
    out.put(s.card_id);
    out.put(static_cast<std::uint32_t>(s.length()));
    out.put_array(s.static_num.data(), s.static_num.size());
    out.put_array(s.static_cat.data(), s.static_cat.size());
    for (std::size_t t = 0; t < static_cast<std::size_t>(s.length()); ++t) {
      out.put(s.timestamps[t]);
      out.put(s.scored[t]);
      out.put_array(s.dyn_num.data() + t * static_cast<std::size_t>(w.dyn_num), static_cast<std::size_t>(w.dyn_num));
      out.put_array(s.dyn_cat.data() + t * static_cast<std::size_t>(w.dyn_cat), static_cast<std::size_t>(w.dyn_cat));
      out.put_array(s.sig_num.data() + t * static_cast<std::size_t>(w.sig_num), static_cast<std::size_t>(w.sig_num));
      out.put_array(s.sig_cat.data() + t * static_cast<std::size_t>(w.sig_cat), static_cast<std::size_t>(w.sig_cat));
    }
  }
  out.close();
}

std::vector<CardSequence> read_shard(const std::string& path, const Schema& schema) {
  BinaryReader in(path);
  if (in.get_bytes(8) != "TXNFSHRD") throw Error(path + ": not a shard file");
  if (in.get<std::uint32_t>() != kShardVersion) throw Error(path + ": unsupported shard version");
  const auto hash = in.get<std::uint64_t>();
  if (hash != schema.hash()) {
    throw SchemaMismatch(path + ": shard schema hash " + hash_hex(hash) + " != " + hash_hex(schema.hash()));
  }
  Widths w;
  for (int* v : {&w.static_num, &w.static_cat, &w.dyn_num, &w.dyn_cat, &w.sig_num, &w.sig_cat}) {
    *v = static_cast<int>(in.get<std::uint32_t>());
  }
  if (!(w == Widths::of(schema))) throw SchemaMismatch(path + ": shard widths disagree with schema");
  const auto n = in.get<std::uint64_t>();
  std::vector<CardSequence> out(n);
  for (auto& s : out) {
    s.card_id = in.get<std::uint64_t>();
    const auto len = in.get<std::uint32_t>();
    s.static_num.resize(static_cast<std::size_t>(w.static_num));
    s.static_cat.resize(static_cast<std::size_t>(w.static_cat));
    in.get_array(s.static_num.data(), s.static_num.size());
    in.get_array(s.static_cat.data(), s.static_cat.size());
    s.timestamps.resize(len);
    s.scored.resize(len);
    s.dyn_num.resize(len * static_cast<std::size_t>(w.dyn_num));
    s.dyn_cat.resize(len * static_cast<std::size_t>(w.dyn_cat));
    s.sig_num.resize(len * static_cast<std::size_t>(w.sig_num));
    s.sig_cat.resize(len * static_cast<std::size_t>(w.sig_cat));
    for (std::size_t t = 0; t < len; ++t) {
      s.timestamps[t] = in.get<std::int64_t>();
      s.scored[t] = in.get<std::uint8_t>();
      in.get_array(s.dyn_num.data() + t * static_cast<std::size_t>(w.dyn_num), static_cast<std::size_t>(w.dyn_num));
      in.get_array(s.dyn_cat.data() + t * static_cast<std::size_t>(w.dyn_cat), static_cast<std::size_t>(w.dyn_cat));
      in.get_array(s.sig_num.data() + t * static_cast<std::size_t>(w.sig_num), static_cast<std::size_t>(w.sig_num));
      in.get_array(s.sig_cat.data() + t * static_cast<std::size_t>(w.sig_cat), static_cast<std::size_t>(w.sig_cat));
    }
  }
  return out;
}

std::vector<Interaction> interactions(const std::vector<CardSequence>& seqs, const Schema& schema,
                                      const std::string& attribute) {
  const auto& l = schema.layout();
  const int attr = schema.index_of(attribute);
  auto it = std::find(l.dyn_cat.begin(), l.dyn_cat.end(), attr);
  if (it == l.dyn_cat.end()) throw ValidationError(attribute, "not a dynamic categorical attribute");
  const auto col = static_cast<std::size_t>(it - l.dyn_cat.begin());
  const auto width = l.dyn_cat.size();
  std::vector<Interaction> out;
  for (const auto& s : seqs) {
    for (std::size_t t = 0; t < static_cast<std::size_t>(s.length()); ++t) {
      if (!s.scored[t]) continue;
      out.push_back({s.card_id, s.dyn_cat[t * width + col], s.timestamps[t]});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Interaction& a, const Interaction& b) {
    return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.card_id < b.card_id;
  });
  return out;
}

void write_interactions(const std::string& path, const std::vector<Interaction>& xs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "card_id,merchant,timestamp\n";
  for (const auto& x : xs) out << x.card_id << ',' << x.merchant << ',' << x.timestamp << '\n';
}

std::vector<Interaction> read_interactions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  std::vector<Interaction> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Interaction x;
    unsigned long long card = 0;
    long long ts = 0;
    int m = 0;
    if (std::sscanf(line.c_str(), "%llu,%d,%lld", &card, &m, &ts) != 3) throw ValidationError(path, "bad line: " + line);
    x.card_id = card;
    x.merchant = m;
    x.timestamp = ts;
    out.push_back(x);
  }
  return out;
}

CorpusDir build_corpus(const std::vector<RawTransaction>& raw, const Schema& base, const TemporalSplit& sp,
                       std::int64_t max_seq_len, std::int64_t min_count, std::int64_t max_vocab) {
  sp.validate();
  if (max_seq_len < 1) throw ValidationError("max_seq_len", "must be >= 1");
  CorpusDir c;
  c.schema = fit_vocabularies(base, raw, sp.train_end, min_count, max_vocab);
  c.split = sp;
  c.max_seq_len = max_seq_len;
  const Partitions parts = split(group_and_sort(raw, c.schema), sp, max_seq_len);
  c.parts.train = window_all(parts.train, max_seq_len);
  c.parts.val = window_all(parts.val, max_seq_len);
  c.parts.test = window_all(parts.test, max_seq_len);
  return c;
}

void write_corpus(const std::string& dir, const CorpusDir& c) {
  fs::create_directories(dir);
  c.schema.save(dir + "/schema.json");
  ordered_json parts;
  const std::pair<const char*, const std::vector<CardSequence>*> all[] = {
      {"train", &c.parts.train}, {"val", &c.parts.val}, {"test", &c.parts.test}};
  for (auto [name, seqs] : all) {
    const std::string file = std::string(name) + ".shard";
    write_shard(dir + "/" + file, *seqs, c.schema);
    std::int64_t steps = 0, scored = 0;
    for (const auto& s : *seqs) {
      steps += s.length();
      scored += s.scored_count();
    }
    parts[name] = ordered_json{{"shards", ordered_json::array({file})},
                               {"sequences", seqs->size()},
                               {"steps", steps},
                               {"scored_transactions", scored},
                               {"checksum", hash_hex(file_checksum(dir + "/" + file))}};
  }
  std::vector<CardSequence> later = c.parts.val;
  later.insert(later.end(), c.parts.test.begin(), c.parts.test.end());
  if (c.schema.index_of("merchant") >= 0) write_interactions(dir + "/interactions.csv", interactions(later, c.schema));
  ordered_json m;
  m["format_version"] = 1;
  m["schema_hash"] = hash_hex(c.schema.hash());
  m["max_seq_len"] = c.max_seq_len;
  m["split"] = ordered_json{{"train_end", c.split.train_end}, {"val_end", c.split.val_end}, {"test_end", c.split.test_end}};
  m["partitions"] = std::move(parts);
  std::ofstream out(dir + "/corpus.json");
  out << m.dump(2) << "\n";
}

CorpusDir read_corpus(const std::string& dir) {
  CorpusDir c;
  c.schema = Schema::load(dir + "/schema.json");
  std::ifstream in(dir + "/corpus.json");
  if (!in) throw Error("cannot read " + dir + "/corpus.json");
  const json m = json::parse(in);
  if (m.at("schema_hash").get<std::string>() != hash_hex(c.schema.hash())) {
    throw SchemaMismatch(dir + ": corpus manifest schema hash does not match schema.json");
  }
  c.max_seq_len = m.at("max_seq_len").get<std::int64_t>();
  const auto& sp = m.at("split");
  c.split = {sp.at("train_end").get<std::int64_t>(), sp.at("val_end").get<std::int64_t>(), sp.at("test_end").get<std::int64_t>()};
  auto load = [&](const char* name, std::vector<CardSequence>& dst) {
    for (const auto& f : m.at("partitions").at(name).at("shards")) {
      auto part = read_shard(dir + "/" + f.get<std::string>(), c.schema);
      dst.insert(dst.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
  };
  load("train", c.parts.train);
  load("val", c.parts.val);
  load("test", c.parts.test);
  return c;
}

}  // namespace txnf
