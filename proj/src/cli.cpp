#include "txnf/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "txnf/binio.hpp"
#include "txnf/checkpoint.hpp"
#include "txnf/corpus.hpp"
#include "txnf/embedsvc.hpp"
#include "txnf/error.hpp"
#include "txnf/eval.hpp"
#include "txnf/rec.hpp"
#include "txnf/server.hpp"
#include "txnf/syngen.hpp"
#include "txnf/trainer.hpp"

namespace txnf {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config", "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config", path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

/// Runs `f` and prefixes the field of any ValidationError with `section.`.
template <class F>
auto in_section(const std::string& section, F&& f) {
  try {
    return f();
  } catch (const ValidationError& e) {
    const std::string prefix = section + ".";
    if (e.field().rfind(prefix, 0) == 0) throw;
    std::string msg = e.what();
    msg = msg.substr(std::min(msg.size(), e.field().size() + 2));
    throw ValidationError(prefix + e.field(), msg);
  }
}

/// The config object of a command: the file if given, else empty.
json load_config(const std::string& path, const std::vector<std::string>& allowed) {
  json j = path.empty() ? json::object() : read_json(resolve_path(path));
  if (!j.is_object()) throw ValidationError("config", "top level must be an object");
  for (const auto& [key, v] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ValidationError(key, "unknown field");
    }
  }
  return j;
}

template <class T>
T field_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(key, e.what());
  }
}

template <class T>
void override_field(json& j, const std::string& key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

/// Reads the upstream manifest and checks it against the artifact's schema hash.
RunManifest check_upstream(const std::string& dir, std::uint64_t actual_hash) {
  if (!fs::exists(fs::path(dir) / kManifestFile)) {
    throw ValidationError("input", dir + " has no " + kManifestFile);
  }
  RunManifest m = RunManifest::read(dir);
  if (m.schema_hash != hash_hex(actual_hash)) {
    throw SchemaMismatch(dir + ": manifest schema hash " + m.schema_hash + " does not match the artifacts (" +
                         hash_hex(actual_hash) + ")");
  }
  return m;
}

struct Run {
  RunManifest manifest;
  std::string out;

  Run(std::string command, const std::string& out_dir) : out(resolve_path(out_dir)) {
    manifest.command = std::move(command);
    manifest.started_at = utc_now();
    manifest.outputs["dir"] = out;
    fs::create_directories(out);
  }

  void finish() {
    manifest.checksums = directory_checksums(out);
    manifest.finished_at = utc_now();
    manifest.write(out);
  }
};

void copy_if_exists(const fs::path& from, const fs::path& to) {
  if (fs::exists(from)) fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> cards, merchants;
  std::optional<std::int64_t> threshold;
};

void cmd_generate(const GenerateArgs& a) {
  json c = load_config(a.config, {"world", "cardinality_threshold"});
  json world_j = c.value("world", json::object());
  override_field(world_j, "seed", a.seed);
  override_field(world_j, "n_cards", a.cards);
  override_field(world_j, "n_merchants", a.merchants);
  override_field(c, "cardinality_threshold", a.threshold);
  const WorldConfig world = in_section("world", [&] { return WorldConfig::from_json(world_j); });
  const auto threshold = field_or<std::int64_t>(c, "cardinality_threshold", kDefaultCardinalityThreshold);
  if (threshold < 2) throw ValidationError("cardinality_threshold", "must be >= 2");

  Run run("generate", a.out);
  const Schema schema(Schema::default_transactions().attributes(), threshold);
  const auto raw = generate(world, schema);
  write_records(run.out + "/records.ndjson", raw, schema);
  write_ground_truth(run.out + "/ground_truth.json", ground_truth(world));
  schema.save(run.out + "/schema.json");
  std::set<std::uint64_t> cards;
  for (const auto& t : raw) cards.insert(t.card_id);

  run.manifest.config = {{"world", world.to_json()}, {"cardinality_threshold", threshold}};
  run.manifest.seeds = {{"world", world.seed}};
  run.manifest.schema_hash = hash_hex(schema.hash());
  run.manifest.outputs["records"] = run.out + "/records.ndjson";
  run.finish();
  std::cout << "generated " << raw.size() << " transactions for " << cards.size() << " cards into " << run.out
            << "\n";
}

// ---------------------------------------------------------------------------

struct CorpusArgs {
  std::string config, data, out;
  std::optional<std::int64_t> max_seq_len, train_months;
};

void cmd_build_corpus(const CorpusArgs& a) {
  json c = load_config(a.config, {"train_months", "val_months", "test_months", "max_seq_len", "min_count", "max_vocab"});
  override_field(c, "max_seq_len", a.max_seq_len);
  override_field(c, "train_months", a.train_months);
  const auto train_m = field_or<std::int64_t>(c, "train_months", 24);
  const auto val_m = field_or<std::int64_t>(c, "val_months", 1);
  const auto test_m = field_or<std::int64_t>(c, "test_months", 1);
  const auto max_len = field_or<std::int64_t>(c, "max_seq_len", 512);
  const auto min_count = field_or<std::int64_t>(c, "min_count", 1);
  const auto max_vocab = field_or<std::int64_t>(c, "max_vocab", std::int64_t{1} << 20);
  if (train_m < 1) throw ValidationError("train_months", "must be >= 1");
  if (val_m < 1) throw ValidationError("val_months", "must be >= 1");
  if (test_m < 1) throw ValidationError("test_months", "must be >= 1");
  if (max_len < 2) throw ValidationError("max_seq_len", "must be >= 2");

  const std::string data = resolve_path(a.data);
  const Schema base = Schema::load(data + "/schema.json");
  const RunManifest up = check_upstream(data, base.hash());
  const auto raw = read_records(data + "/records.ndjson", base);

  Run run("build-corpus", a.out);
  const TemporalSplit split = TemporalSplit::months(train_m, val_m, test_m);
  const CorpusDir corpus = build_corpus(raw, base, split, max_len, min_count, max_vocab);
  write_corpus(run.out, corpus);
  copy_if_exists(fs::path(data) / "ground_truth.json", fs::path(run.out) / "ground_truth.json");

  run.manifest.config = {{"train_months", train_m}, {"val_months", val_m}, {"test_months", test_m},
                         {"max_seq_len", max_len},  {"min_count", min_count}, {"max_vocab", max_vocab}};
  run.manifest.seeds = up.seeds;
  run.manifest.inputs["data"] = data;
  run.manifest.inputs["upstream_schema_hash"] = up.schema_hash;
  run.manifest.schema_hash = hash_hex(corpus.schema.hash());
  run.finish();
  std::cout << "corpus: " << corpus.parts.train.size() << " train, " << corpus.parts.val.size() << " val, "
            << corpus.parts.test.size() << " test sequences in " << run.out << "\n";
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  std::optional<int> epochs, batch_size;
  std::optional<double> learning_rate;
  std::optional<std::uint64_t> seed;
  std::string resume;
  int extra_epochs = 1;
};

CorpusDir load_corpus(const std::string& dir) {
  CorpusDir c = read_corpus(dir);
  check_upstream(dir, c.schema.hash());
  return c;
}

void cmd_train(const TrainArgs& a) {
  json c = load_config(a.config, {"model", "train"});
  json model_j = c.value("model", json::object());
  json train_j = c.value("train", json::object());
  override_field(train_j, "epochs", a.epochs);
  override_field(train_j, "batch_size", a.batch_size);
  override_field(train_j, "learning_rate", a.learning_rate);
  override_field(train_j, "seed", a.seed);
  override_field(model_j, "init_seed", a.seed);
  ModelConfig mc = in_section("model", [&] { return ModelConfig::from_json(model_j); });
  const TrainConfig tc = in_section("train", [&] { return TrainConfig::from_json(train_j); });

  const std::string data = resolve_path(a.data);
  const CorpusDir corpus = load_corpus(data);
  if (!model_j.contains("max_seq_len")) mc.max_seq_len = corpus.max_seq_len;
  mc.validate();

  Run run("train", a.out);
  std::ofstream metrics(run.out + "/metrics.ndjson");
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m) {
    metrics << m.to_json().dump() << "\n";
    metrics.flush();
    std::cout << "epoch " << m.epoch << " val " << std::setprecision(6) << m.selection << (m.best ? " *" : "")
              << std::endl;
  };
  TrainResult r;
  if (a.resume.empty()) {
    r = train(corpus.schema, corpus.parts.train, corpus.parts.val, mc, tc, hooks);
  } else {
    const Checkpoint last = load_checkpoint(resolve_path(a.resume));
    r = resume(last, corpus.schema, corpus.parts.train, corpus.parts.val, tc, a.extra_epochs, hooks);
    run.manifest.inputs["resume"] = resolve_path(a.resume);
  }
  metrics.close();
  if (!r.best.params.empty()) save_checkpoint(run.out + "/best.ckpt", r.best);
  save_checkpoint(run.out + "/last.ckpt", r.last);

  run.manifest.config = {{"model", mc.to_json()}, {"train", tc.to_json()}};
  run.manifest.seeds = {{"init", mc.init_seed}, {"train", tc.seed}};
  run.manifest.inputs["data"] = data;
  run.manifest.schema_hash = hash_hex(corpus.schema.hash());
  run.finish();
  std::cout << "trained " << r.total_steps << " steps; checkpoints in " << run.out << "\n";
}

// ---------------------------------------------------------------------------

Checkpoint load_checked_checkpoint(const std::string& path, const Schema& schema) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.schema_hash != schema.hash()) {
    throw SchemaMismatch(path + " was trained on schema " + hash_hex(ckpt.schema_hash) + ", corpus has " +
                         hash_hex(schema.hash()));
  }
  const fs::path dir = fs::path(path).parent_path();
  if (fs::exists(dir / kManifestFile)) check_upstream(dir.string(), schema.hash());
  return ckpt;
}

const std::vector<CardSequence>& partition(const CorpusDir& c, const std::string& name) {
  if (name == "train") return c.parts.train;
  if (name == "val") return c.parts.val;
  if (name == "test") return c.parts.test;
  throw ValidationError("partition", "expected train, val or test, got '" + name + "'");
}

struct EvalArgs {
  std::string config, data, checkpoint, out;
  std::optional<std::string> partition;
  std::optional<int> batch_size;
};

std::string metrics_csv(const MetricReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << "attribute,metric,value\n";
  for (const auto& [attr, v] : r.prec_at_1) {
    if (v) out << attr << ",prec_at_1," << *v << "\n";
  }
  for (const auto& [attr, v] : r.smape) {
    if (v) out << attr << ",smape," << *v << "\n";
  }
  if (r.auc) out << r.pivot << ",auc," << *r.auc << "\n";
  return out.str();
}

void cmd_eval(const EvalArgs& a) {
  json c = load_config(a.config, {"partition", "batch_size", "positive_token"});
  override_field(c, "partition", a.partition);
  override_field(c, "batch_size", a.batch_size);
  EvalOptions opt;
  opt.batch_size = field_or<int>(c, "batch_size", opt.batch_size);
  opt.positive_token = field_or<std::string>(c, "positive_token", opt.positive_token);
  if (opt.batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
  const std::string part = field_or<std::string>(c, "partition", "test");

  const std::string data = resolve_path(a.data);
  const CorpusDir corpus = load_corpus(data);
  const auto& seqs = partition(corpus, part);
  const std::string ckpt_path = resolve_path(a.checkpoint);
  Model<float> model = restore_model(load_checked_checkpoint(ckpt_path, corpus.schema));

  Run run("eval", a.out);
  const MetricReport r = evaluate(model, seqs, opt);
  write_text(run.out + "/metrics.json", r.to_json().dump(2) + "\n");
  write_text(run.out + "/metrics.csv", metrics_csv(r));

  run.manifest.config = {{"partition", part}, {"batch_size", opt.batch_size}, {"positive_token", opt.positive_token}};
  run.manifest.inputs["data"] = data;
  run.manifest.inputs["checkpoint"] = ckpt_path;
  run.manifest.schema_hash = hash_hex(corpus.schema.hash());
  run.finish();
  std::cout << metrics_csv(r);
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

void cmd_bench(const BenchArgs& a) {
  json c = a.config.empty() ? json::object() : read_json(resolve_path(a.config));
  override_field(c, "seed", a.seed);
  const BenchmarkConfig bc = BenchmarkConfig::from_json(c);
  Run run("bench-negatives", a.out);
  const BenchmarkReport r = memory_benchmark(bc);
  write_text(run.out + "/bench.json", r.to_json().dump(2) + "\n");
  write_text(run.out + "/bench.csv", r.to_csv());
  run.manifest.config = bc.to_json();
  run.manifest.seeds = {{"bench", bc.seed}};
  run.finish();
  std::cout << r.to_table();
}

// ---------------------------------------------------------------------------

struct ScalingArgs {
  std::string config, out;
  std::optional<std::string> axis;
  std::vector<std::int64_t> points;
};

void cmd_scaling(const ScalingArgs& a) {
  json c = a.config.empty() ? json::object() : read_json(resolve_path(a.config));
  override_field(c, "axis", a.axis);
  if (!a.points.empty()) c["points"] = a.points;
  const ScalingConfig sc = ScalingConfig::from_json(c);
  Run run("scaling", a.out);
  const ScalingReport r = scaling_study(sc, [](const ScalingRow& row) {
    std::cout << "size " << row.size << " val pivot loss " << row.val_pivot_loss << std::endl;
  });
  write_text(run.out + "/scaling.json", r.to_json().dump(2) + "\n");
  write_text(run.out + "/scaling.csv", r.to_csv());
  run.manifest.config = sc.to_json();
  run.manifest.seeds = {{"world", sc.world.seed}, {"init", sc.model.init_seed}, {"train", sc.train.seed}};
  run.finish();
  for (const auto& m : r.summary) {
    std::cout << m.metric << ": " << m.improving << "/" << m.pairs << " adjacent pairs improve\n";
  }
}

// ---------------------------------------------------------------------------

struct ExportArgs {
  std::string config, data, checkpoint, out;
  std::optional<int> batch_size;
};

void cmd_export(const ExportArgs& a) {
  json c = load_config(a.config, {"batch_size"});
  override_field(c, "batch_size", a.batch_size);
  const int batch = field_or<int>(c, "batch_size", 64);
  if (batch < 1) throw ValidationError("batch_size", "must be >= 1");
  const std::string data = resolve_path(a.data);
  const CorpusDir corpus = load_corpus(data);
  const std::string ckpt_path = resolve_path(a.checkpoint);
  Model<float> model = restore_model(load_checked_checkpoint(ckpt_path, corpus.schema));

  Run run("export-embeddings", a.out);
  // Card states are read at the training cutoff.
  const EmbeddingExport e = export_embeddings(model, corpus.parts.train, batch);
  write_export(run.out, e);
  copy_if_exists(fs::path(data) / "ground_truth.json", fs::path(run.out) / "ground_truth.json");

  run.manifest.config = {{"batch_size", batch}};
  run.manifest.inputs["data"] = data;
  run.manifest.inputs["checkpoint"] = ckpt_path;
  run.manifest.schema_hash = hash_hex(corpus.schema.hash());
  run.finish();
  for (const auto& t : e.tables) std::cout << t.attribute << ": " << t.rows() << " x " << t.vectors.cols() << "\n";
}

EmbeddingExport load_export(const std::string& dir) {
  EmbeddingExport e = read_export(dir);
  check_upstream(dir, e.schema_hash);
  return e;
}

// ---------------------------------------------------------------------------

struct RecArgs {
  std::string config, embeddings, interactions, out;
  std::vector<int> k;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
};

void cmd_rec(const RecArgs& a) {
  json c = load_config(a.config, {"tower", "train_fraction", "val_fraction"});
  json tower_j = c.value("tower", json::object());
  if (!a.k.empty()) tower_j["k"] = a.k;
  override_field(tower_j, "epochs", a.epochs);
  override_field(tower_j, "seed", a.seed);
  const TowerConfig tc = in_section("tower", [&] { return TowerConfig::from_json(tower_j); });
  const double train_f = field_or<double>(c, "train_fraction", 0.7);
  const double val_f = field_or<double>(c, "val_fraction", 0.15);

  const std::string emb_dir = resolve_path(a.embeddings);
  const std::string xs_dir = resolve_path(a.interactions);
  const EmbeddingExport e = load_export(emb_dir);
  const RunManifest xs_manifest = RunManifest::read(xs_dir);
  if (xs_manifest.schema_hash != hash_hex(e.schema_hash)) {
    throw SchemaMismatch("interactions in " + xs_dir + " come from schema " + xs_manifest.schema_hash +
                         ", embeddings from " + hash_hex(e.schema_hash));
  }
  const EmbeddingTable* cards = e.find(kCardTable);
  const EmbeddingTable* merchants = e.find("merchant");
  if (!cards || !merchants) throw ValidationError("embeddings", "export needs card and merchant tables");
  const auto split = split_interactions(read_interactions(xs_dir + "/interactions.csv"), train_f, val_f);

  Run run("rec", a.out);
  const RecComparison r = compare_arms(*cards, *merchants, split, tc);
  write_text(run.out + "/rec.json", r.to_json().dump(2) + "\n");
  write_text(run.out + "/rec.csv", r.to_csv());

  ordered_json cfg = {{"tower", tc.to_json()}, {"train_fraction", train_f}, {"val_fraction", val_f}};
  run.manifest.config = cfg;
  run.manifest.seeds = {{"tower", tc.seed}};
  run.manifest.inputs["embeddings"] = emb_dir;
  run.manifest.inputs["interactions"] = xs_dir;
  run.manifest.schema_hash = hash_hex(e.schema_hash);
  run.finish();
  std::cout << std::left << std::setw(20) << "arm" << std::setw(6) << "k" << std::setw(10) << "hr" << "ndcg\n";
  for (auto [name, m] : {std::pair{"pretrained_frozen", &r.pretrained}, std::pair{"supervised_scratch", &r.scratch}}) {
    for (std::size_t i = 0; i < m->k.size(); ++i) {
      std::cout << std::setw(20) << name << std::setw(6) << m->k[i] << std::setw(10) << std::setprecision(4)
                << m->hr[i] << m->ndcg[i] << "\n";
    }
  }
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  std::string config, embeddings, out;
  std::optional<std::string> host;
  std::optional<int> port;
};

std::atomic<HttpServer*> g_server{nullptr};

extern "C" void on_signal(int) {
  if (HttpServer* s = g_server.load()) s->stop();
}

void cmd_serve(const ServeArgs& a) {
  json c = load_config(a.config, {"host", "port", "sample_cap", "default_sample", "cors_origin"});
  override_field(c, "host", a.host);
  override_field(c, "port", a.port);
  ServiceOptions opt;
  opt.sample_cap = field_or<std::int64_t>(c, "sample_cap", opt.sample_cap);
  opt.default_sample = field_or<std::int64_t>(c, "default_sample", opt.default_sample);
  opt.cors_origin = field_or<std::string>(c, "cors_origin", opt.cors_origin);
  const std::string host = field_or<std::string>(c, "host", "127.0.0.1");
  const int port = field_or<int>(c, "port", 8080);
  if (port < 0 || port > 65535) throw ValidationError("port", "must lie in [0, 65535]");
  if (opt.default_sample < 1 || opt.sample_cap < opt.default_sample) {
    throw ValidationError("sample_cap", "need 1 <= default_sample <= sample_cap");
  }

  const std::string dir = resolve_path(a.embeddings);
  EmbeddingExport e = load_export(dir);
  Metadata meta;
  if (fs::exists(fs::path(dir) / "ground_truth.json")) {
    meta = Metadata::from_ground_truth(read_ground_truth(dir + "/ground_truth.json"));
  }
  const std::uint64_t hash = e.schema_hash;
  EmbeddingService service(std::move(e), std::move(meta), opt);
  HttpServer server(service, host, port);

  Run run("serve", a.out.empty() ? dir + "/serve" : a.out);
  run.manifest.config = {{"host", host},
                         {"port", server.port()},
                         {"sample_cap", opt.sample_cap},
                         {"default_sample", opt.default_sample},
                         {"cors_origin", opt.cors_origin}};
  run.manifest.inputs["embeddings"] = dir;
  run.manifest.schema_hash = hash_hex(hash);
  run.finish();

  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "serving " << dir << " on http://" << host << ":" << server.port() << std::endl;
  server.wait();
  g_server = nullptr;
}

void print_error(const std::string& type, const std::string& message, const std::string& field = {}) {
  ordered_json err = {{"type", type}, {"message", message}};
  if (!field.empty()) err["field"] = field;
  std::cerr << ordered_json{{"error", err}}.dump() << std::endl;
}

}  // namespace

// ---------------------------------------------------------------------------

ordered_json RunManifest::to_json() const {
  return {{"command", command}, {"version", version},     {"config", config},       {"seeds", seeds},
          {"inputs", inputs},   {"outputs", outputs},     {"schema_hash", schema_hash},
          {"checksums", checksums}, {"started_at", started_at}, {"finished_at", finished_at}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.version = j.value("version", "");
    m.config = j.value("config", ordered_json::object());
    m.seeds = j.value("seeds", ordered_json::object());
    m.inputs = j.value("inputs", std::map<std::string, std::string>{});
    m.outputs = j.value("outputs", std::map<std::string, std::string>{});
    m.schema_hash = j.value("schema_hash", "");
    m.checksums = j.value("checksums", std::map<std::string, std::string>{});
    m.started_at = j.value("started_at", "");
    m.finished_at = j.value("finished_at", "");
  } catch (const json::exception& e) {
    throw ValidationError("manifest", e.what());
  }
  return m;
}

void RunManifest::write(const std::string& dir) const {
  write_text(dir + "/" + kManifestFile, to_json().dump(2) + "\n");
}

RunManifest RunManifest::read(const std::string& dir) {
  const std::string path = dir + "/" + kManifestFile;
  std::ifstream in(path);
  if (!in) throw ValidationError("manifest", "cannot read " + path);
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ValidationError("manifest", path + ": " + e.what());
  }
}

std::map<std::string, std::string> directory_checksums(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name == kManifestFile) continue;
    out[name] = hash_hex(file_checksum(entry.path().string()));
  }
  return out;
}

std::string resolve_path(const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  const char* root = std::getenv(kDataRootEnv);
  if (!root || !*root) return path;
  return (fs::path(root) / path).string();
}

int dispatch(const std::vector<std::string>& args) {
  std::vector<const char*> argv = {"txn-foundry"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data());
}

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Transaction foundation model toolkit", "txn-foundry"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.footer(std::string("Relative paths resolve against $") + kDataRootEnv + " when set.");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a synthetic transaction world");
  g->add_option("--config", gen.config, "World config file");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "World seed");
  g->add_option("--cards", gen.cards, "Number of cards");
  g->add_option("--merchants", gen.merchants, "Number of merchants");
  g->add_option("--cardinality-threshold", gen.threshold, "Vocabulary size above which an attribute is high-cardinality");

  CorpusArgs cor;
  auto* b = app.add_subcommand("build-corpus", "Fit vocabularies, split by time and window into shards");
  b->add_option("--config", cor.config, "Corpus config file");
  b->add_option("--data", cor.data, "Directory written by generate")->required();
  b->add_option("--out", cor.out, "Output directory")->required();
  b->add_option("--max-seq-len", cor.max_seq_len, "Window length");
  b->add_option("--train-months", cor.train_months, "Months before the training cutoff");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Pretrain the sequence model");
  t->add_option("--config", tr.config, "Config file with model and train sections");
  t->add_option("--data", tr.data, "Corpus directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--epochs", tr.epochs, "Training epochs");
  t->add_option("--batch-size", tr.batch_size, "Sequences per batch");
  t->add_option("--learning-rate", tr.learning_rate, "AdamW learning rate");
  t->add_option("--seed", tr.seed, "Seed for initialization and data order");
  t->add_option("--resume", tr.resume, "Continue from a last.ckpt");
  t->add_option("--extra-epochs", tr.extra_epochs, "Epochs to add when resuming")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a corpus partition");
  e->add_option("--config", ev.config, "Eval config file");
  e->add_option("--data", ev.data, "Corpus directory")->required();
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--partition", ev.partition, "train, val or test");
  e->add_option("--batch-size", ev.batch_size, "Sequences per batch");

  BenchArgs be;
  auto* n = app.add_subcommand("bench-negatives", "Memory benchmark of the negative sampling kernels");
  n->add_option("--config", be.config, "Benchmark config file");
  n->add_option("--out", be.out, "Output directory")->required();
  n->add_option("--seed", be.seed, "Input seed");

  ScalingArgs sc;
  auto* s = app.add_subcommand("scaling", "Train one model per scale point and compare");
  s->add_option("--config", sc.config, "Scaling config file");
  s->add_option("--out", sc.out, "Output directory")->required();
  s->add_option("--axis", sc.axis, "cards or hidden_dim");
  s->add_option("--points", sc.points, "Scale points")->delimiter(',');

  ExportArgs ex;
  auto* x = app.add_subcommand("export-embeddings", "Write embedding tables from a checkpoint");
  x->add_option("--config", ex.config, "Export config file");
  x->add_option("--data", ex.data, "Corpus directory")->required();
  x->add_option("--checkpoint", ex.checkpoint, "Checkpoint file")->required();
  x->add_option("--out", ex.out, "Output directory")->required();
  x->add_option("--batch-size", ex.batch_size, "Sequences per batch");

  RecArgs rc;
  auto* r = app.add_subcommand("rec", "Two-tower comparison of pretrained and scratch embeddings");
  r->add_option("--config", rc.config, "Rec config file");
  r->add_option("--embeddings", rc.embeddings, "Directory written by export-embeddings")->required();
  r->add_option("--interactions", rc.interactions, "Corpus directory holding interactions.csv")->required();
  r->add_option("--out", rc.out, "Output directory")->required();
  r->add_option("--k", rc.k, "Cutoffs")->delimiter(',');
  r->add_option("--epochs", rc.epochs, "Training epochs per arm");
  r->add_option("--seed", rc.seed, "Tower seed");

  ServeArgs sv;
  auto* v = app.add_subcommand("serve", "Serve embeddings over HTTP");
  v->add_option("--config", sv.config, "Serve config file");
  v->add_option("--embeddings", sv.embeddings, "Directory written by export-embeddings")->required();
  v->add_option("--host", sv.host, "Bind address");
  v->add_option("--port", sv.port, "Port; 0 picks a free one");
  v->add_option("--out", sv.out, "Manifest directory (default <embeddings>/serve)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (g->parsed()) cmd_generate(gen);
    else if (b->parsed()) cmd_build_corpus(cor);
    else if (t->parsed()) cmd_train(tr);
    else if (e->parsed()) cmd_eval(ev);
    else if (n->parsed()) cmd_bench(be);
    else if (s->parsed()) cmd_scaling(sc);
    else if (x->parsed()) cmd_export(ex);
    else if (r->parsed()) cmd_rec(rc);
    else if (v->parsed()) cmd_serve(sv);
  } catch (const ValidationError& err) {
    print_error("validation_error", err.what(), err.field());
    return 1;
  } catch (const SchemaMismatch& err) {
    print_error("schema_mismatch", err.what());
    return 1;
  } catch (const std::exception& err) {
    print_error("error", err.what());
    return 1;
  }
  return 0;
}

}  // namespace txnf
