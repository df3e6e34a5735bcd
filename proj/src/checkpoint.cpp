#include "txnf/checkpoint.hpp"

#include <bit>

#include "txnf/binio.hpp"
#include "txnf/error.hpp"

namespace txnf {

namespace {

constexpr char kMagic[] = "TXNFCKPT";

void put_tensor(BinaryWriter& w, const NamedTensor& t, bool half) {
  w.put_string(t.name);
  w.put(static_cast<std::uint32_t>(t.value.rows()));
  w.put(static_cast<std::uint32_t>(t.value.cols()));
  if (half) {
    std::vector<std::uint16_t> h(static_cast<std::size_t>(t.value.size()));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = float_to_half(t.value.data()[i]);
    w.put_array(h.data(), h.size());
  } else {
    w.put_array(t.value.data(), static_cast<std::size_t>(t.value.size()));
  }
}

NamedTensor get_tensor(BinaryReader& r, bool half) {
  NamedTensor t;
  t.name = r.get_string();
  const auto rows = r.get<std::uint32_t>(), cols = r.get<std::uint32_t>();
  t.value.resize(rows, cols);
  if (half) {
    std::vector<std::uint16_t> h(static_cast<std::size_t>(rows) * cols);
    r.get_array(h.data(), h.size());
    for (std::size_t i = 0; i < h.size(); ++i) t.value.data()[i] = half_to_float(h[i]);
  } else {
    r.get_array(t.value.data(), static_cast<std::size_t>(t.value.size()));
  }
  return t;
}

}  // namespace

std::uint16_t float_to_half(float f) { return std::bit_cast<std::uint16_t>(Eigen::half(f)); }

float half_to_float(std::uint16_t h) { return static_cast<float>(std::bit_cast<Eigen::half>(h)); }

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : params) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const bool half = (ckpt.flags & Checkpoint::kHalfPrecision) != 0;
  std::uint32_t flags = ckpt.flags & Checkpoint::kHalfPrecision;
  if (!ckpt.optimizer.empty()) flags |= Checkpoint::kOptimizerState;
  BinaryWriter w(path);
  w.put_bytes(std::string(kMagic, 8));
  w.put(Checkpoint::kVersion);
  w.put(flags);
  w.put(ckpt.schema_hash);
  w.put_string(ckpt.meta.dump());
  w.put(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& t : ckpt.params) put_tensor(w, t, half);
  if (flags & Checkpoint::kOptimizerState) {
    w.put(static_cast<std::uint32_t>(ckpt.optimizer.size()));
    for (const auto& t : ckpt.optimizer) put_tensor(w, t, false);
  }
  w.close();
}

Checkpoint load_checkpoint(const std::string& path) {
  BinaryReader r(path);
  if (r.get_bytes(8) != std::string(kMagic, 8)) throw Error(path + ": not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw Error(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.flags = r.get<std::uint32_t>();
  c.schema_hash = r.get<std::uint64_t>();
  c.meta = nlohmann::json::parse(r.get_string());
  const bool half = (c.flags & Checkpoint::kHalfPrecision) != 0;
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) c.params.push_back(get_tensor(r, half));
  if (c.flags & Checkpoint::kOptimizerState) {
    const auto m = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < m; ++i) c.optimizer.push_back(get_tensor(r, false));
  }
  return c;
}

Checkpoint make_checkpoint(const Model<float>& model) {
  Checkpoint c;
  c.schema_hash = model.schema().hash();
  c.meta = {{"model", model.config().to_json()}, {"schema", model.schema().to_json()}};
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    c.params.push_back({model.params()[i].name, model.params()[i].value});
  }
  return c;
}

Model<float> restore_model(const Checkpoint& ckpt) {
  Schema schema = Schema::from_json(ckpt.meta.at("schema"));
  if (schema.hash() != ckpt.schema_hash) throw SchemaMismatch("checkpoint schema does not match its recorded hash");
  Model<float> model(std::move(schema), ModelConfig::from_json(ckpt.meta.at("model")));
  load_parameters(ckpt, model);
  return model;
}

void load_parameters(const Checkpoint& ckpt, Model<float>& model) {
  if (ckpt.schema_hash != model.schema().hash()) throw SchemaMismatch("checkpoint was written for another schema");
  if (ckpt.params.size() != model.params().size()) throw Error("checkpoint parameter count differs from the model");
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto& p = model.params()[i];
    const NamedTensor* t = ckpt.find(p.name);
    if (!t || t->value.rows() != p.value.rows() || t->value.cols() != p.value.cols()) {
      throw Error("checkpoint tensor missing or misshapen: " + p.name);
    }
    p.value = t->value;
  }
}

}  // namespace txnf
