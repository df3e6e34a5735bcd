#pragma once

// Checkpoint files.
//
//   magic "TXNFCKPT" | u32 version | u32 flags | u64 schema hash |
//   string meta (JSON: model config, schema, trainer state) |
//   u32 tensor count | tensors...
//   tensor: string name | u32 rows | u32 cols | f32 or f16 data (row-major)
//
// Strings are u32 length + bytes. Flag bit 0: parameter tensors stored as
// 16-bit floats. Flag bit 1: optimizer moments present (always 32-bit).

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnf/autodiff.hpp"
#include "txnf/model.hpp"

namespace txnf {

struct NamedTensor {
  std::string name;
  Mat<float> value;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::uint32_t kHalfPrecision = 1;
  static constexpr std::uint32_t kOptimizerState = 2;

  std::uint32_t flags = 0;
  std::uint64_t schema_hash = 0;
  nlohmann::json meta;
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> optimizer;  // "m/<param>", "v/<param>"

  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of a model's parameters, config and schema.
Checkpoint make_checkpoint(const Model<float>& model);
/// Rebuilds the model a checkpoint describes.
Model<float> restore_model(const Checkpoint& ckpt);
/// Copies checkpoint tensors into an existing model of the same shape.
void load_parameters(const Checkpoint& ckpt, Model<float>& model);

/// Round-to-nearest-even IEEE binary16 conversion.
std::uint16_t float_to_half(float f);
float half_to_float(std::uint16_t h);

}  // namespace txnf
