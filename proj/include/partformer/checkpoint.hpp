#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "partformer/model.hpp"

namespace pf {

// Binary named-tensor container ("PFCK"): little-endian, length-prefixed
// names, one dtype tag per tensor. Used for both model checkpoints and
// extracted feature files.
enum class DType : std::uint8_t { kF64 = 0, kF32 = 1, kI64 = 2 };

struct NamedTensor {
  std::string name;
  DType dtype = DType::kF64;
  Shape shape;
  std::vector<double> f64;        // kF64 / kF32 payloads (f32 widened on load)
  std::vector<std::int64_t> i64;  // kI64 payload
};

struct Container {
  std::uint32_t version = 1;
  std::string config_text;
  std::uint64_t step = 0;
  std::vector<NamedTensor> tensors;

  const NamedTensor& at(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);  // throws DataError

// Checkpoint = container holding every ParamStore tensor as f64.
void save_checkpoint(const std::string& path, const std::string& config_text,
                     std::uint64_t step, const ParamStore& params);
// Copies payloads into an existing store; every store tensor must be present
// with an exactly matching shape (throws ConfigError otherwise).
void load_checkpoint_into(const Container& c, ParamStore& params);

}  // namespace pf
