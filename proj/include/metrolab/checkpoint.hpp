// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "metrolab/types.hpp"

namespace metrolab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

/// Values are held as double in memory; dtype selects the on-disk width.
struct NamedArray {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<NamedArray> tensors;

  const NamedArray* find(const std::string& name) const;
};

/// Layout: "METROLAB", u32 version, u64-length-prefixed config text, u64 step,
/// length-prefixed rng state, u64 tensor count, then per tensor: name, u32 rank,
/// u64 extents, u8 dtype, little-endian values.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace metrolab
