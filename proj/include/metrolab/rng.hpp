// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace metrolab {

// Deterministic random source. Draws are built from raw 64-bit engine output so
// results do not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller (no cached spare, so state is the engine only).
  double normal();

  /// Geometric on {1, 2, ...} with success probability p.
  std::uint64_t geometric(double p);

  std::string serialize() const;
  void deserialize(const std::string& state);

  /// Child stream derived from (seed, stream) by SplitMix64 mixing.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace metrolab
