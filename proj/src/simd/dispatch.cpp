// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <string>

#include "kernels_impl.hpp"
#include "metrolab/errors.hpp"

namespace metrolab::simd {
namespace {

Isa initial_isa() {
  const char* env = std::getenv("METROLAB_SIMD");
  if (env == nullptr || std::string_view(env).empty() || std::string_view(env) == "auto") {
    return best_isa();
  }
  const Isa requested = parse_isa(env);
  return isa_supported(requested) ? requested : Isa::scalar;
}

std::atomic<Isa>& active_slot() {
  static std::atomic<Isa> slot{initial_isa()};
  return slot;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  if (name == "neon") return Isa::neon;
  throw ConfigError("unknown SIMD instruction set '" + std::string(name) +
                    "' (expected scalar, avx2 or neon)");
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::scalar: return true;
    case Isa::avx2:
#if defined(METROLAB_HAVE_AVX2)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
#if defined(METROLAB_HAVE_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

Isa best_isa() {
  if (isa_supported(Isa::avx2)) return Isa::avx2;
  if (isa_supported(Isa::neon)) return Isa::neon;
  return Isa::scalar;
}

Isa active_isa() { return active_slot().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw ContractError("instruction set '" + std::string(isa_name(isa)) +
                        "' is not available on this CPU/build");
  }
  active_slot().store(isa, std::memory_order_relaxed);
}

template <>
const KernelTable<float>& table<float>(Isa isa) {
  switch (isa) {
#if defined(METROLAB_HAVE_AVX2)
    case Isa::avx2: return detail::avx2_f32;
#endif
#if defined(METROLAB_HAVE_NEON)
    case Isa::neon: return detail::neon_f32;
#endif
    default: return detail::scalar_f32;
  }
}

template <>
const KernelTable<double>& table<double>(Isa isa) {
  switch (isa) {
#if defined(METROLAB_HAVE_AVX2)
    case Isa::avx2: return detail::avx2_f64;
#endif
#if defined(METROLAB_HAVE_NEON)
    case Isa::neon: return detail::neon_f64;
#endif
    default: return detail::scalar_f64;
  }
}

template <class Real>
const KernelTable<Real>& active() {
  return table<Real>(active_isa());
}

template const KernelTable<float>& active<float>();
template const KernelTable<double>& active<double>();

}  // namespace metrolab::simd
