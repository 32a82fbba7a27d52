// SPDX-License-Identifier: Apache-2.0
//
// Vector kernels behind every dense inner loop. Each instruction set provides the
// same table; the active one is picked at startup from CPU features and the
// METROLAB_SIMD environment variable (scalar | avx2 | neon | auto).
#pragma once

#include <cstddef>
#include <string_view>

namespace metrolab::simd {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);
Isa parse_isa(std::string_view name);

template <class Real>
struct KernelTable {
  Real (*dot)(const Real* x, const Real* y, std::size_t n);
  // y += a * x
  void (*axpy)(Real a, const Real* x, Real* y, std::size_t n);
  void (*scale)(Real a, Real* x, std::size_t n);
  Real (*sum_squares)(const Real* x, std::size_t n);
};

bool isa_supported(Isa isa);
Isa best_isa();
Isa active_isa();
/// Throws ContractError when the CPU (or build) lacks the requested ISA.
void set_active_isa(Isa isa);

template <class Real>
const KernelTable<Real>& table(Isa isa);

template <class Real>
const KernelTable<Real>& active();

/// Restores the previously active ISA on scope exit.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()) { set_active_isa(isa); }
  ~ScopedIsa() { set_active_isa(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

}  // namespace metrolab::simd
