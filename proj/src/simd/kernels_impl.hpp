// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "metrolab/simd/kernels.hpp"

namespace metrolab::simd::detail {

extern const KernelTable<float> scalar_f32;
extern const KernelTable<double> scalar_f64;

#if defined(METROLAB_HAVE_AVX2)
extern const KernelTable<float> avx2_f32;
extern const KernelTable<double> avx2_f64;
#endif

#if defined(METROLAB_HAVE_NEON)
extern const KernelTable<float> neon_f32;
extern const KernelTable<double> neon_f64;
#endif

}  // namespace metrolab::simd::detail
