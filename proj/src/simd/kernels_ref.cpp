// SPDX-License-Identifier: Apache-2.0
// Scalar reference kernels. Every SIMD variant is tested against these.
#include "kernels_impl.hpp"

namespace metrolab::simd::detail {
namespace {

template <class Real>
Real dot_ref(const Real* x, const Real* y, std::size_t n) {
  Real acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <class Real>
void axpy_ref(Real a, const Real* x, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class Real>
void scale_ref(Real a, Real* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

template <class Real>
Real sum_squares_ref(const Real* x, std::size_t n) {
  Real acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

}  // namespace

const KernelTable<float> scalar_f32{dot_ref<float>, axpy_ref<float>, scale_ref<float>,
                                    sum_squares_ref<float>};
const KernelTable<double> scalar_f64{dot_ref<double>, axpy_ref<double>, scale_ref<double>,
                                     sum_squares_ref<double>};

}  // namespace metrolab::simd::detail
