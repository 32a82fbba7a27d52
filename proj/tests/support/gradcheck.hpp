// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle. Kept separate from the library so the
// analytic gradients it checks share no code path with it beyond the forward pass.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "metrolab/tensor.hpp"

namespace metrolab::testing {

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failed = 0;
  /// Entries whose larger magnitude fell below the absolute floor.
  std::size_t below_floor = 0;
  double max_rel_error = 0;
  std::vector<std::string> failures;

  double pass_fraction() const {
    return checked ? 1.0 - double(failed) / double(checked) : 1.0;
  }
};

using NamedParams = std::vector<std::pair<std::string, Tensor<double>>>;

/// loss() must build the full forward pass from the current parameter values and
/// return a scalar. Analytic gradients come from one recorded pass; numeric ones
/// perturb each entry by ±h in place and restore it.
inline GradCheckReport check_gradients(NamedParams params, const std::function<Tensor<double>()>& loss,
                                       double h = 1e-5, double rel_tol = 1e-3,
                                       double abs_floor = 1e-8, std::size_t stride = 1) {
  for (auto& [name, p] : params) p.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> value = loss();
    tape.backward(value);
  }
  GradCheckReport report;
  for (auto& [name, p] : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double magnitude = std::max(std::abs(numeric), std::abs(analytic[i]));
      ++report.checked;
      if (magnitude < abs_floor) {
        ++report.below_floor;
        continue;
      }
      const double rel = std::abs(numeric - analytic[i]) / magnitude;
      report.max_rel_error = std::max(report.max_rel_error, rel);
      if (rel >= rel_tol) {
        ++report.failed;
        if (report.failures.size() < 20) {
          report.failures.push_back(name + "[" + std::to_string(i) + "] analytic=" +
                                    std::to_string(analytic[i]) + " numeric=" + std::to_string(numeric));
        }
      }
    }
  }
  return report;
}

template <class Real>
Tensor<Real> random_tensor(Shape shape, unsigned seed, double scale = 1.0, bool requires_grad = true) {
  std::vector<Real> values(shape_numel(shape));
  std::uint64_t state = seed * 0x9E3779B97F4A7C15ULL + 1;
  for (Real& v : values) {
    state ^= state << 13;
    state ^= state >> 7;
    state ^= state << 17;
    v = static_cast<Real>(scale * (double(state >> 11) * 0x1.0p-53 * 2.0 - 1.0));
  }
  return Tensor<Real>(std::move(shape), std::move(values), requires_grad);
}

}  // namespace metrolab::testing
