// SPDX-License-Identifier: Apache-2.0
//
// Under-activated neuron census and first-order parameter sensitivity.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "metrolab/model.hpp"
#include "metrolab/trainer.hpp"

namespace metrolab {

inline constexpr double kDefaultCensusThreshold = 0.995;

struct LayerActivation {
  std::string layer;              // e.g. "enc.layer0.ffn"
  std::size_t tokens = 0;         // non-PAD rows observed
  std::vector<std::size_t> active;  // per neuron: rows with post-ReLU value > 0
  double frequency(std::size_t neuron) const;
};

struct ActivationReport {
  double threshold = kDefaultCensusThreshold;
  std::vector<LayerActivation> layers;

  /// A neuron is under-activated iff its frequency is below 1 − threshold.
  bool under_activated(const LayerActivation& layer, std::size_t neuron) const;
  std::size_t under_activated_count() const;
  std::size_t neuron_count() const;
  double under_activated_percentage() const;
};

/// Runs encoder and decoder (teacher-forced on the targets) over the examples and
/// counts, per feed-forward neuron, the non-PAD tokens where its ReLU output is
/// strictly positive. GELU models raise AnalysisUnsupportedError.
template <class Real>
ActivationReport census_activations(const Model<Real>& model, const std::vector<Seq2SeqExample>& examples,
                                    double threshold = kDefaultCensusThreshold, std::size_t batch_size = 16,
                                    std::size_t seq_len = 64, std::size_t target_len = 32);

/// `layer,neuron,frequency`
std::string format_activation_csv(const ActivationReport& report);

enum class SensitivityFormula {
  taylor,   // |θ_j g_j|
  printed,  // |θ_{−j}ᵀ g|, θ with entry j zeroed, over all analysed parameters
};

/// Fixed log-spaced bins from 1e-12 to 1e2 (two per decade) plus an underflow bin
/// (values below 1e-12, zeros included) and an overflow bin (≥ 1e2).
struct SensitivityHistogram {
  static constexpr std::size_t kInnerBins = 28;
  static std::array<double, kInnerBins + 1> edges();
  std::array<std::size_t, kInnerBins + 2> counts{};  // [underflow, inner..., overflow]
  void add(double value);
  std::size_t total() const;
};

struct TensorSensitivity {
  std::string name;
  std::vector<double> values;
};

struct SummaryStats {
  double mean = 0, var = 0, p50 = 0, p90 = 0, p99 = 0;
};

SummaryStats summarize(std::vector<double> values);

struct SensitivityReport {
  SensitivityFormula formula = SensitivityFormula::taylor;
  double loss = 0.0;
  std::vector<TensorSensitivity> tensors;
  SensitivityHistogram histogram;
  std::size_t parameter_count() const;
  SummaryStats overall() const;
};

/// Mean teacher-forced cross-entropy of the main model over the examples, in
/// consecutive batches; each batch weighs equally.
template <class Real>
Tensor<Real> sample_loss(const Model<Real>& model, const std::vector<Seq2SeqExample>& examples,
                         std::size_t batch_size = 16, std::size_t seq_len = 64, std::size_t target_len = 32);

/// I_j for every main-model parameter (auxiliary and RTD tensors excluded). An empty
/// sample raises ContractError. Parameters are left untouched.
template <class Real>
SensitivityReport parameter_sensitivity(Model<Real>& model, const std::vector<Seq2SeqExample>& examples,
                                        SensitivityFormula formula = SensitivityFormula::taylor,
                                        std::size_t batch_size = 16);

/// `tensor,mean,var,p50,p90,p99`, one row per tensor and a final "all" row.
std::string format_sensitivity_csv(const SensitivityReport& report);

struct ParameterIndex {
  std::string tensor;
  std::size_t offset = 0;
};

/// Uniform sample without replacement over scalar main-model parameters.
template <class Real>
std::vector<ParameterIndex> sample_parameter_indices(const Model<Real>& model, std::size_t count, Rng& rng);

/// |L(θ) − L(θ with entry j zeroed)| for each index, one forward pass each; every
/// entry is restored before the next.
template <class Real>
std::vector<double> zero_out_oracle(Model<Real>& model, const std::vector<Seq2SeqExample>& examples,
                                    const std::vector<ParameterIndex>& indices, std::size_t batch_size = 16);

/// Looks up I_j for the given indices in a report.
std::vector<double> lookup(const SensitivityReport& report, const std::vector<ParameterIndex>& indices);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

struct CheckpointAnalysis {
  std::uint64_t step = 0;
  std::size_t neurons = 0;
  std::size_t parameters = 0;
  double under_activated_percentage = 0.0;
  double sensitivity_variance = 0.0;
};

struct RunAnalysis {
  std::string label;
  std::vector<CheckpointAnalysis> checkpoints;
};

/// Side-by-side table `step,<a>_under_pct,<b>_under_pct,delta_under_pct,
/// <a>_sens_var,<b>_sens_var,delta_sens_var` (delta = b − a). Differing step lists or
/// model shapes raise ComparisonError.
std::string compare_runs(const RunAnalysis& a, const RunAnalysis& b);

}  // namespace metrolab
