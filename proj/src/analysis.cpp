// SPDX-License-Identifier: Apache-2.0
#include "metrolab/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "metrolab/errors.hpp"
#include "metrolab/objectives.hpp"
#include "metrolab/ops.hpp"

namespace metrolab {
namespace {

std::string num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <class Fn>
void for_each_batch(const std::vector<Seq2SeqExample>& examples, std::size_t batch_size, std::size_t seq_len,
                    std::size_t target_len, Fn&& fn) {
  if (batch_size == 0) throw ContractError("batch size must be positive");
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, examples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto [enc, target] = seq2seq_batch(examples, idx, seq_len, target_len);
    fn(enc, target);
  }
}

template <class Real>
std::vector<NamedTensor<Real>> main_parameters(const Model<Real>& model) {
  std::vector<NamedTensor<Real>> out;
  for (const auto& name : model.parameter_names()) {
    if (is_main_model_tensor(name)) out.push_back({name, model.parameter(name)});
  }
  return out;
}

void clear_grads(auto& params) {
  for (auto& p : params) {
    auto handle = p.tensor;
    handle.zero_grad();
  }
}

template <class Real>
std::size_t text_len(const Model<Real>& m) {
  return m.config().max_abs_positions;
}

}  // namespace

double LayerActivation::frequency(std::size_t neuron) const {
  return tokens ? static_cast<double>(active.at(neuron)) / static_cast<double>(tokens) : 0.0;
}

bool ActivationReport::under_activated(const LayerActivation& layer, std::size_t neuron) const {
  return layer.frequency(neuron) < 1.0 - threshold;
}

std::size_t ActivationReport::under_activated_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    for (std::size_t j = 0; j < l.active.size(); ++j) n += under_activated(l, j);
  }
  return n;
}

std::size_t ActivationReport::neuron_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.active.size();
  return n;
}

double ActivationReport::under_activated_percentage() const {
  const auto n = neuron_count();
  return n ? 100.0 * static_cast<double>(under_activated_count()) / static_cast<double>(n) : 0.0;
}

template <class Real>
ActivationReport census_activations(const Model<Real>& model, const std::vector<Seq2SeqExample>& examples,
                                    double threshold, std::size_t batch_size, std::size_t seq_len,
                                    std::size_t target_len) {
  if (model.config().activation != Activation::relu) {
    throw AnalysisUnsupportedError("activation census needs ReLU feed-forward blocks (model uses " +
                                   std::string(enum_name(model.config().activation)) + ")");
  }
  if (examples.empty()) throw ContractError("activation census needs at least one example");
  ActivationReport report;
  report.threshold = threshold;
  const ActivationObserver<Real> observer = [&report](const std::string& block, const Tensor<Real>& act,
                                                      std::span<const std::uint8_t> valid) {
    auto it = std::find_if(report.layers.begin(), report.layers.end(),
                           [&](const LayerActivation& l) { return l.layer == block; });
    const std::size_t width = act.dim(1);
    if (it == report.layers.end()) {
      report.layers.push_back({block, 0, std::vector<std::size_t>(width, 0)});
      it = report.layers.end() - 1;
    }
    const auto data = act.data();
    for (std::size_t r = 0; r < act.dim(0); ++r) {
      if (!valid[r]) continue;
      ++it->tokens;
      for (std::size_t j = 0; j < width; ++j) it->active[j] += data[r * width + j] > Real(0);
    }
  };
  NoGradScope<Real> no_grad;
  const ForwardPass<Real> pass{false, nullptr, &observer};
  for_each_batch(examples, batch_size, std::min(seq_len, text_len(model)), std::min(target_len, text_len(model)),
                 [&](const TokenBatch& enc, const TargetSpec& target) {
                   const Tensor<Real> memory = model.encode(enc, pass);
                   (void)model.decode(memory, enc, target.decoder_input, pass);
                 });
  return report;
}

std::string format_activation_csv(const ActivationReport& report) {
  std::ostringstream out;
  out << "layer,neuron,frequency\n";
  for (const auto& l : report.layers) {
    for (std::size_t j = 0; j < l.active.size(); ++j) out << l.layer << ',' << j << ',' << num(l.frequency(j)) << '\n';
  }
  return out.str();
}

std::array<double, SensitivityHistogram::kInnerBins + 1> SensitivityHistogram::edges() {
  std::array<double, kInnerBins + 1> e{};
  for (std::size_t i = 0; i <= kInnerBins; ++i) e[i] = std::pow(10.0, -12.0 + 0.5 * static_cast<double>(i));
  return e;
}

void SensitivityHistogram::add(double value) {
  static const auto e = edges();
  if (!(value >= e.front())) {
    ++counts.front();
    return;
  }
  if (value >= e.back()) {
    ++counts.back();
    return;
  }
  const auto bin = static_cast<std::size_t>(std::upper_bound(e.begin(), e.end(), value) - e.begin());
  ++counts[bin];
}

std::size_t SensitivityHistogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

SummaryStats summarize(std::vector<double> values) {
  SummaryStats s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.var = ss / n;
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * (n - 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  s.p50 = quantile(0.5);
  s.p90 = quantile(0.9);
  s.p99 = quantile(0.99);
  return s;
}

std::size_t SensitivityReport::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

SummaryStats SensitivityReport::overall() const {
  std::vector<double> all;
  all.reserve(parameter_count());
  for (const auto& t : tensors) all.insert(all.end(), t.values.begin(), t.values.end());
  return summarize(std::move(all));
}

template <class Real>
Tensor<Real> sample_loss(const Model<Real>& model, const std::vector<Seq2SeqExample>& examples,
                         std::size_t batch_size, std::size_t seq_len, std::size_t target_len) {
  if (examples.empty()) throw ContractError("sensitivity needs a non-empty sample");
  std::vector<Tensor<Real>> losses;
  for_each_batch(examples, batch_size, std::min(seq_len, text_len(model)), std::min(target_len, text_len(model)),
                 [&](const TokenBatch& enc, const TargetSpec& target) {
                   losses.push_back(seq2seq_loss(model, enc, target, ForwardPass<Real>{}));
                 });
  const std::vector<Real> weights(losses.size(), Real(1) / static_cast<Real>(losses.size()));
  return weighted_sum(std::span<const Tensor<Real>>(losses), std::span<const Real>(weights));
}

template <class Real>
SensitivityReport parameter_sensitivity(Model<Real>& model, const std::vector<Seq2SeqExample>& examples,
                                        SensitivityFormula formula, std::size_t batch_size) {
  if (examples.empty()) throw ContractError("sensitivity needs a non-empty sample");
  auto params = main_parameters(model);
  clear_grads(params);
  Tape<Real> tape;
  Tensor<Real> loss;
  {
    TapeScope<Real> scope(tape);
    loss = sample_loss(model, examples, batch_size);
  }
  tape.backward(loss);
  SensitivityReport report;
  report.formula = formula;
  report.loss = static_cast<double>(loss.item());
  double dot = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    const auto theta = p.tensor.data();
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) dot += static_cast<double>(theta[i]) * static_cast<double>(g[i]);
  }
  for (const auto& p : params) {
    TensorSensitivity ts{p.name, std::vector<double>(p.tensor.numel(), 0.0)};
    const auto theta = p.tensor.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = p.tensor.has_grad() ? static_cast<double>(p.tensor.grad()[i]) : 0.0;
      const double own = static_cast<double>(theta[i]) * g;
      ts.values[i] = formula == SensitivityFormula::taylor ? std::abs(own) : std::abs(dot - own);
      report.histogram.add(ts.values[i]);
    }
    report.tensors.push_back(std::move(ts));
  }
  clear_grads(params);
  return report;
}

std::string format_sensitivity_csv(const SensitivityReport& report) {
  std::ostringstream out;
  out << "tensor,mean,var,p50,p90,p99\n";
  auto row = [&out](const std::string& name, const SummaryStats& s) {
    out << name << ',' << num(s.mean) << ',' << num(s.var) << ',' << num(s.p50) << ',' << num(s.p90) << ','
        << num(s.p99) << '\n';
  };
  for (const auto& t : report.tensors) row(t.name, summarize(t.values));
  row("all", report.overall());
  return out.str();
}

template <class Real>
std::vector<ParameterIndex> sample_parameter_indices(const Model<Real>& model, std::size_t count, Rng& rng) {
  const auto params = main_parameters(model);
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : params) {
    offsets.push_back(total);
    total += p.tensor.numel();
  }
  if (count > total) throw ContractError("cannot sample more parameters than the model has");
  std::vector<std::size_t> chosen;
  std::vector<std::uint8_t> taken(total, 0);
  while (chosen.size() < count) {
    const auto k = static_cast<std::size_t>(rng.below(total));
    if (taken[k]) continue;
    taken[k] = 1;
    chosen.push_back(k);
  }
  std::vector<ParameterIndex> out;
  for (std::size_t k : chosen) {
    const auto t = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), k) - offsets.begin()) - 1;
    out.push_back({params[t].name, k - offsets[t]});
  }
  return out;
}

template <class Real>
std::vector<double> zero_out_oracle(Model<Real>& model, const std::vector<Seq2SeqExample>& examples,
                                    const std::vector<ParameterIndex>& indices, std::size_t batch_size) {
  NoGradScope<Real> no_grad;
  const double base = static_cast<double>(sample_loss(model, examples, batch_size).item());
  std::vector<double> out;
  out.reserve(indices.size());
  for (const auto& idx : indices) {
    auto values = model.parameter(idx.tensor).mutable_data();
    const Real saved = values[idx.offset];
    values[idx.offset] = Real(0);
    const double changed = static_cast<double>(sample_loss(model, examples, batch_size).item());
    values[idx.offset] = saved;
    out.push_back(std::abs(base - changed));
  }
  return out;
}

std::vector<double> lookup(const SensitivityReport& report, const std::vector<ParameterIndex>& indices) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (const auto& idx : indices) {
    auto it = std::find_if(report.tensors.begin(), report.tensors.end(),
                           [&](const TensorSensitivity& t) { return t.name == idx.tensor; });
    if (it == report.tensors.end()) throw ContractError("no sensitivity recorded for " + idx.tensor);
    out.push_back(it->values.at(idx.offset));
  }
  return out;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("spearman needs two equal-length series (n >= 2)");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

std::string compare_runs(const RunAnalysis& a, const RunAnalysis& b) {
  if (a.checkpoints.size() != b.checkpoints.size()) {
    throw ComparisonError("runs '" + a.label + "' and '" + b.label + "' have different checkpoint counts");
  }
  std::ostringstream out;
  out << "step," << a.label << "_under_pct," << b.label << "_under_pct,delta_under_pct," << a.label << "_sens_var,"
      << b.label << "_sens_var,delta_sens_var\n";
  for (std::size_t i = 0; i < a.checkpoints.size(); ++i) {
    const auto& x = a.checkpoints[i];
    const auto& y = b.checkpoints[i];
    if (x.step != y.step) {
      throw ComparisonError("checkpoint " + std::to_string(i) + " is step " + std::to_string(x.step) + " in '" +
                            a.label + "' but step " + std::to_string(y.step) + " in '" + b.label + "'");
    }
    if (x.neurons != y.neurons || x.parameters != y.parameters) {
      throw ComparisonError("model shapes differ at step " + std::to_string(x.step) + ": " +
                            std::to_string(x.neurons) + "/" + std::to_string(x.parameters) + " vs " +
                            std::to_string(y.neurons) + "/" + std::to_string(y.parameters) +
                            " (neurons/parameters)");
    }
    out << x.step << ',' << num(x.under_activated_percentage) << ',' << num(y.under_activated_percentage) << ','
        << num(y.under_activated_percentage - x.under_activated_percentage) << ',' << num(x.sensitivity_variance)
        << ',' << num(y.sensitivity_variance) << ',' << num(y.sensitivity_variance - x.sensitivity_variance) << '\n';
  }
  return out.str();
}

#define METROLAB_INSTANTIATE_ANALYSIS(Real)                                                                        \
  template ActivationReport census_activations<Real>(const Model<Real>&, const std::vector<Seq2SeqExample>&,      \
                                                     double, std::size_t, std::size_t, std::size_t);              \
  template Tensor<Real> sample_loss<Real>(const Model<Real>&, const std::vector<Seq2SeqExample>&, std::size_t,    \
                                          std::size_t, std::size_t);                                              \
  template SensitivityReport parameter_sensitivity<Real>(Model<Real>&, const std::vector<Seq2SeqExample>&,        \
                                                         SensitivityFormula, std::size_t);                        \
  template std::vector<ParameterIndex> sample_parameter_indices<Real>(const Model<Real>&, std::size_t, Rng&);     \
  template std::vector<double> zero_out_oracle<Real>(Model<Real>&, const std::vector<Seq2SeqExample>&,            \
                                                     const std::vector<ParameterIndex>&, std::size_t);

METROLAB_INSTANTIATE_ANALYSIS(float)
METROLAB_INSTANTIATE_ANALYSIS(double)

}  // namespace metrolab
