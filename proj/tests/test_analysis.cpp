// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <map>
#include <numeric>

#include "doctest.h"
#include "metrolab/analysis.hpp"
#include "metrolab/errors.hpp"
#include "support/micro.hpp"

using namespace metrolab;
using metrolab::testing::micro_config;
using metrolab::testing::random_batch;

namespace {

std::vector<Seq2SeqExample> random_examples(std::size_t count, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> in_lens, out_lens;
  for (std::size_t i = 0; i < count; ++i) {
    in_lens.push_back(3 + rng.below(8));
    out_lens.push_back(2 + rng.below(5));
  }
  const auto in = random_batch(in_lens, vocab, seed + 1);
  const auto out = random_batch(out_lens, vocab, seed + 2);
  std::vector<Seq2SeqExample> examples;
  for (std::size_t i = 0; i < count; ++i) {
    const auto a = in.row(i);
    const auto b = out.row(i);
    examples.push_back({TokenSeq(a.begin(), a.end()), TokenSeq(b.begin(), b.end())});
  }
  return examples;
}

template <class Real>
Model<Real> micro_model(std::uint64_t seed = 5, double init_std = 0.3, Activation act = Activation::relu) {
  ModelConfig c = micro_config();
  c.init_std = init_std;
  c.activation = act;
  return Model<Real>(c, seed);
}

template <class Real>
std::map<std::string, std::vector<Real>> snapshot(const Model<Real>& m) {
  std::map<std::string, std::vector<Real>> out;
  for (const auto& n : m.parameter_names()) {
    const auto d = m.parameter(n).data();
    out[n].assign(d.begin(), d.end());
  }
  return out;
}

}  // namespace

TEST_CASE("a neuron with an always-negative pre-activation is reported dead") {
  auto model = micro_model<double>();
  const std::string layer = "enc.layer1.ffn";
  REQUIRE(model.has_parameter(layer + ".in.weight"));
  auto w = model.parameter(layer + ".in.weight").mutable_data();
  const std::size_t dff = model.config().d_ff;
  for (std::size_t r = 0; r < model.config().d_model; ++r) w[r * dff + 3] = 0.0;
  model.parameter(layer + ".in.bias").mutable_data()[3] = -1.0;

  const auto report = census_activations(model, random_examples(12, 37, 1), 0.995, 4, 16, 8);
  const auto it = std::find_if(report.layers.begin(), report.layers.end(),
                               [&](const LayerActivation& l) { return l.layer == layer; });
  REQUIRE(it != report.layers.end());
  CHECK(it->frequency(3) == 0.0);
  CHECK(report.under_activated(*it, 3));
  CHECK(report.under_activated_count() >= 1);
  for (const auto& l : report.layers) {
    for (std::size_t j = 0; j < l.active.size(); ++j) {
      CHECK(l.frequency(j) >= 0.0);
      CHECK(l.frequency(j) <= 1.0);
    }
  }
}

TEST_CASE("census equals a brute-force recount") {
  const auto model = micro_model<double>(9);
  const auto examples = random_examples(16, 37, 2);
  const auto report = census_activations(model, examples, 0.995, 16, 16, 8);

  // Independent pass over the same batch: record every activation row and decide
  // validity from the token ids themselves.
  std::vector<std::size_t> idx(examples.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto [enc, target] = seq2seq_batch(examples, idx, 16, 8);
  std::map<std::string, std::pair<std::size_t, std::vector<std::size_t>>> brute;
  std::size_t total_tokens = 0;
  const ActivationObserver<double> observer = [&](const std::string& block, const Tensor<double>& act,
                                                  std::span<const std::uint8_t>) {
    const TokenBatch& ids = block.rfind("enc", 0) == 0 ? enc : target.decoder_input;
    auto& [tokens, active] = brute[block];
    active.resize(act.dim(1), 0);
    const auto data = act.data();
    for (std::size_t r = 0; r < act.dim(0); ++r) {
      if (ids.ids[r] == kPad) continue;
      ++tokens;
      ++total_tokens;
      for (std::size_t j = 0; j < act.dim(1); ++j) {
        if (data[r * act.dim(1) + j] > 0.0) ++active[j];
      }
    }
  };
  const ForwardPass<double> pass{false, nullptr, &observer};
  model.decode(model.encode(enc, pass), enc, target.decoder_input, pass);
  CHECK(total_tokens >= 100);
  REQUIRE(brute.size() == report.layers.size());
  for (const auto& l : report.layers) {
    REQUIRE(brute.count(l.layer) == 1);
    CHECK(l.tokens == brute[l.layer].first);
    CHECK(l.active == brute[l.layer].second);
  }
}

TEST_CASE("census threshold boundaries and unsupported activations") {
  const auto model = micro_model<double>();
  const auto examples = random_examples(8, 37, 3);
  CHECK(census_activations(model, examples, 1.0).under_activated_count() == 0);
  const auto all = census_activations(model, examples, 0.0);
  std::size_t below_one = 0;
  for (const auto& l : all.layers) {
    for (std::size_t j = 0; j < l.active.size(); ++j) below_one += l.frequency(j) < 1.0;
  }
  CHECK(all.under_activated_count() == below_one);
  CHECK(all.neuron_count() == 4 * model.config().d_ff);

  ModelConfig c = micro_config();
  c.activation = Activation::gelu;
  const Model<double> gelu_model(c, 1);
  CHECK_THROWS_AS(census_activations(gelu_model, examples), AnalysisUnsupportedError);

  const auto csv = format_activation_csv(all);
  CHECK(csv.rfind("layer,neuron,frequency\n", 0) == 0);
}

TEST_CASE("sensitivity is zero for zero parameters and never mutates the model") {
  auto model = micro_model<double>();
  model.parameter("enc.layer0.ffn.in.weight").mutable_data()[5] = 0.0;
  const auto before = snapshot(model);
  const auto examples = random_examples(8, 37, 4);
  const auto report = parameter_sensitivity(model, examples);
  CHECK(snapshot(model) == before);
  for (const auto& n : model.parameter_names()) CHECK_FALSE(model.parameter(n).has_grad());
  CHECK(lookup(report, {{"enc.layer0.ffn.in.weight", 5}})[0] == 0.0);
  for (const auto& t : report.tensors) {
    CHECK(is_main_model_tensor(t.name));
    for (double v : t.values) CHECK(v >= 0.0);
  }
  CHECK(report.histogram.total() == report.parameter_count());
  CHECK_THROWS_AS(parameter_sensitivity(model, {}), ContractError);
  CHECK(format_sensitivity_csv(report).rfind("tensor,mean,var,p50,p90,p99\n", 0) == 0);
}

TEST_CASE("sensitivity is linear in the parameter for a fixed gradient") {
  // clm.bias enters the loss linearly through the logits, so its gradient depends
  // on the bias only through the softmax; a tiny bias keeps g_j essentially fixed.
  auto model = micro_model<double>();
  const auto examples = random_examples(8, 37, 5);
  auto bias = model.parameter("clm.bias").mutable_data();
  bias[10] = 1e-6;
  const double a = lookup(parameter_sensitivity(model, examples), {{"clm.bias", 10}})[0];
  bias[10] = 2e-6;
  const double b = lookup(parameter_sensitivity(model, examples), {{"clm.bias", 10}})[0];
  CHECK(b / a == doctest::Approx(2.0).epsilon(1e-4));
}

TEST_CASE("zero-out oracle restores parameters and handles constructed cases") {
  auto model = micro_model<double>();
  const auto examples = random_examples(8, 37, 6);
  const double before = sample_loss(model, examples).item();
  model.parameter("dec.layer0.ffn.in.bias").mutable_data()[2] = 0.0;
  const double with_zero = sample_loss(model, examples).item();
  const auto snap = snapshot(model);
  const auto deltas = zero_out_oracle(model, examples, {{"dec.layer0.ffn.in.bias", 2}, {"embed.tokens", 40}});
  CHECK(deltas[0] == 0.0);
  CHECK(deltas[1] > 0.0);
  CHECK(snapshot(model) == snap);
  CHECK(sample_loss(model, examples).item() == with_zero);
  (void)before;

  // Zeroing every bias entry of the output head: the delta is the difference of
  // two directly computed losses.
  std::vector<ParameterIndex> head;
  auto b = model.parameter("clm.bias").mutable_data();
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.01 * static_cast<double>(i % 7);
  const double full = sample_loss(model, examples).item();
  const std::vector<double> saved(b.begin(), b.end());
  std::fill(b.begin(), b.end(), 0.0);
  const double zeroed = sample_loss(model, examples).item();
  std::copy(saved.begin(), saved.end(), b.begin());
  const auto one = zero_out_oracle(model, examples, {{"clm.bias", 3}});
  b[3] = 0.0;
  const double direct = sample_loss(model, examples).item();
  b[3] = saved[3];
  CHECK(one[0] == std::abs(full - direct));
  CHECK(zeroed != full);
}

TEST_CASE("first-order sensitivity ranks parameters like exact zero-out") {
  auto model = micro_model<double>(21, 0.1);
  const auto examples = random_examples(16, 37, 7);
  Rng rng(8);
  const auto indices = sample_parameter_indices(model, 200, rng);
  const auto report = parameter_sensitivity(model, examples);
  const auto approx = lookup(report, indices);
  const auto exact = zero_out_oracle(model, examples, indices);
  const double rho = spearman(approx, exact);
  MESSAGE("spearman = " << rho);
  CHECK(rho >= 0.9);
}

TEST_CASE("first-order error shrinks quadratically with the parameter") {
  // GELU keeps the loss smooth in every parameter; ReLU kinks break the expansion.
  auto model = micro_model<double>(23, 0.3, Activation::gelu);
  const auto examples = random_examples(8, 37, 9);
  std::size_t checked = 0;
  for (const ParameterIndex idx :
       {ParameterIndex{"enc.layer0.ffn.in.weight", 7}, ParameterIndex{"dec.layer1.ffn.out.weight", 4},
        ParameterIndex{"embed.tokens", 60}, ParameterIndex{"enc.layer1.self.q.weight", 11},
        ParameterIndex{"dec.layer0.cross.v.weight", 9}}) {
    REQUIRE(model.has_parameter(idx.tensor));
    auto values = model.parameter(idx.tensor).mutable_data();
    const double theta = values[idx.offset];
    std::vector<double> error;
    const std::vector<double> scales{1.0, 0.5, 0.25, 0.125};
    for (double s : scales) {
      values[idx.offset] = s * theta;
      const double i = lookup(parameter_sensitivity(model, examples), {idx})[0];
      const double d = zero_out_oracle(model, examples, {idx})[0];
      error.push_back(std::abs(i - d));
    }
    values[idx.offset] = theta;
    if (error[1] < 1e-9) continue;
    ++checked;
    // C fitted at half scale bounds the smaller scales; halving θ_j roughly quarters the error
    // (a first-order error would halve, a third-order one drop eightfold).
    const double c = error[1] / (0.25 * theta * theta);
    MESSAGE(idx.tensor << "[" << idx.offset << "] C=" << c << " ratios " << error[1] / error[2] << " "
                       << error[2] / error[3]);
    for (std::size_t k = 2; k < scales.size(); ++k) CHECK(error[k] <= 1.5 * c * std::pow(scales[k] * theta, 2));
    CHECK(error[2] / error[3] >= 3.0);
    CHECK(error[2] / error[3] <= 6.0);
  }
  CHECK(checked >= 4);
}

TEST_CASE("printed formula subtracts the own term from the full dot product") {
  auto model = micro_model<double>();
  const auto examples = random_examples(8, 37, 10);
  const auto taylor = parameter_sensitivity(model, examples, SensitivityFormula::taylor);
  const auto printed = parameter_sensitivity(model, examples, SensitivityFormula::printed);
  REQUIRE(taylor.tensors.size() == printed.tensors.size());
  // printed_j = |D − t_j s_j| with the same D for every j, where s_j is the sign of θ_j g_j.
  const ParameterIndex a{"clm.bias", 12}, b{"enc.layer0.ffn.out.weight", 3};
  const double pa = lookup(printed, {a})[0], pb = lookup(printed, {b})[0];
  const double ta = lookup(taylor, {a})[0], tb = lookup(taylor, {b})[0];
  bool consistent = false;
  for (double sa : {-1.0, 1.0}) {
    for (double sb : {-1.0, 1.0}) {
      for (double da : {-1.0, 1.0}) {
        for (double db : {-1.0, 1.0}) {
          const double Da = da * pa + sa * ta, Db = db * pb + sb * tb;
          consistent = consistent || std::abs(Da - Db) < 1e-9;
        }
      }
    }
  }
  CHECK(consistent);
}

TEST_CASE("spearman uses average ranks") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> y{10, 20, 30, 40, 50};
  const std::vector<double> r{5, 4, 3, 2, 1};
  CHECK(spearman(x, y) == doctest::Approx(1.0));
  CHECK(spearman(x, r) == doctest::Approx(-1.0));
  // Ties: ranks of {1, 1, 2} are {1.5, 1.5, 3}.
  const std::vector<double> t{1, 1, 2};
  const std::vector<double> u{1, 2, 3};
  CHECK(spearman(t, u) == doctest::Approx(std::sqrt(3.0) / 2.0));
  CHECK_THROWS_AS(spearman(x, t), ContractError);
}

TEST_CASE("histogram bins and summary statistics") {
  SensitivityHistogram h;
  h.add(0.0);
  h.add(1e-13);
  h.add(1e-12);
  h.add(5e-1);
  h.add(1e2);
  h.add(1e5);
  CHECK(h.counts.front() == 2);
  CHECK(h.counts[1] == 1);
  CHECK(h.counts.back() == 2);
  CHECK(h.total() == 6);
  const auto e = SensitivityHistogram::edges();
  CHECK(e.front() == doctest::Approx(1e-12));
  CHECK(e.back() == doctest::Approx(1e2));
  const auto s = summarize({1, 2, 3, 4});
  CHECK(s.mean == 2.5);
  CHECK(s.var == 1.25);
  CHECK(s.p50 == 2.5);
}

TEST_CASE("compare_runs tabulates deltas and rejects mismatches") {
  RunAnalysis a{"metro", {{100, 50, 1000, 10.0, 0.5}, {200, 50, 1000, 12.0, 0.25}}};
  const auto same = compare_runs(a, a);
  CHECK(same ==
        "step,metro_under_pct,metro_under_pct,delta_under_pct,metro_sens_var,metro_sens_var,delta_sens_var\n"
        "100,10,10,0,0.5,0.5,0\n"
        "200,12,12,0,0.25,0.25,0\n");
  RunAnalysis b{"t5", {{100, 50, 1000, 20.0, 1.5}, {200, 50, 1000, 24.0, 0.75}}};
  CHECK(compare_runs(a, b) ==
        "step,metro_under_pct,t5_under_pct,delta_under_pct,metro_sens_var,t5_sens_var,delta_sens_var\n"
        "100,10,20,10,0.5,1.5,1\n"
        "200,12,24,12,0.25,0.75,0.5\n");
  RunAnalysis shape = b;
  shape.checkpoints[1].neurons = 64;
  CHECK_THROWS_AS(compare_runs(a, shape), ComparisonError);
  RunAnalysis steps = b;
  steps.checkpoints[0].step = 150;
  CHECK_THROWS_AS(compare_runs(a, steps), ComparisonError);
  RunAnalysis shorter{"x", {b.checkpoints[0]}};
  CHECK_THROWS_AS(compare_runs(a, shorter), ComparisonError);
}
