// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "metrolab/errors.hpp"
#include "metrolab/ops.hpp"
#include "support/gradcheck.hpp"

using namespace metrolab;
using metrolab::testing::check_gradients;
using metrolab::testing::random_tensor;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  return Tensor<double>(Shape{r, c}, std::move(v), grad);
}

void require_clean(const metrolab::testing::GradCheckReport& report) {
  for (const auto& f : report.failures) MESSAGE(f);
  CHECK(report.failed == 0);
  CHECK(report.checked > 0);
}

}  // namespace

TEST_CASE("matmul: identity and dot-product cases") {
  auto id = mat(2, 2, {1, 0, 0, 1});
  auto b = mat(2, 2, {5, 6, 7, 8});
  auto out = matmul(id, b);
  CHECK(std::vector<double>(out.data().begin(), out.data().end()) == std::vector<double>{5, 6, 7, 8});

  auto row = mat(1, 2, {1, 2});
  auto col = mat(2, 1, {3, 4});
  CHECK(matmul(row, col).item() == 11.0);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  auto a = mat(2, 3, std::vector<double>(6, 1.0));
  auto b = mat(2, 2, std::vector<double>(4, 1.0));
  try {
    (void)matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul: gradient of sum(A·B) matches finite differences") {
  auto a = random_tensor<double>({3, 4}, 1);
  auto b = random_tensor<double>({4, 2}, 2);
  auto report = check_gradients({{"a", a}, {"b", b}}, [&] { return sum(matmul(a, b)); }, 1e-5, 1e-4);
  require_clean(report);
}

TEST_CASE("softmax_cross_entropy: worked values") {
  auto logits = mat(1, 2, {0, 0});
  std::vector<TokenId> target{0};
  std::vector<std::uint8_t> on{1};
  CHECK(softmax_cross_entropy(logits, std::span<const TokenId>(target), std::span<const std::uint8_t>(on)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  SUBCASE("all-false mask gives exactly zero with zero gradient") {
    auto z = random_tensor<double>({3, 5}, 9);
    std::vector<TokenId> t{1, 2, 3};
    std::vector<std::uint8_t> off{0, 0, 0};
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = softmax_cross_entropy(z, std::span<const TokenId>(t), std::span<const std::uint8_t>(off));
    CHECK(loss.item() == 0.0);
    tape.backward(loss);
    for (double g : z.grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("softmax_cross_entropy: matches direct formula on random logits") {
  auto z = random_tensor<double>({4, 7}, 3, 3.0);
  std::vector<TokenId> t{6, 0, 3, 2};
  std::vector<std::uint8_t> m{1, 0, 1, 1};
  const double got = softmax_cross_entropy(z, std::span<const TokenId>(t), std::span<const std::uint8_t>(m)).item();
  double expect = 0;
  int count = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    if (!m[r]) continue;
    double denom = 0;
    for (std::size_t j = 0; j < 7; ++j) denom += std::exp(z.data()[r * 7 + j]);
    expect += -std::log(std::exp(z.data()[r * 7 + t[r]]) / denom);
    ++count;
  }
  expect /= count;
  CHECK(std::abs(got - expect) / std::abs(expect) < 1e-6);

  auto report = check_gradients({{"z", z}}, [&] {
    return softmax_cross_entropy(z, std::span<const TokenId>(t), std::span<const std::uint8_t>(m));
  });
  require_clean(report);
}

TEST_CASE("softmax_cross_entropy: target outside vocabulary") {
  auto z = random_tensor<double>({2, 3}, 4);
  std::vector<TokenId> t{0, 3};
  std::vector<std::uint8_t> m{1, 1};
  CHECK_THROWS_AS(softmax_cross_entropy(z, std::span<const TokenId>(t), std::span<const std::uint8_t>(m)),
                  VocabularyError);
}

TEST_CASE("log_softmax rows normalize") {
  auto z = random_tensor<double>({5, 11}, 5, 20.0);
  for (std::size_t r = 0; r < 5; ++r) {
    auto lp = log_softmax(std::span<const double>(z.data().data() + r * 11, 11));
    double total = 0;
    for (double v : lp) total += std::exp(v);
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("layer_norm: boundary rows") {
  auto gain = Tensor<double>(Shape{2}, {1, 1});
  auto bias = Tensor<double>(Shape{2});
  auto constant = layer_norm(mat(1, 2, {3, 3}), gain, bias, 1e-5);
  CHECK(constant.data()[0] == 0.0);
  CHECK(constant.data()[1] == 0.0);
  auto standard = layer_norm(mat(1, 2, {1, -1}), gain, bias, 1e-300);
  CHECK(standard.data()[0] == doctest::Approx(1.0));
  CHECK(standard.data()[1] == doctest::Approx(-1.0));
}

TEST_CASE("layer_norm: gradient on a 2x3x8 input") {
  auto x = random_tensor<double>({2, 3, 8}, 11);
  auto gain = random_tensor<double>({8}, 12);
  auto bias = random_tensor<double>({8}, 13);
  auto w = random_tensor<double>({2, 3, 8}, 14, 1.0, false);
  auto report = check_gradients({{"x", x}, {"gain", gain}, {"bias", bias}},
                                [&] { return sum(mul(layer_norm(x, gain, bias, 1e-5), w)); }, 1e-5, 1e-4);
  require_clean(report);
}

TEST_CASE("backward: trivial losses and contract errors") {
  auto x = random_tensor<double>({2, 3}, 21);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  x.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = scale(sum(mul(x, x)), 0.5);
    tape.backward(loss);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(x.data()[i]));
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
}

TEST_CASE("gradient of a tensor used twice is the sum of both contributions") {
  auto x = random_tensor<double>({4}, 31);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto loss = add(sum(scale(x, 2.0)), sum(scale(x, 3.0)));
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == doctest::Approx(5.0));
}

TEST_CASE("primitive gradients match finite differences") {
  SUBCASE("linear, relu, gelu, add_bias") {
    auto x = random_tensor<double>({5, 4}, 41);
    auto w = random_tensor<double>({4, 3}, 42);
    auto b = random_tensor<double>({3}, 43);
    auto b2 = random_tensor<double>({3}, 44);
    auto report = check_gradients({{"x", x}, {"w", w}, {"b", b}, {"b2", b2}}, [&] {
      auto h = linear(x, w, b);
      return sum(mul(relu(add_bias(h, b2)), gelu(h)));
    });
    require_clean(report);
  }
  SUBCASE("matmul_nt, transpose, reshape") {
    auto a = random_tensor<double>({3, 4}, 51);
    auto e = random_tensor<double>({6, 4}, 52);
    auto w = random_tensor<double>({6, 3}, 53, 1.0, false);
    auto report = check_gradients({{"a", a}, {"e", e}}, [&] {
      auto logits = matmul_nt(a, e);  // 3x6
      auto back = reshape(transpose(logits), Shape{6, 3});
      return sum(mul(mul(back, back), w));
    });
    require_clean(report);
  }
  SUBCASE("embedding gather with repeated ids") {
    auto table = random_tensor<double>({5, 3}, 61);
    std::vector<TokenId> ids{4, 1, 4, 0};
    auto w = random_tensor<double>({4, 3}, 62, 1.0, false);
    auto report = check_gradients({{"table", table}}, [&] {
      auto rows = embedding(table, std::span<const TokenId>(ids));
      return sum(mul(mul(rows, rows), w));
    });
    require_clean(report);
  }
  SUBCASE("binary cross entropy and weighted sum") {
    auto z = random_tensor<double>({6, 1}, 71, 3.0);
    auto y = random_tensor<double>({2, 2}, 72);
    std::vector<std::uint8_t> labels{1, 0, 0, 1, 1, 0};
    std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1};
    std::vector<double> weights{1.0, 50.0};
    auto report = check_gradients({{"z", z}, {"y", y}}, [&] {
      std::vector<Tensor<double>> terms{
          binary_cross_entropy_with_logits(z, std::span<const std::uint8_t>(labels),
                                           std::span<const std::uint8_t>(mask)),
          sum(mul(y, y))};
      return weighted_sum(std::span<const Tensor<double>>(terms), std::span<const double>(weights));
    });
    require_clean(report);
  }
  SUBCASE("seeded dropout") {
    auto x = random_tensor<double>({4, 5}, 81);
    auto w = random_tensor<double>({4, 5}, 82, 1.0, false);
    auto report = check_gradients({{"x", x}}, [&] {
      Rng rng(5);
      return sum(mul(dropout(x, 0.3, &rng, true), mul(x, w)));
    });
    require_clean(report);
  }
}

TEST_CASE("attention gradients with causal mask, padding and position bias") {
  const std::size_t B = 2, H = 2, T = 4, d = 6;
  auto q = random_tensor<double>({B * T, d}, 91);
  auto k = random_tensor<double>({B * T, d}, 92);
  auto v = random_tensor<double>({B * T, d}, 93);
  auto bias = random_tensor<double>({T * T, H}, 94);
  auto w = random_tensor<double>({B * T, d}, 95, 1.0, false);
  for (bool causal : {false, true}) {
    AttentionSpec spec;
    spec.batch = B;
    spec.heads = H;
    spec.query_len = T;
    spec.key_len = T;
    spec.causal = causal;
    spec.key_valid = {1, 1, 1, 1, 1, 1, 0, 0};
    auto report = check_gradients({{"q", q}, {"k", k}, {"v", v}, {"bias", bias}},
                                  [&] { return sum(mul(attention(q, k, v, bias, spec), w)); });
    require_clean(report);
  }
}

TEST_CASE("attention: masked keys and future keys do not influence output") {
  const std::size_t T = 3, d = 4;
  auto q = random_tensor<double>({T, d}, 101, 1.0, false);
  auto k = random_tensor<double>({T, d}, 102, 1.0, false);
  auto v = random_tensor<double>({T, d}, 103, 1.0, false);
  AttentionSpec spec;
  spec.heads = 2;
  spec.query_len = T;
  spec.key_len = T;
  spec.causal = true;
  auto base = attention(q, k, v, Tensor<double>(), spec);
  auto v2 = v.detach();
  for (std::size_t j = 0; j < d; ++j) v2.mutable_data()[2 * d + j] += 10.0;
  auto changed = attention(q, k, v2, Tensor<double>(), spec);
  for (std::size_t i = 0; i < 2 * d; ++i) CHECK(base.data()[i] == changed.data()[i]);
}

TEST_CASE("identical seeds give bit-identical results") {
  auto run = [] {
    Rng rng(77);
    auto x = random_tensor<double>({8, 8}, 7);
    auto y = dropout(linear(x, random_tensor<double>({8, 8}, 8), Tensor<double>()), 0.1, &rng, true);
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  CHECK(run() == run());
}
