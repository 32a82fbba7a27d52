// SPDX-License-Identifier: Apache-2.0
#include "metrolab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "metrolab/errors.hpp"
#include "metrolab/simd/kernels.hpp"

namespace metrolab {
namespace {

template <class Real>
Tape<Real>* recording(std::initializer_list<const Tensor<Real>*> inputs) {
  Tape<Real>* tape = active_tape<Real>();
  if (tape == nullptr) return nullptr;
  for (const Tensor<Real>* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

template <class Real>
void require_rank(const Tensor<Real>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

template <class Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

std::size_t rows_of(const Shape& shape) { return shape_numel(shape) / shape.back(); }

// C[m×n] += A[m×k] · B[k×n]
template <class Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  const auto& kt = simd::active<Real>();
  for (std::size_t i = 0; i < m; ++i) {
    Real* c_row = c + i * n;
    const Real* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) kt.axpy(a_row[p], b + p * n, c_row, n);
  }
}

// C[m×n] += A[m×k] · B[n×k]ᵀ
template <class Real>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  const auto& kt = simd::active<Real>();
  for (std::size_t i = 0; i < m; ++i) {
    const Real* a_row = a + i * k;
    Real* c_row = c + i * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += kt.dot(a_row, b + j * k, k);
  }
}

// C[k×n] += A[m×k]ᵀ · B[m×n]
template <class Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  const auto& kt = simd::active<Real>();
  for (std::size_t r = 0; r < m; ++r) {
    const Real* a_row = a + r * k;
    const Real* b_row = b + r * n;
    for (std::size_t p = 0; p < k; ++p) kt.axpy(a_row[p], b_row, c + p * n, n);
  }
}

}  // namespace

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Real> out(Shape{m, n});
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out.mutable_data().data());
  if (auto* tape = recording({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const Real* g = out.grad().data();
      if (a.requires_grad()) gemm_nt(m, n, k, g, b.data().data(), a.mutable_grad().data());
      if (b.requires_grad()) gemm_tn(m, k, n, a.data().data(), g, b.mutable_grad().data());
    });
  }
  return out;
}

template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions differ for " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + "ᵀ");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<Real> out(Shape{m, n});
  gemm_nt(m, k, n, a.data().data(), b.data().data(), out.mutable_data().data());
  if (auto* tape = recording({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const Real* g = out.grad().data();
      if (a.requires_grad()) gemm_nn(m, n, k, g, b.data().data(), a.mutable_grad().data());
      if (b.requires_grad()) gemm_tn(m, n, k, g, a.data().data(), b.mutable_grad().data());
    });
  }
  return out;
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<Real> out(Shape{n, m});
  auto src = a.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  if (auto* tape = recording({&a})) {
    out.set_requires_grad(true);
    tape->record([a, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor<Real> out(std::move(shape), std::vector<Real>(a.data().begin(), a.data().end()));
  if (auto* tape = recording({&a})) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "add");
  Tensor<Real> out(a.shape());
  auto y = out.mutable_data();
  auto x1 = a.data();
  auto x2 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x1[i] + x2[i];
  if (auto* tape = recording({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      const auto& kt = simd::active<Real>();
      if (a.requires_grad()) kt.axpy(Real(1), g.data(), a.mutable_grad().data(), g.size());
      if (b.requires_grad()) kt.axpy(Real(1), g.data(), b.mutable_grad().data(), g.size());
    });
  }
  return out;
}

template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
  if (bias.numel() != x.shape().back()) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  const std::size_t width = bias.numel();
  const std::size_t rows = rows_of(x.shape());
  Tensor<Real> out(x.shape(), std::vector<Real>(x.data().begin(), x.data().end()));
  auto y = out.mutable_data();
  auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < width; ++j) y[r * width + j] += b[j];
  }
  if (auto* tape = recording({&x, &bias})) {
    out.set_requires_grad(true);
    tape->record([x, bias, out, rows, width]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      const auto& kt = simd::active<Real>();
      if (x.requires_grad()) kt.axpy(Real(1), g.data(), x.mutable_grad().data(), g.size());
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) kt.axpy(Real(1), g.data() + r * width, gb.data(), width);
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "mul");
  Tensor<Real> out(a.shape());
  auto y = out.mutable_data();
  auto x1 = a.data();
  auto x2 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x1[i] * x2[i];
  if (auto* tape = recording({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        auto xb = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        auto xa = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor) {
  Tensor<Real> out(a.shape(), std::vector<Real>(a.data().begin(), a.data().end()));
  simd::active<Real>().scale(factor, out.mutable_data().data(), out.numel());
  if (auto* tape = recording({&a})) {
    out.set_requires_grad(true);
    tape->record([a, out, factor]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      simd::active<Real>().axpy(factor, g.data(), a.mutable_grad().data(), g.size());
    });
  }
  return out;
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  Tensor<Real> out(a.shape());
  auto y = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > Real(0) ? x[i] : Real(0);
  if (auto* tape = recording({&a})) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto x = a.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > Real(0)) ga[i] += g[i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
  constexpr Real c = Real(0.7978845608028654);  // sqrt(2/pi)
  constexpr Real k = Real(0.044715);
  Tensor<Real> out(a.shape());
  auto y = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const Real u = c * (x[i] + k * x[i] * x[i] * x[i]);
    y[i] = Real(0.5) * x[i] * (Real(1) + std::tanh(u));
  }
  if (auto* tape = recording({&a})) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto x = a.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Real u = c * (x[i] + k * x[i] * x[i] * x[i]);
        const Real t = std::tanh(u);
        const Real du = c * (Real(1) + Real(3) * k * x[i] * x[i]);
        ga[i] += g[i] * (Real(0.5) * (Real(1) + t) + Real(0.5) * x[i] * (Real(1) - t * t) * du);
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real acc = 0;
  for (Real v : a.data()) acc += v;
  Tensor<Real> out = Tensor<Real>::scalar(acc);
  if (auto* tape = recording({&a})) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      const Real g = out.grad()[0];
      for (Real& v : a.mutable_grad()) v += g;
    });
  }
  return out;
}

template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  if (x.dim(1) != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  if (bias.defined() && bias.numel() != n) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  Tensor<Real> out(Shape{m, n});
  auto y = out.mutable_data();
  if (bias.defined()) {
    auto b = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(b.begin(), b.end(), y.begin() + i * n);
  }
  gemm_nn(m, k, n, x.data().data(), weight.data().data(), y.data());
  if (auto* tape = recording({&x, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record([x, weight, bias, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const Real* g = out.grad().data();
      if (x.requires_grad()) gemm_nt(m, n, k, g, weight.data().data(), x.mutable_grad().data());
      if (weight.requires_grad()) gemm_tn(m, k, n, x.data().data(), g, weight.mutable_grad().data());
      if (bias.defined() && bias.requires_grad()) {
        const auto& kt = simd::active<Real>();
        Real* gb = bias.mutable_grad().data();
        for (std::size_t i = 0; i < m; ++i) kt.axpy(Real(1), g + i * n, gb, n);
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = rows_of(x.shape());
  Tensor<Real> out(x.shape());
  std::vector<Real> normalized(x.numel());
  std::vector<Real> inv_std(rows);
  auto in = x.data();
  auto y = out.mutable_data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = in.data() + r * d;
    Real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= Real(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= Real(d);
    const Real inv = Real(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (row[j] - mean) * inv;
      normalized[r * d + j] = h;
      y[r * d + j] = h * gv[j] + bv[j];
    }
  }
  if (auto* tape = recording({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    tape->record([x, gain, bias, out, rows, d, normalized = std::move(normalized),
                  inv_std = std::move(inv_std)]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gv = gain.data();
      if (gain.requires_grad()) {
        auto gg = gain.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * normalized[r * d + j];
        }
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
      }
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          Real sum_dh = 0, sum_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const Real dh = g[r * d + j] * gv[j];
            sum_dh += dh;
            sum_dh_h += dh * normalized[r * d + j];
          }
          const Real inv_d = Real(1) / Real(d);
          for (std::size_t j = 0; j < d; ++j) {
            const Real dh = g[r * d + j] * gv[j];
            gx[r * d + j] += inv_std[r] * (dh - inv_d * sum_dh - normalized[r * d + j] * inv_d * sum_dh_h);
          }
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const TokenId> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw VocabularyError("embedding: token id " + std::to_string(id) + " outside [0, " +
                            std::to_string(vocab) + ")");
    }
  }
  Tensor<Real> out(Shape{ids.size(), d});
  auto y = out.mutable_data();
  auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(t.begin() + static_cast<std::size_t>(ids[i]) * d, d, y.begin() + i * d);
  }
  if (auto* tape = recording({&table})) {
    out.set_requires_grad(true);
    tape->record([table, out, ids = std::vector<TokenId>(ids.begin(), ids.end()), d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gt = table.mutable_grad();
      const auto& kt = simd::active<Real>();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        kt.axpy(Real(1), g.data() + i * d, gt.data() + static_cast<std::size_t>(ids[i]) * d, d);
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, Real p, Rng* rng, bool training) {
  if (!training || p <= Real(0)) return x;
  if (p >= Real(1)) throw ContractError("dropout: probability must be < 1");
  if (rng == nullptr) throw ContractError("dropout: training mode needs an rng");
  const Real keep_scale = Real(1) / (Real(1) - p);
  std::vector<Real> keep(x.numel());
  for (Real& k : keep) k = rng->uniform() < static_cast<double>(p) ? Real(0) : keep_scale;
  Tensor<Real> out(x.shape());
  auto y = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] * keep[i];
  if (auto* tape = recording({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, keep = std::move(keep)]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * keep[i];
    });
  }
  return out;
}

template <class Real>
Tensor<Real> attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                       const Tensor<Real>& bias, const AttentionSpec& spec) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const std::size_t B = spec.batch, H = spec.heads, Tq = spec.query_len, Tk = spec.key_len;
  const std::size_t d = q.dim(1);
  if (H == 0 || d % H != 0) {
    throw DimensionError("attention: model width " + std::to_string(d) + " not divisible by " +
                         std::to_string(H) + " heads");
  }
  if (q.dim(0) != B * Tq || k.dim(0) != B * Tk || v.dim(0) != B * Tk || k.dim(1) != d ||
      v.dim(1) != d) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " inconsistent with batch " +
                         std::to_string(B) + ", lengths " + std::to_string(Tq) + "/" +
                         std::to_string(Tk));
  }
  if (bias.defined() && (bias.rank() != 2 || bias.dim(0) != Tq * Tk || bias.dim(1) != H)) {
    throw DimensionError("attention: bias " + shape_str(bias.shape()) + " expected [" +
                         std::to_string(Tq * Tk) + "x" + std::to_string(H) + "]");
  }
  if (!spec.key_valid.empty() && spec.key_valid.size() != B * Tk) {
    throw DimensionError("attention: key mask has " + std::to_string(spec.key_valid.size()) +
                         " entries, expected " + std::to_string(B * Tk));
  }
  const std::size_t hd = d / H;
  const Real inv_sqrt = Real(1) / std::sqrt(Real(hd));
  const auto& kt = simd::active<Real>();

  auto allowed = [&spec, Tk](std::size_t b, std::size_t i, std::size_t j) {
    if (spec.causal && j > i) return false;
    return spec.key_valid.empty() || spec.key_valid[b * Tk + j] != 0;
  };

  std::vector<Real> probs(B * H * Tq * Tk, Real(0));
  Tensor<Real> out(Shape{B * Tq, d});
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  auto y = out.mutable_data();
  const Real* bd = bias.defined() ? bias.data().data() : nullptr;
  std::vector<Real> scores(Tk);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Tq; ++i) {
        const Real* q_row = qd.data() + (b * Tq + i) * d + h * hd;
        Real max_score = -std::numeric_limits<Real>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < Tk; ++j) {
          if (!allowed(b, i, j)) continue;
          Real s = kt.dot(q_row, kd.data() + (b * Tk + j) * d + h * hd, hd) * inv_sqrt;
          if (bd) s += bd[(i * Tk + j) * H + h];
          scores[j] = s;
          max_score = std::max(max_score, s);
          any = true;
        }
        if (!any) continue;
        Real* p = probs.data() + ((b * H + h) * Tq + i) * Tk;
        Real total = 0;
        for (std::size_t j = 0; j < Tk; ++j) {
          if (!allowed(b, i, j)) continue;
          p[j] = std::exp(scores[j] - max_score);
          total += p[j];
        }
        Real* y_row = y.data() + (b * Tq + i) * d + h * hd;
        for (std::size_t j = 0; j < Tk; ++j) {
          if (p[j] == Real(0)) continue;
          p[j] /= total;
          kt.axpy(p[j], vd.data() + (b * Tk + j) * d + h * hd, y_row, hd);
        }
      }
    }
  }

  if (auto* tape = recording({&q, &k, &v, &bias})) {
    out.set_requires_grad(true);
    tape->record([q, k, v, bias, out, probs = std::move(probs), B, H, Tq, Tk, d, hd,
                  inv_sqrt]() mutable {
      if (!out.has_grad()) return;
      const auto& kt = simd::active<Real>();
      auto g = out.grad();
      auto qd = q.data();
      auto kd = k.data();
      auto vd = v.data();
      Real* gq = q.requires_grad() ? q.mutable_grad().data() : nullptr;
      Real* gk = k.requires_grad() ? k.mutable_grad().data() : nullptr;
      Real* gv = v.requires_grad() ? v.mutable_grad().data() : nullptr;
      Real* gb = bias.defined() && bias.requires_grad() ? bias.mutable_grad().data() : nullptr;
      std::vector<Real> dscore(Tk);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < Tq; ++i) {
            const Real* p = probs.data() + ((b * H + h) * Tq + i) * Tk;
            const Real* g_row = g.data() + (b * Tq + i) * d + h * hd;
            Real weighted = 0;
            for (std::size_t j = 0; j < Tk; ++j) {
              if (p[j] == Real(0)) {
                dscore[j] = 0;
                continue;
              }
              const Real dp = kt.dot(g_row, vd.data() + (b * Tk + j) * d + h * hd, hd);
              dscore[j] = dp;
              weighted += p[j] * dp;
              if (gv) kt.axpy(p[j], g_row, gv + (b * Tk + j) * d + h * hd, hd);
            }
            for (std::size_t j = 0; j < Tk; ++j) {
              if (p[j] == Real(0)) continue;
              const Real ds = p[j] * (dscore[j] - weighted);
              if (gb) gb[(i * Tk + j) * H + h] += ds;
              if (gq) kt.axpy(ds * inv_sqrt, kd.data() + (b * Tk + j) * d + h * hd,
                              gq + (b * Tq + i) * d + h * hd, hd);
              if (gk) kt.axpy(ds * inv_sqrt, qd.data() + (b * Tq + i) * d + h * hd,
                              gk + (b * Tk + j) * d + h * hd, hd);
            }
          }
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const TokenId> targets,
                                   std::span<const std::uint8_t> mask) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != n || mask.size() != n) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw VocabularyError("softmax_cross_entropy: target id " + std::to_string(targets[r]) +
                            " outside [0, " + std::to_string(vocab) + ")");
    }
    if (mask[r]) ++count;
  }
  auto z = logits.data();
  // Accumulate in double so the 32-bit loss value does not depend on row order noise.
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    const Real* row = z.data() + r * vocab;
    const Real m = *std::max_element(row, row + vocab);
    double acc = 0;
    for (std::size_t j = 0; j < vocab; ++j) acc += std::exp(static_cast<double>(row[j] - m));
    total += std::log(acc) + static_cast<double>(m) - static_cast<double>(row[targets[r]]);
  }
  Tensor<Real> out = Tensor<Real>::scalar(count ? static_cast<Real>(total / double(count)) : Real(0));
  if (auto* tape = recording({&logits})) {
    out.set_requires_grad(true);
    tape->record([logits, out, n, vocab, count, t = std::vector<TokenId>(targets.begin(), targets.end()),
                  mk = std::vector<std::uint8_t>(mask.begin(), mask.end())]() mutable {
      if (!out.has_grad() || count == 0) return;
      const Real g = out.grad()[0] / Real(count);
      auto z = logits.data();
      auto gz = logits.mutable_grad();
      for (std::size_t r = 0; r < n; ++r) {
        if (!mk[r]) continue;
        const Real* row = z.data() + r * vocab;
        Real* grow = gz.data() + r * vocab;
        const Real m = *std::max_element(row, row + vocab);
        Real total = 0;
        for (std::size_t j = 0; j < vocab; ++j) total += std::exp(row[j] - m);
        for (std::size_t j = 0; j < vocab; ++j) grow[j] += g * std::exp(row[j] - m) / total;
        grow[t[r]] -= g;
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> binary_cross_entropy_with_logits(const Tensor<Real>& logits,
                                              std::span<const std::uint8_t> labels,
                                              std::span<const std::uint8_t> mask) {
  const std::size_t n = logits.numel();
  if (labels.size() != n || mask.size() != n) {
    throw DimensionError("binary_cross_entropy_with_logits: " + std::to_string(n) + " logits vs " +
                         std::to_string(labels.size()) + " labels / " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  double total = 0;
  auto z = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++count;
    const double x = z[i];
    const double y = labels[i] ? 1.0 : 0.0;
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor<Real> out = Tensor<Real>::scalar(count ? static_cast<Real>(total / double(count)) : Real(0));
  if (auto* tape = recording({&logits})) {
    out.set_requires_grad(true);
    tape->record([logits, out, n, count, lb = std::vector<std::uint8_t>(labels.begin(), labels.end()),
                  mk = std::vector<std::uint8_t>(mask.begin(), mask.end())]() mutable {
      if (!out.has_grad() || count == 0) return;
      const Real g = out.grad()[0] / Real(count);
      auto z = logits.data();
      auto gz = logits.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (!mk[i]) continue;
        const Real sig = Real(1) / (Real(1) + std::exp(-z[i]));
        gz[i] += g * (sig - (lb[i] ? Real(1) : Real(0)));
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> weighted_sum(std::span<const Tensor<Real>> terms, std::span<const Real> weights) {
  if (terms.size() != weights.size() || terms.empty()) {
    throw ContractError("weighted_sum: need one weight per term");
  }
  Real acc = 0;
  bool any_grad = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].numel() != 1) {
      throw DimensionError("weighted_sum: term " + std::to_string(i) + " has shape " +
                           shape_str(terms[i].shape()));
    }
    acc += weights[i] * terms[i].item();
    any_grad = any_grad || terms[i].requires_grad();
  }
  Tensor<Real> out = Tensor<Real>::scalar(acc);
  Tape<Real>* tape = active_tape<Real>();
  if (tape != nullptr && any_grad) {
    out.set_requires_grad(true);
    tape->record([ts = std::vector<Tensor<Real>>(terms.begin(), terms.end()),
                  ws = std::vector<Real>(weights.begin(), weights.end()), out]() mutable {
      if (!out.has_grad()) return;
      const Real g = out.grad()[0];
      for (std::size_t i = 0; i < ts.size(); ++i) {
        if (ts[i].requires_grad()) ts[i].mutable_grad()[0] += ws[i] * g;
      }
    });
  }
  return out;
}

template <class Real>
std::vector<double> log_softmax(std::span<const Real> row) {
  std::vector<double> out(row.size());
  if (row.empty()) return out;
  const double m = static_cast<double>(*std::max_element(row.begin(), row.end()));
  double acc = 0;
  for (Real v : row) acc += std::exp(static_cast<double>(v) - m);
  const double lse = m + std::log(acc);
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = static_cast<double>(row[j]) - lse;
  return out;
}

#define METROLAB_INSTANTIATE_OPS(Real)                                                         \
  template Tensor<Real> matmul(const Tensor<Real>&, const Tensor<Real>&);                      \
  template Tensor<Real> matmul_nt(const Tensor<Real>&, const Tensor<Real>&);                   \
  template Tensor<Real> transpose(const Tensor<Real>&);                                        \
  template Tensor<Real> reshape(const Tensor<Real>&, Shape);                                   \
  template Tensor<Real> add(const Tensor<Real>&, const Tensor<Real>&);                         \
  template Tensor<Real> add_bias(const Tensor<Real>&, const Tensor<Real>&);                    \
  template Tensor<Real> mul(const Tensor<Real>&, const Tensor<Real>&);                         \
  template Tensor<Real> scale(const Tensor<Real>&, Real);                                      \
  template Tensor<Real> relu(const Tensor<Real>&);                                             \
  template Tensor<Real> gelu(const Tensor<Real>&);                                             \
  template Tensor<Real> sum(const Tensor<Real>&);                                              \
  template Tensor<Real> linear(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&); \
  template Tensor<Real> layer_norm(const Tensor<Real>&, const Tensor<Real>&,                   \
                                   const Tensor<Real>&, Real);                                 \
  template Tensor<Real> embedding(const Tensor<Real>&, std::span<const TokenId>);              \
  template Tensor<Real> dropout(const Tensor<Real>&, Real, Rng*, bool);                        \
  template Tensor<Real> attention(const Tensor<Real>&, const Tensor<Real>&,                    \
                                  const Tensor<Real>&, const Tensor<Real>&,                    \
                                  const AttentionSpec&);                                       \
  template Tensor<Real> softmax_cross_entropy(const Tensor<Real>&, std::span<const TokenId>,   \
                                              std::span<const std::uint8_t>);                  \
  template Tensor<Real> binary_cross_entropy_with_logits(                                      \
      const Tensor<Real>&, std::span<const std::uint8_t>, std::span<const std::uint8_t>);      \
  template Tensor<Real> weighted_sum(std::span<const Tensor<Real>>, std::span<const Real>);    \
  template std::vector<double> log_softmax(std::span<const Real>);

METROLAB_INSTANTIATE_OPS(float)
METROLAB_INSTANTIATE_OPS(double)

}  // namespace metrolab
