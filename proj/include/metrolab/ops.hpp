// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Matrices are 2-D row-major; "rows" of a higher-rank
// tensor means every position of all but the last axis.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "metrolab/rng.hpp"
#include "metrolab/tensor.hpp"

namespace metrolab {

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);

/// a · bᵀ for a [m×k], b [n×k]. Used by heads tied to an embedding table.
template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b);

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a);

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape);

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);

/// x + bias broadcast over rows; bias length equals x's last extent.
template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias);

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor);

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a);

/// tanh approximation.
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a);

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a);

/// x [N×in] · weight [in×out] + bias [out]. bias may be undefined.
template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias);

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps);

/// Row gather: result row i is table row ids[i]. Throws VocabularyError on bad ids.
template <class Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const TokenId> ids);

/// Inverted dropout. Identity when !training or p == 0.
template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, Real p, Rng* rng, bool training);

struct AttentionSpec {
  std::size_t batch = 1;
  std::size_t heads = 1;
  std::size_t query_len = 1;
  std::size_t key_len = 1;
  bool causal = false;
  /// batch × key_len, nonzero = key may be attended. Empty means all valid.
  std::vector<std::uint8_t> key_valid;
};

/// Multi-head scaled dot-product attention.
/// q [batch·query_len × d], k and v [batch·key_len × d]; d splits evenly over heads.
/// bias (optional) is [query_len·key_len × heads], added to the scaled logits and
/// shared across the batch. Query rows with no attendable key produce zeros.
template <class Real>
Tensor<Real> attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                       const Tensor<Real>& bias, const AttentionSpec& spec);

/// Mean over rows with mask set of −log softmax(logits row)[target]. An all-false
/// mask yields exactly 0 with zero gradient.
template <class Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const TokenId> targets,
                                   std::span<const std::uint8_t> mask);

/// Mean over masked positions of the logistic loss; labels are 0/1, one logit per row.
template <class Real>
Tensor<Real> binary_cross_entropy_with_logits(const Tensor<Real>& logits,
                                              std::span<const std::uint8_t> labels,
                                              std::span<const std::uint8_t> mask);

/// Σ weights[i] · terms[i] over scalar tensors.
template <class Real>
Tensor<Real> weighted_sum(std::span<const Tensor<Real>> terms, std::span<const Real> weights);

// Non-differentiable helpers.

/// Numerically stable log-softmax of one row.
template <class Real>
std::vector<double> log_softmax(std::span<const Real> row);

}  // namespace metrolab
