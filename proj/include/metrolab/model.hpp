// SPDX-License-Identifier: Apache-2.0
//
// Auxiliary MLM encoder, main encoder-decoder and projection heads. Hidden states
// are [batch·len × d_model] row-major, row r·len + t holding position t of row r.
#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metrolab/checkpoint.hpp"
#include "metrolab/config.hpp"
#include "metrolab/data.hpp"
#include "metrolab/masking.hpp"
#include "metrolab/ops.hpp"
#include "metrolab/rng.hpp"

namespace metrolab {

/// Bidirectional bucket of distance = key position − query position: half of the
/// buckets per sign, exact for small |distance|, log-spaced up to max_distance and
/// clamped beyond.
std::size_t relative_bucket(std::int64_t distance, std::size_t num_buckets, std::size_t max_distance);

/// Called once per feed-forward block with the post-activation [rows × d_ff]
/// values and a per-row validity mask.
template <class Real>
using ActivationObserver =
    std::function<void(const std::string& block, const Tensor<Real>& activation, std::span<const std::uint8_t> valid)>;

template <class Real>
struct ForwardPass {
  bool training = false;
  Rng* rng = nullptr;
  const ActivationObserver<Real>* observer = nullptr;
};

template <class Real>
class Model {
 public:
  using T = Tensor<Real>;

  /// Copy-mechanism CLM heads are rejected with ConfigError.
  Model(ModelConfig config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  std::size_t vocab_size() const { return config_.vocab_size; }

  const std::vector<std::string>& parameter_names() const { return names_; }
  bool has_parameter(const std::string& name) const { return params_.count(name) != 0; }
  const T& parameter(const std::string& name) const;
  T& parameter(const std::string& name);
  std::size_t parameter_count() const;

  T aux_hidden(const TokenBatch& masked, const ForwardPass<Real>& pass = {}) const;
  /// Tied to the token embedding. rows selects hidden rows; empty = all rows.
  T mlm_logits(const T& hidden, std::span<const TokenId> rows = {}) const;
  T aux_forward(const TokenBatch& masked, const ForwardPass<Real>& pass = {}) const;

  T encode(const TokenBatch& input, const ForwardPass<Real>& pass = {}) const;
  T decode(const T& memory, const TokenBatch& memory_batch, const TokenBatch& decoder_input,
           const ForwardPass<Real>& pass = {}) const;

  /// [rows × 1] replaced-token logits.
  T rtd_logits(const T& hidden) const;
  T clm_logits(const T& decoder_hidden, std::span<const TokenId> rows = {}) const;

  std::vector<NamedArray> export_tensors() const;
  /// Copies every selected parameter from arrays; a selected parameter that is
  /// missing or mis-shaped raises CheckpointError.
  void import_tensors(const std::vector<NamedArray>& arrays,
                      const std::function<bool(const std::string&)>& select = {});

 private:
  struct StackSpec;

  T& add_param(const std::string& name, Shape shape, int init);
  void add_attention(const std::string& prefix);
  void add_layer_norm(const std::string& prefix);
  void add_linear(const std::string& prefix, std::size_t in, std::size_t out);
  void add_stack(const std::string& prefix, std::size_t layers, bool with_cross);

  T embed(const std::string& prefix, const TokenBatch& batch, bool detach_tokens, const ForwardPass<Real>& pass) const;
  T layer_norm_named(const T& x, const std::string& prefix) const;
  T linear_named(const T& x, const std::string& prefix) const;
  T attention_block(const std::string& prefix, const T& x, const T& kv, const T& bias, const AttentionSpec& spec) const;
  T feed_forward(const std::string& prefix, const T& x, std::span<const std::uint8_t> valid,
                 const ForwardPass<Real>& pass) const;
  T sublayer(const T& x, const std::string& ln, const ForwardPass<Real>& pass,
             const std::function<T(const T&)>& body) const;
  T relative_bias(const std::string& table, std::size_t query_len, std::size_t key_len) const;
  std::string rel_table_name(const std::string& stack, std::size_t layer) const;
  T run_stack(const std::string& prefix, std::size_t layers, const TokenBatch& input, const T* memory,
              const TokenBatch* memory_batch, const ForwardPass<Real>& pass) const;
  T token_table(bool detach) const;
  void check_length(const TokenBatch& batch) const;

  ModelConfig config_;
  std::vector<std::string> names_;
  std::map<std::string, T> params_;
  std::vector<std::string> normal_init_;
};

/// Draws one id from softmax(logits / temperature).
template <class Real>
TokenId sample_categorical(std::span<const Real> logits, double temperature, Rng& rng);

/// X^noise: masked positions drawn from the per-position categorical given by
/// logits [n × V], other positions copied from x_orig. Sampling is outside the tape.
template <class Real>
TokenSeq sample_noise(const Tensor<Real>& logits, std::span<const TokenId> x_orig, const MaskPlan& plan,
                      double temperature, Rng& rng);

/// Row indices r·cols + c of every set flag in a [rows × cols] mask.
std::vector<TokenId> flagged_rows(std::span<const std::uint8_t> mask);

}  // namespace metrolab
