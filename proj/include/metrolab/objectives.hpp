// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "metrolab/config.hpp"
#include "metrolab/data.hpp"
#include "metrolab/masking.hpp"
#include "metrolab/model.hpp"

namespace metrolab {

/// All matrices are [rows × cols] aligned with x_orig.
struct NoisyBatch {
  TokenBatch x_orig;
  std::vector<MaskPlan> plans;
  std::vector<std::uint8_t> mask;
  TokenBatch x_masked;
  TokenBatch x_noise;
  /// 1 where x_noise differs from x_orig ("replaced"), 0 where it is original.
  std::vector<std::uint8_t> replaced;

  std::size_t num_masked() const;
};

/// One plan per row. Rows with fewer than two maskable tokens get an all-false plan.
std::vector<MaskPlan> sample_batch_plans(const TokenBatch& batch, MaskPattern pattern, double ratio,
                                         double mean_span, Rng& rng, const MaskableFn& maskable = default_maskable);

/// Tokens proposed for the masked positions of one row, in position order.
using ProposalFn = std::function<TokenSeq(std::size_t row, std::span<const TokenId> masked_row, const MaskPlan& plan,
                                          Rng& rng)>;

/// Builds x_masked and x_noise from plans and a proposal; labels follow elementwise.
NoisyBatch build_noisy_batch(const TokenBatch& x_orig, const std::vector<MaskPlan>& plans,
                             const ProposalFn& propose, Rng& rng);

/// Proposal sampled from the auxiliary model of `model`, outside the tape.
template <class Real>
ProposalFn model_proposal(const Model<Real>& model, double temperature = 1.0);

/// As build_noisy_batch with the auxiliary model; the auxiliary forward pass is
/// recorded on the active tape and its logits at masked positions (row-major order)
/// are returned through mlm_logits for the MLM loss.
template <class Real>
NoisyBatch build_noisy_batch(const TokenBatch& x_orig, const std::vector<MaskPlan>& plans, const Model<Real>& model,
                             Rng& rng, const ForwardPass<Real>& pass, Tensor<Real>* mlm_logits = nullptr,
                             double temperature = 1.0);

struct SequenceTarget {
  TokenSeq decoder_input;
  TokenSeq decoder_target;
  std::vector<std::uint8_t> loss_mask;
};

/// Decoder input is BOS followed by the target without its last token. masked_only
/// is an ill-formed target and needs diagnostic mode.
SequenceTarget build_decoder_target(std::span<const TokenId> x_orig, const MaskPlan& plan, TargetVariant variant,
                                    bool diagnostic = false);

struct TargetSpec {
  TargetVariant variant = TargetVariant::all_tokens_masked_loss;
  TokenBatch decoder_input;
  TokenBatch decoder_target;
  std::vector<std::uint8_t> loss_mask;
};

TargetSpec build_decoder_targets(const NoisyBatch& batch, TargetVariant variant, bool diagnostic = false);
TargetSpec targets_from_sequences(const std::vector<SequenceTarget>& rows, TargetVariant variant);

/// Span-corruption inputs for the sentinel baseline; the target is either the
/// sentinel sequence or the full original sequence.
struct SpanCorruptionBatch {
  TokenBatch encoder_input;
  TargetSpec target;
};

SpanCorruptionBatch build_span_corruption_batch(const TokenBatch& x_orig, const std::vector<MaskPlan>& plans,
                                                const SentinelRange& sentinels, T5Target target_kind);

struct RtdStats {
  std::size_t masked = 0;
  std::size_t masked_replaced = 0;
  std::size_t masked_correct = 0;
  std::size_t unmasked = 0;
  std::size_t unmasked_correct = 0;
  std::size_t predicted_replaced = 0;
  std::size_t true_positive = 0;
  std::size_t masked_true_positive = 0;

  double accuracy_masked() const;
  double accuracy_unmasked() const;
  double precision() const;
  double recall_masked() const;
  /// Accuracy of always predicting the more frequent label on masked positions.
  double majority_baseline_masked() const;
  RtdStats& operator+=(const RtdStats& other);
};

/// Threshold at logit 0 over non-PAD positions.
template <class Real>
RtdStats rtd_statistics(const NoisyBatch& batch, const Tensor<Real>& rtd_logits);

struct LossBreakdown {
  double l_mlm = 0.0;
  double l_rtd = 0.0;
  double l_clm = 0.0;
  double combined = 0.0;
  RtdStats rtd;
};

template <class Real>
struct LossTerms {
  Tensor<Real> l_mlm;
  Tensor<Real> l_rtd;  // undefined when the RTD head was skipped
  Tensor<Real> l_clm;
  Tensor<Real> combined;

  LossBreakdown breakdown() const;
};

/// mlm_logits holds one row per masked position and clm_logits one row per loss-mask
/// position, both in row-major order. rtd_logits is [rows·cols × 1] or undefined.
template <class Real>
LossTerms<Real> compute_losses(const NoisyBatch& batch, const TargetSpec& target, const Tensor<Real>& mlm_logits,
                               const Tensor<Real>& rtd_logits, const Tensor<Real>& clm_logits, double lambda_rtd,
                               double lambda_clm);

struct ObjectiveOptions {
  double lambda_rtd = 50.0;
  double lambda_clm = 1.0;
  bool diagnostic = false;
};

/// Main-model forward and losses for a fixed noisy batch. The auxiliary model is
/// rerun on x_masked for L_MLM, so the result is a deterministic function of the
/// parameters when pass.training is false.
template <class Real>
LossTerms<Real> metro_losses(const Model<Real>& model, const NoisyBatch& batch, const TargetSpec& target,
                             const ObjectiveOptions& options, const ForwardPass<Real>& pass,
                             RtdStats* stats = nullptr);

struct MetroStepOutput {
  NoisyBatch batch;
  TargetSpec target;
};

/// Full objective: masks, auxiliary sampling, encoder/decoder, weighted loss.
template <class Real>
LossTerms<Real> metro_objective(const Model<Real>& model, const TokenBatch& x_orig, const ObjectiveOptions& options,
                                Rng& rng, const ForwardPass<Real>& pass, MetroStepOutput* out = nullptr,
                                RtdStats* stats = nullptr);

/// Cross-entropy of the decoder on a sentinel or full-sequence target.
template <class Real>
Tensor<Real> seq2seq_loss(const Model<Real>& model, const TokenBatch& encoder_input, const TargetSpec& target,
                          const ForwardPass<Real>& pass);

struct AmbiguityReport {
  TargetVariant variant = TargetVariant::all_tokens_masked_loss;
  std::size_t draws = 0;
  std::size_t colliding_pairs = 0;
  std::size_t ambiguous_pairs = 0;
  std::size_t mask_divergent_pairs = 0;

  double rate() const;
  double mask_divergence_rate() const;
};

/// Repeatedly masks a random corpus sequence (mask size uniform in [1, n−1]) and
/// asks the proposal for replacements. Among pairs of distinct draws from the same
/// sequence whose encoder inputs coincide, counts those whose decoder target strings
/// differ; loss-mask differences alone are tallied separately.
AmbiguityReport detect_target_ambiguity(const std::vector<TokenSeq>& corpus, const ProposalFn& propose,
                                        TargetVariant variant, std::size_t trials, Rng& rng,
                                        const MaskableFn& maskable = default_maskable);

/// Proposal drawing each replacement from the corpus unigram distribution.
ProposalFn unigram_proposal(const std::vector<TokenSeq>& corpus);

}  // namespace metrolab
