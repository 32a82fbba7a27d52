// SPDX-License-Identifier: Apache-2.0
#include "metrolab/objectives.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "metrolab/errors.hpp"

namespace metrolab {
namespace {

template <class Real>
Tensor<Real> zero_loss() {
  return Tensor<Real>::scalar(Real(0));
}

std::vector<TokenId> gather_ids(const std::vector<TokenId>& ids, std::span<const TokenId> rows) {
  std::vector<TokenId> out;
  out.reserve(rows.size());
  for (TokenId r : rows) out.push_back(ids[static_cast<std::size_t>(r)]);
  return out;
}

void finish_noisy_batch(NoisyBatch& b) {
  b.replaced.assign(b.x_orig.ids.size(), 0);
  for (std::size_t r = 0; r < b.x_orig.rows; ++r) {
    for (std::size_t c = 0; c < b.x_orig.lengths[r]; ++c) {
      const std::size_t i = r * b.x_orig.cols + c;
      b.replaced[i] = b.x_orig.ids[i] != b.x_noise.ids[i];
    }
  }
}

NoisyBatch masked_batch(const TokenBatch& x_orig, const std::vector<MaskPlan>& plans) {
  if (plans.size() != x_orig.rows) {
    throw ContractError(std::to_string(plans.size()) + " mask plans for a batch of " + std::to_string(x_orig.rows) +
                        " rows");
  }
  NoisyBatch b;
  b.x_orig = x_orig;
  b.plans = plans;
  b.mask.assign(x_orig.ids.size(), 0);
  b.x_masked = x_orig;
  for (std::size_t r = 0; r < x_orig.rows; ++r) {
    const auto& flags = plans[r].flags;
    if (flags.size() != x_orig.lengths[r]) {
      throw ContractError("mask plan for row " + std::to_string(r) + " covers " + std::to_string(flags.size()) +
                          " positions but the row has " + std::to_string(x_orig.lengths[r]));
    }
    for (std::size_t c = 0; c < flags.size(); ++c) {
      const std::size_t i = r * x_orig.cols + c;
      b.mask[i] = flags[c];
      if (flags[c]) b.x_masked.ids[i] = kMask;
    }
  }
  b.x_noise = x_orig;
  return b;
}

void require_lambdas(double lambda_rtd, double lambda_clm) {
  if (lambda_rtd < 0.0 || lambda_clm < 0.0) throw ConfigError("loss weights must be non-negative");
}

}  // namespace

std::size_t NoisyBatch::num_masked() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::vector<MaskPlan> sample_batch_plans(const TokenBatch& batch, MaskPattern pattern, double ratio,
                                         double mean_span, Rng& rng, const MaskableFn& maskable) {
  std::vector<MaskPlan> plans;
  plans.reserve(batch.rows);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const auto row = batch.row(r);
    const auto n = static_cast<std::size_t>(std::count_if(row.begin(), row.end(), maskable));
    if (n < 2) {
      plans.push_back(MaskPlan{std::vector<std::uint8_t>(row.size(), 0), ratio, pattern});
    } else {
      plans.push_back(sample_mask(pattern, row, ratio, mean_span, rng, maskable));
    }
  }
  return plans;
}

NoisyBatch build_noisy_batch(const TokenBatch& x_orig, const std::vector<MaskPlan>& plans, const ProposalFn& propose,
                             Rng& rng) {
  NoisyBatch b = masked_batch(x_orig, plans);
  for (std::size_t r = 0; r < x_orig.rows; ++r) {
    const std::size_t count = plans[r].count();
    if (count == 0) continue;
    const TokenSeq tokens = propose(r, b.x_masked.row(r), plans[r], rng);
    if (tokens.size() != count) {
      throw ContractError("proposal returned " + std::to_string(tokens.size()) + " tokens for " +
                          std::to_string(count) + " masked positions");
    }
    std::size_t k = 0;
    for (std::size_t c = 0; c < plans[r].flags.size(); ++c) {
      if (plans[r].flags[c]) b.x_noise.ids[r * x_orig.cols + c] = tokens[k++];
    }
  }
  finish_noisy_batch(b);
  return b;
}

template <class Real>
ProposalFn model_proposal(const Model<Real>& model, double temperature) {
  return [&model, temperature](std::size_t, std::span<const TokenId> masked_row, const MaskPlan& plan, Rng& rng) {
    NoGradScope<Real> no_grad;
    const TokenBatch one = TokenBatch::from_rows({TokenSeq(masked_row.begin(), masked_row.end())});
    const auto rows = flagged_rows(plan.flags);
    const Tensor<Real> logits = model.mlm_logits(model.aux_hidden(one), rows);
    const std::size_t v = logits.dim(1);
    TokenSeq out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.push_back(sample_categorical(logits.data().subspan(i * v, v), temperature, rng));
    }
    return out;
  };
}

template <class Real>
NoisyBatch build_noisy_batch(const TokenBatch& x_orig, const std::vector<MaskPlan>& plans, const Model<Real>& model,
                             Rng& rng, const ForwardPass<Real>& pass, Tensor<Real>* mlm_logits, double temperature) {
  NoisyBatch b = masked_batch(x_orig, plans);
  const auto rows = flagged_rows(b.mask);
  if (!rows.empty()) {
    const Tensor<Real> logits = model.mlm_logits(model.aux_hidden(b.x_masked, pass), rows);
    const std::size_t v = logits.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      b.x_noise.ids[static_cast<std::size_t>(rows[i])] =
          sample_categorical(logits.data().subspan(i * v, v), temperature, rng);
    }
    if (mlm_logits) *mlm_logits = logits;
  } else if (mlm_logits) {
    *mlm_logits = Tensor<Real>();
  }
  finish_noisy_batch(b);
  return b;
}

SequenceTarget build_decoder_target(std::span<const TokenId> x_orig, const MaskPlan& plan, TargetVariant variant,
                                    bool diagnostic) {
  if (plan.flags.size() != x_orig.size()) {
    throw ContractError("mask plan covers " + std::to_string(plan.flags.size()) + " positions but the sequence has " +
                        std::to_string(x_orig.size()));
  }
  SequenceTarget t;
  switch (variant) {
    case TargetVariant::masked_only:
      if (!diagnostic) {
        throw ConfigError(
            "model.target_variant=masked_only is an ill-formed decoding target (its alignment with the input is "
            "ambiguous); it is only available with train.diagnostic=true");
      }
      for (std::size_t i = 0; i < x_orig.size(); ++i) {
        if (plan.flags[i]) t.decoder_target.push_back(x_orig[i]);
      }
      t.loss_mask.assign(t.decoder_target.size(), 1);
      break;
    case TargetVariant::all_tokens:
      t.decoder_target.assign(x_orig.begin(), x_orig.end());
      t.loss_mask.assign(x_orig.size(), 1);
      break;
    case TargetVariant::all_tokens_masked_loss:
      t.decoder_target.assign(x_orig.begin(), x_orig.end());
      t.loss_mask = plan.flags;
      break;
  }
  if (!t.decoder_target.empty()) {
    t.decoder_input.push_back(kBos);
    t.decoder_input.insert(t.decoder_input.end(), t.decoder_target.begin(), t.decoder_target.end() - 1);
  }
  return t;
}

TargetSpec targets_from_sequences(const std::vector<SequenceTarget>& rows, TargetVariant variant) {
  std::vector<TokenSeq> inputs, targets;
  for (const auto& r : rows) {
    inputs.push_back(r.decoder_input);
    targets.push_back(r.decoder_target);
  }
  TargetSpec spec;
  spec.variant = variant;
  spec.decoder_input = TokenBatch::from_rows(inputs, 1);
  spec.decoder_target = TokenBatch::from_rows(targets, 1);
  spec.loss_mask.assign(spec.decoder_target.ids.size(), 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(rows[r].loss_mask.begin(), rows[r].loss_mask.end(),
              spec.loss_mask.begin() + static_cast<std::ptrdiff_t>(r * spec.decoder_target.cols));
  }
  return spec;
}

TargetSpec build_decoder_targets(const NoisyBatch& batch, TargetVariant variant, bool diagnostic) {
  std::vector<SequenceTarget> rows;
  for (std::size_t r = 0; r < batch.x_orig.rows; ++r) {
    rows.push_back(build_decoder_target(batch.x_orig.row(r), batch.plans[r], variant, diagnostic));
  }
  return targets_from_sequences(rows, variant);
}

SpanCorruptionBatch build_span_corruption_batch(const TokenBatch& x_orig, const std::vector<MaskPlan>& plans,
                                                const SentinelRange& sentinels, T5Target target_kind) {
  if (plans.size() != x_orig.rows) throw ContractError("one mask plan per row is required");
  std::vector<TokenSeq> inputs;
  std::vector<SequenceTarget> targets;
  for (std::size_t r = 0; r < x_orig.rows; ++r) {
    const auto row = x_orig.row(r);
    SpanCorruption c = apply_span_corruption(row, plans[r], sentinels);
    inputs.push_back(std::move(c.encoder_input));
    SequenceTarget t;
    t.decoder_target = target_kind == T5Target::sentinel ? std::move(c.target) : TokenSeq(row.begin(), row.end());
    t.loss_mask.assign(t.decoder_target.size(), 1);
    t.decoder_input.push_back(kBos);
    t.decoder_input.insert(t.decoder_input.end(), t.decoder_target.begin(), t.decoder_target.end() - 1);
    targets.push_back(std::move(t));
  }
  return {TokenBatch::from_rows(inputs, 1), targets_from_sequences(targets, TargetVariant::all_tokens)};
}

double RtdStats::accuracy_masked() const {
  return masked ? static_cast<double>(masked_correct) / static_cast<double>(masked) : 0.0;
}
double RtdStats::accuracy_unmasked() const {
  return unmasked ? static_cast<double>(unmasked_correct) / static_cast<double>(unmasked) : 0.0;
}
double RtdStats::precision() const {
  return predicted_replaced ? static_cast<double>(true_positive) / static_cast<double>(predicted_replaced) : 0.0;
}
double RtdStats::recall_masked() const {
  return masked_replaced ? static_cast<double>(masked_true_positive) / static_cast<double>(masked_replaced) : 0.0;
}
double RtdStats::majority_baseline_masked() const {
  if (!masked) return 0.0;
  return static_cast<double>(std::max(masked_replaced, masked - masked_replaced)) / static_cast<double>(masked);
}

RtdStats& RtdStats::operator+=(const RtdStats& o) {
  masked += o.masked;
  masked_replaced += o.masked_replaced;
  masked_correct += o.masked_correct;
  unmasked += o.unmasked;
  unmasked_correct += o.unmasked_correct;
  predicted_replaced += o.predicted_replaced;
  true_positive += o.true_positive;
  masked_true_positive += o.masked_true_positive;
  return *this;
}

template <class Real>
RtdStats rtd_statistics(const NoisyBatch& batch, const Tensor<Real>& rtd_logits) {
  RtdStats s;
  if (!rtd_logits.defined()) return s;
  if (rtd_logits.numel() != batch.x_orig.ids.size()) {
    throw DimensionError("RTD logits " + shape_str(rtd_logits.shape()) + " do not cover a batch of " +
                         std::to_string(batch.x_orig.ids.size()) + " positions");
  }
  const auto logits = rtd_logits.data();
  for (std::size_t r = 0; r < batch.x_orig.rows; ++r) {
    for (std::size_t c = 0; c < batch.x_orig.lengths[r]; ++c) {
      const std::size_t i = r * batch.x_orig.cols + c;
      const bool pred = logits[i] > Real(0);
      const bool label = batch.replaced[i] != 0;
      s.predicted_replaced += pred;
      s.true_positive += pred && label;
      if (batch.mask[i]) {
        ++s.masked;
        s.masked_replaced += label;
        s.masked_correct += pred == label;
        s.masked_true_positive += pred && label;
      } else {
        ++s.unmasked;
        s.unmasked_correct += pred == label;
      }
    }
  }
  return s;
}

template <class Real>
LossBreakdown LossTerms<Real>::breakdown() const {
  LossBreakdown b;
  b.l_mlm = l_mlm.defined() ? static_cast<double>(l_mlm.item()) : 0.0;
  b.l_rtd = l_rtd.defined() ? static_cast<double>(l_rtd.item()) : 0.0;
  b.l_clm = l_clm.defined() ? static_cast<double>(l_clm.item()) : 0.0;
  b.combined = combined.defined() ? static_cast<double>(combined.item()) : 0.0;
  return b;
}

template <class Real>
LossTerms<Real> compute_losses(const NoisyBatch& batch, const TargetSpec& target, const Tensor<Real>& mlm_logits,
                               const Tensor<Real>& rtd_logits, const Tensor<Real>& clm_logits, double lambda_rtd,
                               double lambda_clm) {
  require_lambdas(lambda_rtd, lambda_clm);
  LossTerms<Real> t;
  const auto mlm_rows = flagged_rows(batch.mask);
  if (mlm_rows.empty()) {
    t.l_mlm = zero_loss<Real>();
  } else {
    if (!mlm_logits.defined() || mlm_logits.dim(0) != mlm_rows.size()) {
      throw DimensionError("MLM logits must have one row per masked position (" + std::to_string(mlm_rows.size()) +
                           ")");
    }
    const auto targets = gather_ids(batch.x_orig.ids, mlm_rows);
    const std::vector<std::uint8_t> all(targets.size(), 1);
    t.l_mlm = softmax_cross_entropy(mlm_logits, std::span<const TokenId>(targets), std::span<const std::uint8_t>(all));
  }
  if (rtd_logits.defined()) {
    if (rtd_logits.numel() != batch.x_orig.ids.size()) {
      throw DimensionError("RTD logits " + shape_str(rtd_logits.shape()) + " do not cover the batch");
    }
    const auto valid = batch.x_orig.valid_mask();
    t.l_rtd = binary_cross_entropy_with_logits(rtd_logits, std::span<const std::uint8_t>(batch.replaced),
                                               std::span<const std::uint8_t>(valid));
  }
  const auto clm_rows = flagged_rows(target.loss_mask);
  if (clm_rows.empty()) {
    t.l_clm = zero_loss<Real>();
  } else {
    if (!clm_logits.defined() || clm_logits.dim(0) != clm_rows.size()) {
      throw DimensionError("CLM logits must have one row per loss-mask position (" + std::to_string(clm_rows.size()) +
                           ")");
    }
    const auto targets = gather_ids(target.decoder_target.ids, clm_rows);
    const std::vector<std::uint8_t> all(targets.size(), 1);
    t.l_clm = softmax_cross_entropy(clm_logits, std::span<const TokenId>(targets), std::span<const std::uint8_t>(all));
  }
  std::vector<Tensor<Real>> terms{t.l_mlm, t.l_clm};
  std::vector<Real> weights{Real(1), static_cast<Real>(lambda_clm)};
  if (t.l_rtd.defined()) {
    terms.push_back(t.l_rtd);
    weights.push_back(static_cast<Real>(lambda_rtd));
  }
  t.combined = weighted_sum(std::span<const Tensor<Real>>(terms), std::span<const Real>(weights));
  return t;
}

namespace {

template <class Real>
LossTerms<Real> main_model_losses(const Model<Real>& model, const NoisyBatch& batch, const TargetSpec& target,
                                  const Tensor<Real>& mlm_logits, const ObjectiveOptions& options,
                                  const ForwardPass<Real>& pass, RtdStats* stats) {
  const auto& cfg = model.config();
  const Tensor<Real> enc = model.encode(batch.x_noise, pass);
  const Tensor<Real> dec = model.decode(enc, batch.x_noise, target.decoder_input, pass);
  auto rtd_head = [&] {
    if (cfg.rtd_location == RtdLocation::encoder) return model.rtd_logits(enc);
    if (target.variant == TargetVariant::masked_only || target.decoder_input.cols != batch.x_noise.cols) {
      throw ConfigError("model.rtd_location=decoder needs a decoder target aligned with the encoder input");
    }
    return model.rtd_logits(dec);
  };
  Tensor<Real> rtd;
  if (options.lambda_rtd > 0.0) {
    rtd = rtd_head();
    if (stats) *stats = rtd_statistics(batch, rtd);
  } else if (stats) {
    NoGradScope<Real> no_grad;
    *stats = rtd_statistics(batch, rtd_head());
  }
  const auto rows = flagged_rows(target.loss_mask);
  const Tensor<Real> clm = rows.empty() ? Tensor<Real>() : model.clm_logits(dec, rows);
  return compute_losses(batch, target, mlm_logits, rtd, clm, options.lambda_rtd, options.lambda_clm);
}

}  // namespace

template <class Real>
LossTerms<Real> metro_losses(const Model<Real>& model, const NoisyBatch& batch, const TargetSpec& target,
                             const ObjectiveOptions& options, const ForwardPass<Real>& pass, RtdStats* stats) {
  require_lambdas(options.lambda_rtd, options.lambda_clm);
  const auto rows = flagged_rows(batch.mask);
  Tensor<Real> mlm;
  if (!rows.empty()) mlm = model.mlm_logits(model.aux_hidden(batch.x_masked, pass), rows);
  return main_model_losses(model, batch, target, mlm, options, pass, stats);
}

template <class Real>
LossTerms<Real> metro_objective(const Model<Real>& model, const TokenBatch& x_orig, const ObjectiveOptions& options,
                                Rng& rng, const ForwardPass<Real>& pass, MetroStepOutput* out, RtdStats* stats) {
  require_lambdas(options.lambda_rtd, options.lambda_clm);
  const auto& cfg = model.config();
  auto plans = sample_batch_plans(x_orig, cfg.masking_kind, cfg.mask_ratio, cfg.mean_span, rng);
  Tensor<Real> mlm;
  NoisyBatch batch = build_noisy_batch(x_orig, plans, model, rng, pass, &mlm);
  TargetSpec target = build_decoder_targets(batch, cfg.target_variant, options.diagnostic);
  auto terms = main_model_losses(model, batch, target, mlm, options, pass, stats);
  if (out) *out = MetroStepOutput{std::move(batch), std::move(target)};
  return terms;
}

template <class Real>
Tensor<Real> seq2seq_loss(const Model<Real>& model, const TokenBatch& encoder_input, const TargetSpec& target,
                          const ForwardPass<Real>& pass) {
  const auto rows = flagged_rows(target.loss_mask);
  if (rows.empty()) return zero_loss<Real>();
  const Tensor<Real> enc = model.encode(encoder_input, pass);
  const Tensor<Real> dec = model.decode(enc, encoder_input, target.decoder_input, pass);
  const Tensor<Real> logits = model.clm_logits(dec, rows);
  const auto targets = gather_ids(target.decoder_target.ids, rows);
  const std::vector<std::uint8_t> all(targets.size(), 1);
  return softmax_cross_entropy(logits, std::span<const TokenId>(targets), std::span<const std::uint8_t>(all));
}

double AmbiguityReport::rate() const {
  return colliding_pairs ? static_cast<double>(ambiguous_pairs) / static_cast<double>(colliding_pairs) : 0.0;
}

double AmbiguityReport::mask_divergence_rate() const {
  return colliding_pairs ? static_cast<double>(mask_divergent_pairs) / static_cast<double>(colliding_pairs) : 0.0;
}

AmbiguityReport detect_target_ambiguity(const std::vector<TokenSeq>& corpus, const ProposalFn& propose,
                                        TargetVariant variant, std::size_t trials, Rng& rng,
                                        const MaskableFn& maskable) {
  if (corpus.empty()) throw DataError("ambiguity diagnosis needs a non-empty corpus");
  struct Outcome {
    TokenSeq target;
    std::vector<std::uint8_t> loss_mask;
  };
  // (source, encoder input) -> distinct (flags, replacements) draws and their targets.
  std::map<std::pair<std::size_t, TokenSeq>, std::map<std::pair<std::vector<std::uint8_t>, TokenSeq>, Outcome>> groups;
  AmbiguityReport report;
  report.variant = variant;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t source = static_cast<std::size_t>(rng.below(corpus.size()));
    const TokenSeq& seq = corpus[source];
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (maskable(seq[i])) positions.push_back(i);
    }
    if (positions.size() < 2) continue;
    const std::size_t k = 1 + static_cast<std::size_t>(rng.below(positions.size() - 1));
    for (std::size_t i = 0; i < k; ++i) std::swap(positions[i], positions[i + rng.below(positions.size() - i)]);
    MaskPlan plan{std::vector<std::uint8_t>(seq.size(), 0), static_cast<double>(k) / seq.size(), MaskPattern::iid};
    for (std::size_t i = 0; i < k; ++i) plan.flags[positions[i]] = 1;
    const TokenSeq masked = apply_mask(seq, plan);
    const TokenSeq replacements = propose(source, masked, plan, rng);
    if (replacements.size() != k) throw ContractError("proposal size does not match the mask");
    TokenSeq noisy = seq;
    std::size_t j = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (plan.flags[i]) noisy[i] = replacements[j++];
    }
    SequenceTarget target = build_decoder_target(seq, plan, variant, true);
    groups[{source, noisy}].emplace(std::make_pair(plan.flags, replacements),
                                    Outcome{std::move(target.decoder_target), std::move(target.loss_mask)});
    ++report.draws;
  }
  for (const auto& [key, draws] : groups) {
    std::vector<const Outcome*> outcomes;
    for (const auto& [draw, outcome] : draws) outcomes.push_back(&outcome);
    for (std::size_t a = 0; a < outcomes.size(); ++a) {
      for (std::size_t b = a + 1; b < outcomes.size(); ++b) {
        ++report.colliding_pairs;
        if (outcomes[a]->target != outcomes[b]->target) {
          ++report.ambiguous_pairs;
        } else if (outcomes[a]->loss_mask != outcomes[b]->loss_mask) {
          ++report.mask_divergent_pairs;
        }
      }
    }
  }
  return report;
}

ProposalFn unigram_proposal(const std::vector<TokenSeq>& corpus) {
  std::map<TokenId, std::size_t> counts;
  for (const auto& seq : corpus) {
    for (TokenId id : seq) ++counts[id];
  }
  std::vector<TokenId> ids;
  std::vector<double> cumulative;
  double total = 0;
  for (const auto& [id, n] : counts) {
    ids.push_back(id);
    total += static_cast<double>(n);
    cumulative.push_back(total);
  }
  if (ids.empty()) throw DataError("unigram proposal needs at least one token");
  return [ids, cumulative, total](std::size_t, std::span<const TokenId>, const MaskPlan& plan, Rng& rng) {
    TokenSeq out;
    for (std::size_t i = 0; i < plan.count(); ++i) {
      const double u = rng.uniform() * total;
      const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
      out.push_back(ids[std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), ids.size() - 1)]);
    }
    return out;
  };
}

#define METROLAB_INSTANTIATE_OBJECTIVES(Real)                                                                        \
  template ProposalFn model_proposal<Real>(const Model<Real>&, double);                                              \
  template NoisyBatch build_noisy_batch<Real>(const TokenBatch&, const std::vector<MaskPlan>&, const Model<Real>&,   \
                                              Rng&, const ForwardPass<Real>&, Tensor<Real>*, double);                \
  template RtdStats rtd_statistics<Real>(const NoisyBatch&, const Tensor<Real>&);                                     \
  template struct LossTerms<Real>;                                                                                    \
  template LossTerms<Real> compute_losses<Real>(const NoisyBatch&, const TargetSpec&, const Tensor<Real>&,           \
                                                const Tensor<Real>&, const Tensor<Real>&, double, double);           \
  template LossTerms<Real> metro_losses<Real>(const Model<Real>&, const NoisyBatch&, const TargetSpec&,               \
                                              const ObjectiveOptions&, const ForwardPass<Real>&, RtdStats*);         \
  template LossTerms<Real> metro_objective<Real>(const Model<Real>&, const TokenBatch&, const ObjectiveOptions&,      \
                                                 Rng&, const ForwardPass<Real>&, MetroStepOutput*, RtdStats*);       \
  template Tensor<Real> seq2seq_loss<Real>(const Model<Real>&, const TokenBatch&, const TargetSpec&,                  \
                                           const ForwardPass<Real>&);

METROLAB_INSTANTIATE_OBJECTIVES(float)
METROLAB_INSTANTIATE_OBJECTIVES(double)

}  // namespace metrolab
