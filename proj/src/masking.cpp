// SPDX-License-Identifier: Apache-2.0
#include "metrolab/masking.hpp"

#include <algorithm>
#include <cmath>

#include "metrolab/errors.hpp"

namespace metrolab {
namespace {

std::vector<std::size_t> maskable_positions(std::span<const TokenId> seq, const MaskableFn& maskable) {
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (maskable(seq[i])) positions.push_back(i);
  }
  if (positions.size() < 2) {
    throw DegenerateInputError("sequence has " + std::to_string(positions.size()) +
                               " maskable tokens; at least 2 are required");
  }
  return positions;
}

void check_ratio(double ratio) {
  if (!(ratio > 0.0 && ratio < 0.5)) {
    throw ConfigError("masking ratio must lie in (0, 0.5), got " + std::to_string(ratio));
  }
}

// k sorted distinct values drawn uniformly from [0, n).
std::vector<std::size_t> sorted_sample(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

// Uniform composition of total into parts positive integers.
std::vector<std::size_t> positive_composition(std::size_t total, std::size_t parts, Rng& rng) {
  const auto cuts = sorted_sample(total - 1, parts - 1, rng);
  std::vector<std::size_t> out;
  std::size_t prev = 0;
  for (std::size_t c : cuts) {
    out.push_back(c + 1 - prev);
    prev = c + 1;
  }
  out.push_back(total - prev);
  return out;
}

// Uniform composition of total into parts non-negative integers.
std::vector<std::size_t> nonnegative_composition(std::size_t total, std::size_t parts, Rng& rng) {
  auto out = positive_composition(total + parts, parts, rng);
  for (auto& v : out) --v;
  return out;
}

}  // namespace

std::string_view mask_pattern_name(MaskPattern pattern) {
  return pattern == MaskPattern::span ? "span" : "iid";
}

MaskPattern parse_mask_pattern(std::string_view name) {
  if (name == "iid") return MaskPattern::iid;
  if (name == "span") return MaskPattern::span;
  throw ConfigError("unknown mask pattern '" + std::string(name) + "' (expected iid or span)");
}

std::size_t MaskPlan::count() const {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), std::uint8_t{1}));
}

std::size_t MaskPlan::num_runs() const {
  std::size_t runs = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i] && (i == 0 || !flags[i - 1])) ++runs;
  }
  return runs;
}

bool default_maskable(TokenId id) { return id >= kUnk; }

std::size_t mask_budget(std::size_t n_maskable, double ratio) {
  const auto rounded = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_maskable)));
  return std::max<std::size_t>(1, rounded);
}

MaskPlan sample_iid_mask(std::span<const TokenId> seq, double ratio, Rng& rng, const MaskableFn& maskable) {
  check_ratio(ratio);
  const auto positions = maskable_positions(seq, maskable);
  const std::size_t budget = mask_budget(positions.size(), ratio);
  MaskPlan plan{std::vector<std::uint8_t>(seq.size(), 0), ratio, MaskPattern::iid};
  for (std::size_t idx : sorted_sample(positions.size(), budget, rng)) plan.flags[positions[idx]] = 1;
  return plan;
}

MaskPlan sample_span_mask(std::span<const TokenId> seq, double ratio, double mean_span, Rng& rng,
                          const MaskableFn& maskable) {
  check_ratio(ratio);
  if (!(mean_span >= 2.0)) throw ConfigError("mean span length must be at least 2");
  const auto positions = maskable_positions(seq, maskable);
  const std::size_t m = positions.size();
  const std::size_t budget = mask_budget(m, ratio);
  const std::size_t unmasked = m - budget;

  std::size_t spans = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(static_cast<double>(budget) / mean_span)));
  spans = std::max(spans, (budget + kMaxSpanLength - 1) / kMaxSpanLength);
  spans = std::min({spans, budget, unmasked + 1});

  std::vector<std::size_t> lengths;
  for (int attempt = 0; attempt < 64; ++attempt) {
    lengths = positive_composition(budget, spans, rng);
    if (*std::max_element(lengths.begin(), lengths.end()) <= kMaxSpanLength) break;
  }
  if (*std::max_element(lengths.begin(), lengths.end()) > kMaxSpanLength) {
    for (std::size_t k = 0; k < spans; ++k) lengths[k] = budget / spans + (k < budget % spans ? 1 : 0);
  }

  // Gaps: leading and trailing may be empty, interior gaps hold at least one token.
  auto gaps = nonnegative_composition(unmasked - (spans - 1), spans + 1, rng);
  for (std::size_t k = 1; k < spans; ++k) ++gaps[k];

  MaskPlan plan{std::vector<std::uint8_t>(seq.size(), 0), ratio, MaskPattern::span};
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < spans; ++k) {
    cursor += gaps[k];
    for (std::size_t j = 0; j < lengths[k]; ++j) plan.flags[positions[cursor++]] = 1;
  }
  return plan;
}

MaskPlan sample_mask(MaskPattern pattern, std::span<const TokenId> seq, double ratio, double mean_span,
                     Rng& rng, const MaskableFn& maskable) {
  return pattern == MaskPattern::span ? sample_span_mask(seq, ratio, mean_span, rng, maskable)
                                      : sample_iid_mask(seq, ratio, rng, maskable);
}

TokenSeq apply_mask(std::span<const TokenId> seq, const MaskPlan& plan) {
  if (plan.flags.size() != seq.size()) {
    throw ContractError("mask plan covers " + std::to_string(plan.flags.size()) +
                        " positions but the sequence has " + std::to_string(seq.size()));
  }
  TokenSeq out(seq.begin(), seq.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (plan.flags[i]) out[i] = kMask;
  }
  return out;
}

SpanCorruption apply_span_corruption(std::span<const TokenId> seq, const MaskPlan& plan,
                                     const SentinelRange& sentinels) {
  if (plan.flags.size() != seq.size()) {
    throw ContractError("mask plan covers " + std::to_string(plan.flags.size()) +
                        " positions but the sequence has " + std::to_string(seq.size()));
  }
  const std::size_t runs = plan.num_runs();
  if (runs > sentinels.count) {
    throw ConfigError("span corruption needs " + std::to_string(runs) + " sentinels but only " +
                      std::to_string(sentinels.count) + " are configured");
  }
  SpanCorruption out;
  std::size_t run = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!plan.flags[i]) {
      out.encoder_input.push_back(seq[i]);
      continue;
    }
    if (i == 0 || !plan.flags[i - 1]) {
      const TokenId s = sentinels.id(run++);
      out.encoder_input.push_back(s);
      out.target.push_back(s);
    }
    out.target.push_back(seq[i]);
  }
  out.target.push_back(kEos);
  return out;
}

MaskDependence measure_mask_dependence(MaskPattern pattern, std::size_t length, double ratio,
                                       double mean_span, std::size_t draws, Rng& rng) {
  MaskDependence d;
  d.draws = draws;
  d.length = length;
  d.position_frequency.assign(length, 0.0);
  const TokenSeq seq(length, kUnk + 1);
  double marked = 0, pairs_prev = 0, pairs_both = 0;
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0, npairs = 0;
  for (std::size_t t = 0; t < draws; ++t) {
    const MaskPlan plan = sample_mask(pattern, seq, ratio, mean_span, rng);
    for (std::size_t i = 0; i < length; ++i) {
      const double f = plan.flags[i];
      d.position_frequency[i] += f;
      marked += f;
      if (i == 0) continue;
      const double p = plan.flags[i - 1];
      pairs_prev += p;
      pairs_both += p * f;
      sx += p; sy += f; sxx += p * p; syy += f * f; sxy += p * f; npairs += 1;
    }
  }
  for (auto& f : d.position_frequency) f /= static_cast<double>(draws);
  d.marginal = marked / static_cast<double>(draws * length);
  d.conditional = pairs_prev > 0 ? pairs_both / pairs_prev : 0.0;
  d.lift = d.marginal > 0 ? d.conditional / d.marginal : 0.0;
  const double cov = sxy / npairs - (sx / npairs) * (sy / npairs);
  const double vx = sxx / npairs - (sx / npairs) * (sx / npairs);
  const double vy = syy / npairs - (sy / npairs) * (sy / npairs);
  d.adjacent_correlation = (vx > 0 && vy > 0) ? cov / std::sqrt(vx * vy) : 0.0;
  return d;
}

}  // namespace metrolab
