// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "metrolab/data.hpp"
#include "metrolab/rng.hpp"
#include "metrolab/vocab.hpp"

namespace metrolab {

enum class MaskPattern { iid, span };

std::string_view mask_pattern_name(MaskPattern pattern);
MaskPattern parse_mask_pattern(std::string_view name);

struct MaskPlan {
  std::vector<std::uint8_t> flags;
  double ratio = 0.0;
  MaskPattern pattern = MaskPattern::iid;

  std::size_t count() const;
  std::size_t num_runs() const;
};

using MaskableFn = std::function<bool(TokenId)>;

/// Ids at or above kUnk; callers holding a Vocab should prefer Vocab::maskable_fn,
/// which also excludes sentinels.
bool default_maskable(TokenId id);

inline constexpr std::size_t kMaxSpanLength = 10;

/// Number of positions to mask among n maskable ones: round(ratio * n), at least 1.
std::size_t mask_budget(std::size_t n_maskable, double ratio);

/// Exactly mask_budget positions, uniformly without replacement.
MaskPlan sample_iid_mask(std::span<const TokenId> seq, double ratio, Rng& rng,
                         const MaskableFn& maskable = default_maskable);

/// Same budget split into round(budget / mean_span) spans of random length (each at
/// most kMaxSpanLength), separated by at least one unmasked maskable position.
MaskPlan sample_span_mask(std::span<const TokenId> seq, double ratio, double mean_span, Rng& rng,
                          const MaskableFn& maskable = default_maskable);

MaskPlan sample_mask(MaskPattern pattern, std::span<const TokenId> seq, double ratio, double mean_span,
                     Rng& rng, const MaskableFn& maskable = default_maskable);

TokenSeq apply_mask(std::span<const TokenId> seq, const MaskPlan& plan);

struct SpanCorruption {
  TokenSeq encoder_input;
  TokenSeq target;
};

/// Each maximal masked run becomes the next sentinel; the target lists
/// [sentinel_k, run_k...] for every run and ends with kEos.
SpanCorruption apply_span_corruption(std::span<const TokenId> seq, const MaskPlan& plan,
                                     const SentinelRange& sentinels);

/// Empirical flag statistics over repeated draws on an all-maskable sequence.
struct MaskDependence {
  std::size_t draws = 0;
  std::size_t length = 0;
  double marginal = 0.0;        // P(flags[i])
  double conditional = 0.0;     // P(flags[i] | flags[i-1])
  double lift = 0.0;            // conditional / marginal
  double adjacent_correlation = 0.0;
  std::vector<double> position_frequency;
};

MaskDependence measure_mask_dependence(MaskPattern pattern, std::size_t length, double ratio,
                                       double mean_span, std::size_t draws, Rng& rng);

}  // namespace metrolab
