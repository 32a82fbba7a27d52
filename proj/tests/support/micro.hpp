// SPDX-License-Identifier: Apache-2.0
//
// Small fixtures shared by model-level tests.
#pragma once

#include <vector>

#include "metrolab/config.hpp"
#include "metrolab/data.hpp"
#include "metrolab/rng.hpp"
#include "metrolab/vocab.hpp"

namespace metrolab::testing {

/// d_model 8, two encoder and decoder layers, one auxiliary layer, 37 ids.
inline ModelConfig micro_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.aux_layers = 1;
  c.vocab_size = 37;
  c.max_abs_positions = 20;
  c.rel_buckets = 8;
  c.rel_max_distance = 16;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

/// Rows of random regular ids (never reserved or sentinel ids) with the given lengths.
inline TokenBatch random_batch(const std::vector<std::size_t>& lengths, std::size_t vocab, std::uint64_t seed,
                               TokenId first_regular = kFirstSentinel + 4) {
  Rng rng(seed);
  std::vector<TokenSeq> rows;
  for (std::size_t n : lengths) {
    TokenSeq row(n);
    for (auto& id : row) id = first_regular + static_cast<TokenId>(rng.below(vocab - first_regular));
    rows.push_back(row);
  }
  return TokenBatch::from_rows(rows);
}

}  // namespace metrolab::testing
