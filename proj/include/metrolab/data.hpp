// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metrolab/types.hpp"
#include "metrolab/vocab.hpp"

namespace metrolab {

using TokenSeq = std::vector<TokenId>;

/// Row-major [rows x cols] id matrix, right-padded with kPad.
struct TokenBatch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> ids;
  std::vector<std::size_t> lengths;

  std::span<const TokenId> row(std::size_t r) const {
    return {ids.data() + r * cols, lengths[r]};
  }
  TokenId at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  std::vector<std::uint8_t> valid_mask() const;
  std::size_t num_tokens() const;

  static TokenBatch from_rows(const std::vector<TokenSeq>& rows, std::size_t min_cols = 0);
};

struct PackStats {
  std::size_t documents = 0;
  std::size_t skipped_short = 0;
  std::size_t sequences = 0;
};

inline constexpr std::size_t kMinDocumentTokens = 4;

/// Greedy packing in corpus order. A sequence boundary always falls on a document
/// boundary unless the document itself exceeds seq_len, in which case it is chunked.
std::vector<TokenSeq> pack_documents(const std::vector<TokenSeq>& documents, std::size_t seq_len,
                                     PackStats* stats = nullptr);

/// Endless batch stream over packed sequences. The order within epoch e is a
/// permutation derived only from (seed, e); the final batch of an epoch may be short.
class BatchIterator {
 public:
  BatchIterator(std::vector<TokenSeq> sequences, std::size_t batch_size, std::uint64_t seed);

  TokenBatch next();
  /// Jump to the state after `batches` calls to next() from construction.
  void seek(std::uint64_t batches);

  std::uint64_t consumed() const { return consumed_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const;
  const std::vector<TokenSeq>& sequences() const { return sequences_; }

 private:
  void start_epoch(std::size_t epoch);

  std::vector<TokenSeq> sequences_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::uint64_t consumed_ = 0;
};

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch);

BatchIterator make_batch_iterator(const std::vector<std::string>& corpus, const Vocab& vocab,
                                  std::size_t seq_len, std::size_t batch_size, std::uint64_t seed,
                                  PackStats* stats = nullptr);

}  // namespace metrolab
