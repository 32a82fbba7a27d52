// SPDX-License-Identifier: Apache-2.0
#include "metrolab/data.hpp"

#include <algorithm>
#include <numeric>

#include "metrolab/errors.hpp"
#include "metrolab/rng.hpp"

namespace metrolab {

std::vector<std::uint8_t> TokenBatch::valid_mask() const {
  std::vector<std::uint8_t> mask(rows * cols, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(r * cols), lengths[r], std::uint8_t{1});
  }
  return mask;
}

std::size_t TokenBatch::num_tokens() const {
  return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
}

TokenBatch TokenBatch::from_rows(const std::vector<TokenSeq>& rows, std::size_t min_cols) {
  TokenBatch b;
  b.rows = rows.size();
  b.cols = min_cols;
  for (const auto& r : rows) b.cols = std::max(b.cols, r.size());
  b.ids.assign(b.rows * b.cols, kPad);
  b.lengths.resize(b.rows);
  for (std::size_t r = 0; r < b.rows; ++r) {
    std::copy(rows[r].begin(), rows[r].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.cols));
    b.lengths[r] = rows[r].size();
  }
  return b;
}

std::vector<TokenSeq> pack_documents(const std::vector<TokenSeq>& documents, std::size_t seq_len,
                                     PackStats* stats) {
  if (seq_len < 8) throw ContractError("sequence length must be at least 8, got " + std::to_string(seq_len));
  PackStats local;
  std::vector<TokenSeq> out;
  TokenSeq current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (const auto& doc : documents) {
    if (doc.size() < kMinDocumentTokens) {
      ++local.skipped_short;
      continue;
    }
    ++local.documents;
    if (doc.size() > seq_len) {
      flush();
      std::size_t start = 0;
      for (; start + seq_len <= doc.size(); start += seq_len) {
        out.emplace_back(doc.begin() + static_cast<std::ptrdiff_t>(start),
                         doc.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
      }
      current.assign(doc.begin() + static_cast<std::ptrdiff_t>(start), doc.end());
      continue;
    }
    if (current.size() + doc.size() > seq_len) flush();
    current.insert(current.end(), doc.begin(), doc.end());
  }
  flush();
  local.sequences = out.size();
  if (stats) *stats = local;
  return out;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, 0x5eedull * 1000003ull + epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

BatchIterator::BatchIterator(std::vector<TokenSeq> sequences, std::size_t batch_size, std::uint64_t seed)
    : sequences_(std::move(sequences)), batch_size_(batch_size), seed_(seed) {
  if (batch_size_ == 0) throw ContractError("batch size must be positive");
  if (sequences_.empty()) throw DataError("no sequences to batch (corpus too small or all documents skipped)");
  start_epoch(0);
}

void BatchIterator::start_epoch(std::size_t epoch) {
  epoch_ = epoch;
  cursor_ = 0;
  order_ = epoch_permutation(sequences_.size(), seed_, epoch);
}

std::size_t BatchIterator::batches_per_epoch() const {
  return (sequences_.size() + batch_size_ - 1) / batch_size_;
}

TokenBatch BatchIterator::next() {
  if (cursor_ >= order_.size()) start_epoch(epoch_ + 1);
  const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
  std::vector<TokenSeq> rows;
  rows.reserve(end - cursor_);
  for (std::size_t i = cursor_; i < end; ++i) rows.push_back(sequences_[order_[i]]);
  cursor_ = end;
  ++consumed_;
  return TokenBatch::from_rows(rows);
}

void BatchIterator::seek(std::uint64_t batches) {
  const std::size_t per_epoch = batches_per_epoch();
  const auto epoch = static_cast<std::size_t>(batches / per_epoch);
  const auto within = static_cast<std::size_t>(batches % per_epoch);
  if (within == 0 && batches > 0) {
    start_epoch(epoch - 1);
    cursor_ = order_.size();
  } else {
    start_epoch(epoch);
    cursor_ = std::min(within * batch_size_, order_.size());
  }
  consumed_ = batches;
}

BatchIterator make_batch_iterator(const std::vector<std::string>& corpus, const Vocab& vocab,
                                  std::size_t seq_len, std::size_t batch_size, std::uint64_t seed,
                                  PackStats* stats) {
  std::vector<TokenSeq> docs;
  docs.reserve(corpus.size());
  for (const auto& line : corpus) docs.push_back(vocab.encode(line));
  return BatchIterator(pack_documents(docs, seq_len, stats), batch_size, seed);
}

}  // namespace metrolab
