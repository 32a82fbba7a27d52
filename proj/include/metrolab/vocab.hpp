// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "metrolab/types.hpp"

namespace metrolab {

enum class VocabMode { character, word, unigram };

std::string_view vocab_mode_name(VocabMode mode);
VocabMode parse_vocab_mode(std::string_view name);

// Reserved ids occupy the bottom of the id space, in this order, followed by the
// sentinel block and then corpus tokens.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kMask = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr TokenId kFirstSentinel = 5;

struct SentinelRange {
  TokenId first = kFirstSentinel;
  std::size_t count = 0;

  TokenId id(std::size_t k) const { return first + static_cast<TokenId>(k); }
  bool contains(TokenId id) const {
    return id >= first && id < first + static_cast<TokenId>(count);
  }
};

/// Token <-> id bijection.
class Vocab {
 public:
  Vocab() = default;

  /// Frequency-ranked vocabulary; ties break lexicographically. size_cap limits the
  /// number of corpus tokens (0 = unlimited) and is required in unigram mode.
  static Vocab build(const std::vector<std::string>& documents, VocabMode mode,
                     std::size_t size_cap, std::size_t num_sentinels);

  /// Explicit token list, in id order after the reserved block.
  static Vocab from_tokens(std::vector<std::string> tokens, VocabMode mode,
                           std::size_t num_sentinels);

  /// One corpus token per line; line i holds id num_reserved() + i.
  static Vocab load(const std::filesystem::path& path, VocabMode mode, std::size_t num_sentinels);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t num_reserved() const { return static_cast<std::size_t>(kFirstSentinel) + sentinels_.count; }
  SentinelRange sentinels() const { return sentinels_; }
  VocabMode mode() const { return mode_; }

  /// kUnk for unknown tokens.
  TokenId id_of(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  std::vector<std::string> split(std::string_view text) const;
  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  /// Positions holding these ids may be masked: everything except PAD, MASK, BOS,
  /// EOS and sentinels. UNK stands in for real text and stays maskable.
  bool maskable(TokenId id) const;
  std::function<bool(TokenId)> maskable_fn() const;

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void index_tokens();

  VocabMode mode_ = VocabMode::word;
  SentinelRange sentinels_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// UTF-8 text, one document per line. Blank lines are ignored; a file with no
/// documents is a DataError.
std::vector<std::string> load_corpus(const std::filesystem::path& path);

Vocab build_vocab(const std::filesystem::path& corpus_path, VocabMode mode, std::size_t size_cap,
                  std::size_t num_sentinels);

}  // namespace metrolab
