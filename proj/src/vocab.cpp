// SPDX-License-Identifier: Apache-2.0
#include "metrolab/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "metrolab/errors.hpp"

namespace metrolab {
namespace {

const char* const kReservedNames[] = {"[PAD]", "[M]", "[BOS]", "[EOS]", "[UNK]"};

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // stray continuation byte: keep it as its own symbol
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::string_view vocab_mode_name(VocabMode mode) {
  switch (mode) {
    case VocabMode::character: return "char";
    case VocabMode::word: return "word";
    case VocabMode::unigram: return "unigram-count-cap";
  }
  return "word";
}

VocabMode parse_vocab_mode(std::string_view name) {
  if (name == "char") return VocabMode::character;
  if (name == "word") return VocabMode::word;
  if (name == "unigram-count-cap" || name == "unigram") return VocabMode::unigram;
  throw ConfigError("unknown vocab mode '" + std::string(name) +
                    "' (expected char, word or unigram-count-cap)");
}

std::vector<std::string> Vocab::split(std::string_view text) const {
  std::vector<std::string> out;
  if (mode_ == VocabMode::character) {
    for (std::size_t i = 0; i < text.size();) {
      const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(text[i])), text.size() - i);
      if (text[i] != '\n' && text[i] != '\r') out.emplace_back(text.substr(i, len));
      i += len;
    }
    return out;
  }
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

Vocab Vocab::build(const std::vector<std::string>& documents, VocabMode mode, std::size_t size_cap,
                   std::size_t num_sentinels) {
  if (documents.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  if (mode == VocabMode::unigram && size_cap == 0) {
    throw ConfigError("unigram-count-cap vocabulary needs a positive size cap");
  }
  Vocab probe;
  probe.mode_ = mode;
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : documents) {
    for (auto& tok : probe.split(doc)) ++counts[tok];
  }
  if (counts.empty()) throw DataError("corpus contains no tokens");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (size_cap > 0 && ranked.size() > size_cap) ranked.resize(size_cap);
  std::vector<std::string> tokens;
  tokens.reserve(ranked.size());
  for (auto& [tok, count] : ranked) tokens.push_back(tok);
  return from_tokens(std::move(tokens), mode, num_sentinels);
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens, VocabMode mode, std::size_t num_sentinels) {
  Vocab v;
  v.mode_ = mode;
  v.sentinels_ = SentinelRange{kFirstSentinel, num_sentinels};
  for (const char* name : kReservedNames) v.tokens_.emplace_back(name);
  for (std::size_t k = 0; k < num_sentinels; ++k) v.tokens_.push_back("[S" + std::to_string(k) + "]");
  for (auto& tok : tokens) {
    if (tok.empty() || tok.find('\n') != std::string::npos) {
      throw DataError("vocabulary tokens must be non-empty single-line strings");
    }
    v.tokens_.push_back(std::move(tok));
  }
  v.index_tokens();
  return v;
}

void Vocab::index_tokens() {
  index_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

Vocab Vocab::load(const std::filesystem::path& path, VocabMode mode, std::size_t num_sentinels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return from_tokens(std::move(tokens), mode, num_sentinels);
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (std::size_t i = num_reserved(); i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

TokenId Vocab::id_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside [0, " +
                          std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& tok : split(text)) ids.push_back(id_of(tok));
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (mode_ != VocabMode::character && i > 0) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

bool Vocab::maskable(TokenId id) const {
  return id == kUnk || (id >= kFirstSentinel && !sentinels_.contains(id));
}

std::function<bool(TokenId)> Vocab::maskable_fn() const {
  const SentinelRange s = sentinels_;
  return [s](TokenId id) { return id == kUnk || (id >= kFirstSentinel && !s.contains(id)); };
}

std::vector<std::string> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path.string());
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    docs.push_back(std::move(line));
  }
  if (docs.empty()) throw DataError("corpus " + path.string() + " is empty");
  return docs;
}

Vocab build_vocab(const std::filesystem::path& corpus_path, VocabMode mode, std::size_t size_cap,
                  std::size_t num_sentinels) {
  return Vocab::build(load_corpus(corpus_path), mode, size_cap, num_sentinels);
}

}  // namespace metrolab
