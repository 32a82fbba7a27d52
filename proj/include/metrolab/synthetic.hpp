// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace metrolab {

/// A family of nouns with the verbs and adjectives that agree with it.
struct NounClass {
  std::string name;
  std::vector<std::string> nouns;
  std::vector<std::string> verbs;
  std::vector<std::string> adjectives;
};

/// Word lists used by the synthetic corpus and the toy prompted tasks.
struct Lexicon {
  std::vector<NounClass> classes;
  std::vector<std::string> names;
  std::vector<std::string> places;
  std::vector<std::string> colors;
  std::vector<std::string> counts;  // "two" .. "nine"
};

const Lexicon& default_lexicon();

/// Word-level documents from a small agreement grammar. Each document draws a
/// cast (two names, two nouns, a place, a color) and reuses it in every
/// sentence; noun class fixes the verb and adjective families and counts fix
/// plural forms. Generation stops once the text reaches target_bytes.
std::vector<std::string> generate_corpus(std::size_t target_bytes, std::uint64_t seed);

/// One document per line.
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

}  // namespace metrolab
