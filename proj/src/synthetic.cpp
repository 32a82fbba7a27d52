// SPDX-License-Identifier: Apache-2.0
#include "metrolab/synthetic.hpp"

#include <fstream>

#include "metrolab/errors.hpp"
#include "metrolab/rng.hpp"

namespace metrolab {
namespace {

std::string plural_word(const std::string& noun) {
  if (noun.back() == 's' || noun.back() == 'h') return noun + "es";
  if (noun.back() == 'y') return noun.substr(0, noun.size() - 1) + "ies";
  return noun + "s";
}

template <class T>
const T& pick(const std::vector<T>& items, Rng& rng) {
  return items[rng.below(items.size())];
}

std::string plural(const std::string& phrase) {
  const auto space = phrase.rfind(' ');
  const std::string head = space == std::string::npos ? "" : phrase.substr(0, space + 1);
  const std::string noun = phrase.substr(head.size());
  return head + plural_word(noun);
}

void push(std::string& doc, const std::string& word) {
  if (!doc.empty()) doc += ' ';
  doc += word;
}

struct Cast {
  const NounClass* subject;
  const NounClass* other;
  std::string noun;
  std::string other_noun;
  std::string first;
  std::string second;
  std::string place;
  std::string color;
};

Cast draw_cast(const Lexicon& lex, Rng& rng) {
  Cast c;
  c.subject = &pick(lex.classes, rng);
  c.other = &pick(lex.classes, rng);
  c.noun = pick(c.subject->nouns, rng);
  c.other_noun = pick(c.other->nouns, rng);
  c.first = pick(lex.names, rng);
  do {
    c.second = pick(lex.names, rng);
  } while (c.second == c.first);
  c.place = pick(lex.places, rng);
  c.color = pick(lex.colors, rng);
  return c;
}

void sentence(std::string& doc, const Lexicon& lex, const Cast& cast, Rng& rng) {
  const bool swap = rng.uniform() < 0.5;
  const std::string& a = swap ? cast.second : cast.first;
  const std::string& b = swap ? cast.first : cast.second;
  switch (rng.below(5)) {
    case 0: {
      push(doc, "the");
      push(doc, cast.noun);
      push(doc, pick(cast.subject->verbs, rng));
      push(doc, "near the");
      push(doc, cast.other_noun);
      break;
    }
    case 1: {
      push(doc, a);
      push(doc, "went to the");
      push(doc, cast.place);
      push(doc, "and bought");
      if (rng.uniform() < 0.3) {
        push(doc, "one");
        push(doc, cast.other_noun);
      } else {
        push(doc, pick(lex.counts, rng));
        push(doc, plural(cast.other_noun));
      }
      break;
    }
    case 2: {
      push(doc, a);
      push(doc, "gave");
      push(doc, b);
      push(doc, "a");
      push(doc, cast.color);
      push(doc, cast.noun);
      push(doc, ". then");
      push(doc, b);
      push(doc, "thanked");
      push(doc, a);
      break;
    }
    case 3: {
      push(doc, a);
      push(doc, "said that the");
      push(doc, cast.noun);
      push(doc, "is");
      push(doc, pick(cast.subject->adjectives, rng));
      break;
    }
    default: {
      push(doc, "the");
      push(doc, cast.other_noun);
      push(doc, "in the");
      push(doc, cast.place);
      push(doc, pick(cast.other->verbs, rng));
      push(doc, "and the");
      push(doc, cast.other_noun);
      push(doc, "is");
      push(doc, pick(cast.other->adjectives, rng));
      break;
    }
  }
  push(doc, ".");
}

}  // namespace

const Lexicon& default_lexicon() {
  static const Lexicon lex{
      {
          {"animal",
           {"tabby cat", "sheep dog", "race horse", "song bird", "red fox", "mountain goat", "field mouse",
            "snow rabbit", "grey wolf"},
           {"runs", "sleeps", "jumps", "barks", "hides"},
           {"hungry", "sleepy", "wild", "furry", "small"}},
          {"tool",
           {"claw hammer", "pocket knife", "hand saw", "power drill", "snow shovel", "pipe wrench", "step ladder",
            "nylon rope"},
           {"breaks", "cuts", "rusts", "slips", "bends"},
           {"sharp", "heavy", "rusty", "broken", "steel"}},
          {"food",
           {"green apple", "rye bread", "birthday cake", "goat cheese", "sour lemon", "water melon", "pear tart",
            "onion soup", "dried plum"},
           {"rots", "cools", "bakes", "melts", "spoils"},
           {"sweet", "salty", "fresh", "ripe", "warm"}},
          {"vehicle",
           {"sports car", "school bus", "fire truck", "sail boat", "night train", "mountain bike", "jet plane"},
           {"stops", "turns", "honks", "speeds", "parks"},
           {"fast", "shiny", "old", "noisy", "new"}},
      },
      {"anna smith", "ben jones", "carl brown", "dora white", "emma stone", "finn clark", "gina lopez",
       "hugo weber", "ivy chen", "jack moore", "kara novak", "liam price", "mia rossi", "noah berg",
       "olga petrova", "paul young"},
      {"farmers market", "dairy farm", "corner shop", "high school", "city park", "river bank", "old harbor",
       "train station"},
      {"blue", "yellow", "black", "white", "purple", "orange"},
      {"two", "three", "four", "five", "six", "seven", "eight", "nine"},
  };
  return lex;
}

std::vector<std::string> generate_corpus(std::size_t target_bytes, std::uint64_t seed) {
  const auto& lex = default_lexicon();
  Rng rng = Rng::derive(seed, 0xc0de);
  std::vector<std::string> docs;
  std::size_t bytes = 0;
  while (bytes < target_bytes) {
    std::string doc;
    const Cast cast = draw_cast(lex, rng);
    const std::size_t sentences = 3 + rng.below(4);
    for (std::size_t i = 0; i < sentences; ++i) sentence(doc, lex, cast, rng);
    bytes += doc.size() + 1;
    docs.push_back(std::move(doc));
  }
  return docs;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& line : lines) out << line << '\n';
}

}  // namespace metrolab
