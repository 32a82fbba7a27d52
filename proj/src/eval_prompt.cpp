// SPDX-License-Identifier: Apache-2.0
#include "metrolab/eval_prompt.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "metrolab/errors.hpp"
#include "metrolab/rng.hpp"
#include "metrolab/synthetic.hpp"

namespace metrolab {

void validate_instance(const PromptInstance& instance) {
  if (instance.choices.size() < 2) throw DataError("a prompt instance needs at least two choices");
  std::set<std::string> seen(instance.choices.begin(), instance.choices.end());
  if (seen.size() != instance.choices.size()) throw DataError("prompt choices must be distinct");
  if (instance.answer >= instance.choices.size()) {
    throw DataError("answer index " + std::to_string(instance.answer) + " out of range for " +
                    std::to_string(instance.choices.size()) + " choices");
  }
}

template <class Real>
double score_choice(const Model<Real>& model, std::span<const TokenId> input, std::span<const TokenId> choice) {
  if (choice.empty()) throw ContractError("score_choice: empty choice");
  if (input.empty()) throw ContractError("score_choice: empty input");
  NoGradScope<Real> no_grad;
  const TokenBatch enc = TokenBatch::from_rows({TokenSeq(input.begin(), input.end())});
  TokenSeq prefix{kBos};
  prefix.insert(prefix.end(), choice.begin(), choice.end() - 1);
  const TokenBatch dec = TokenBatch::from_rows({prefix});
  const Tensor<Real> memory = model.encode(enc);
  const Tensor<Real> logits = model.clm_logits(model.decode(memory, enc, dec));
  const std::size_t v = model.vocab_size();
  const auto data = logits.data();
  double total = 0.0;
  for (std::size_t t = 0; t < choice.size(); ++t) {
    const auto row = log_softmax<Real>(data.subspan(t * v, v));
    total += row.at(choice[t]);
  }
  return total;
}

template <class Real>
double score_choice(const Model<Real>& model, const Vocab& vocab, const std::string& input,
                    const std::string& choice) {
  const TokenSeq in = vocab.encode(input);
  const TokenSeq ch = vocab.encode(choice);
  return score_choice(model, std::span<const TokenId>(in), std::span<const TokenId>(ch));
}

template <class Real>
ChoiceScorer model_scorer(const Model<Real>& model) {
  return [&model](std::span<const TokenId> input, std::span<const TokenId> choice) {
    return score_choice(model, input, choice);
  };
}

std::vector<double> choice_scores(const ChoiceScorer& scorer, const Vocab& vocab, const PromptInstance& instance) {
  const TokenSeq input = vocab.encode(instance.input);
  std::vector<double> scores;
  scores.reserve(instance.choices.size());
  for (const auto& choice : instance.choices) {
    const TokenSeq ids = vocab.encode(choice);
    if (ids.empty()) throw ContractError("score_choice: empty choice");
    scores.push_back(scorer(input, ids));
  }
  return scores;
}

std::size_t argmax_lowest(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("argmax over no scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

std::size_t rank_classify(const ChoiceScorer& scorer, const Vocab& vocab, const PromptInstance& instance) {
  const auto scores = choice_scores(scorer, vocab, instance);
  return argmax_lowest(scores);
}

std::vector<PromptInstance> parse_task(std::istream& in, const std::string& source) {
  std::vector<PromptInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() < 5) {
      throw DataError(where + "expected template, input, at least two choices and an answer index (got " +
                      std::to_string(fields.size()) + " fields)");
    }
    PromptInstance inst;
    inst.template_id = fields.front();
    inst.input = fields[1];
    inst.choices.assign(fields.begin() + 2, fields.end() - 1);
    const std::string& answer = fields.back();
    std::size_t index = 0;
    auto res = std::from_chars(answer.data(), answer.data() + answer.size(), index);
    if (res.ec != std::errc() || res.ptr != answer.data() + answer.size()) {
      throw DataError(where + "answer index '" + answer + "' is not a non-negative integer");
    }
    inst.answer = index;
    if (inst.template_id.empty()) throw DataError(where + "empty template id");
    try {
      validate_instance(inst);
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<PromptInstance> load_task_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open task file " + path.string());
  return parse_task(in, path.string());
}

void write_task_file(const std::filesystem::path& path, const std::vector<PromptInstance>& instances) {
  auto check = [](const std::string& field) {
    if (field.find_first_of("\t\n\r") != std::string::npos) {
      throw DataError("task fields may not contain tabs or newlines: '" + field + "'");
    }
  };
  std::ostringstream text;
  for (const auto& inst : instances) {
    validate_instance(inst);
    check(inst.template_id);
    check(inst.input);
    text << inst.template_id << '\t' << inst.input;
    for (const auto& c : inst.choices) {
      check(c);
      text << '\t' << c;
    }
    text << '\t' << inst.answer << '\n';
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write task file " + path.string());
  out << text.str();
}

double TaskReport::score() const {
  if (templates.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [id, t] : templates) sum += t.accuracy();
  return sum / static_cast<double>(templates.size());
}

double MixtureReport::mean_score() const {
  if (tasks.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : tasks) sum += t.score();
  return sum / static_cast<double>(tasks.size());
}

TaskReport evaluate_task(const ChoiceScorer& scorer, const Vocab& vocab, const std::string& name,
                         const std::vector<PromptInstance>& instances) {
  TaskReport report;
  report.task = name;
  for (const auto& inst : instances) {
    auto& slot = report.templates[inst.template_id];
    ++slot.total;
    if (rank_classify(scorer, vocab, inst) == inst.answer) ++slot.correct;
  }
  return report;
}

MixtureReport evaluate_mixture(const ChoiceScorer& scorer, const Vocab& vocab,
                               const std::vector<std::filesystem::path>& task_files) {
  MixtureReport report;
  for (const auto& path : task_files) {
    report.tasks.push_back(evaluate_task(scorer, vocab, path.stem().string(), load_task_file(path)));
  }
  return report;
}

std::string format_mixture_csv(const MixtureReport& report) {
  std::ostringstream out;
  out << "task,template,correct,total,accuracy\n";
  char buf[32];
  auto num = [&buf](double v) {
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  };
  for (const auto& task : report.tasks) {
    std::size_t correct = 0, total = 0;
    for (const auto& [id, t] : task.templates) {
      out << task.task << ',' << id << ',' << t.correct << ',' << t.total << ',' << num(t.accuracy()) << '\n';
      correct += t.correct;
      total += t.total;
    }
    out << task.task << ",mean," << correct << ',' << total << ',' << num(task.score()) << '\n';
  }
  out << "all,mean,,," << num(report.mean_score()) << '\n';
  return out.str();
}

namespace {

template <class T>
const T& pick(const std::vector<T>& items, Rng& rng) {
  return items[rng.below(items.size())];
}

/// Puts the answer at a balanced index: instance i gets answer i mod choices.
PromptInstance arrange(std::string template_id, std::string input, const std::string& correct,
                       std::vector<std::string> distractors, std::size_t slot) {
  PromptInstance inst;
  inst.template_id = std::move(template_id);
  inst.input = std::move(input);
  inst.answer = slot % (distractors.size() + 1);
  inst.choices = std::move(distractors);
  inst.choices.insert(inst.choices.begin() + static_cast<std::ptrdiff_t>(inst.answer), correct);
  return inst;
}

}  // namespace

std::vector<PromptInstance> generate_nli_task(std::size_t count, std::uint64_t seed) {
  const auto& lex = default_lexicon();
  Rng rng = Rng::derive(seed, 0x4e4c49);
  std::vector<PromptInstance> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& name = pick(lex.names, rng);
    const auto& place = pick(lex.places, rng);
    std::string other = place;
    while (other == place) other = pick(lex.places, rng);
    const bool entailed = i % 2 == 0;
    const std::string premise = name + " went to the " + place + " .";
    const std::string hypothesis = name + " was at the " + (entailed ? place : other);
    std::string input;
    const std::size_t t = rng.below(3);
    if (t == 0) input = premise + " question : " + hypothesis + " ? yes or no";
    else if (t == 1) input = "suppose " + premise + " can we say that " + hypothesis + " ?";
    else input = premise + " so " + hypothesis + " . true or false ?";
    PromptInstance inst;
    inst.template_id = "nli_" + std::to_string(t);
    inst.input = input;
    inst.choices = t == 2 ? std::vector<std::string>{"true", "false"} : std::vector<std::string>{"yes", "no"};
    inst.answer = entailed ? 0 : 1;
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<PromptInstance> generate_copy_task(std::size_t count, std::uint64_t seed) {
  const auto& lex = default_lexicon();
  Rng rng = Rng::derive(seed, 0xc0b1);
  std::vector<std::string> words;
  for (const auto& c : lex.classes) words.insert(words.end(), c.verbs.begin(), c.verbs.end());
  words.insert(words.end(), lex.colors.begin(), lex.colors.end());
  words.insert(words.end(), lex.counts.begin(), lex.counts.end());
  std::vector<PromptInstance> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::string> seq(3 + rng.below(3));
    for (auto& w : seq) w = pick(words, rng);
    std::vector<std::string> wrong = seq;
    const std::size_t at = rng.below(wrong.size());
    while (wrong[at] == seq[at]) wrong[at] = pick(words, rng);
    auto join = [](const std::vector<std::string>& ws) {
      std::string s;
      for (const auto& w : ws) s += (s.empty() ? "" : " ") + w;
      return s;
    };
    const std::size_t t = rng.below(2);
    const std::string input = t == 0 ? "repeat after me : " + join(seq) : join(seq) + " . say that again :";
    out.push_back(arrange("copy_" + std::to_string(t), input, join(seq), {join(wrong)}, i));
  }
  return out;
}

std::vector<PromptInstance> generate_word_sense_task(std::size_t count, std::uint64_t seed) {
  const auto& lex = default_lexicon();
  Rng rng = Rng::derive(seed, 0x5e45e);
  std::vector<PromptInstance> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t cls = rng.below(lex.classes.size());
    std::size_t other = cls;
    while (other == cls) other = rng.below(lex.classes.size());
    const auto& noun = pick(lex.classes[cls].nouns, rng);
    const std::size_t t = rng.below(3);
    std::string input;
    if (t == 0) input = "is the " + noun + " an animal , a tool , a food or a vehicle ?";
    else if (t == 1) input = "the " + noun + " " + pick(lex.classes[cls].verbs, rng) + " . what kind of thing is it ?";
    else input = "pick the family of the word " + noun + " :";
    out.push_back(arrange("sense_" + std::to_string(t), input, lex.classes[cls].name, {lex.classes[other].name}, i));
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> instances_as_pairs(const std::vector<PromptInstance>& instances) {
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.emplace_back(inst.input, inst.choices.at(inst.answer));
  return out;
}

#define METROLAB_INSTANTIATE_EVAL(Real)                                                                           \
  template double score_choice<Real>(const Model<Real>&, std::span<const TokenId>, std::span<const TokenId>);     \
  template double score_choice<Real>(const Model<Real>&, const Vocab&, const std::string&, const std::string&); \
  template ChoiceScorer model_scorer<Real>(const Model<Real>&);

METROLAB_INSTANTIATE_EVAL(float)
METROLAB_INSTANTIATE_EVAL(double)

}  // namespace metrolab
