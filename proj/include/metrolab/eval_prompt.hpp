// SPDX-License-Identifier: Apache-2.0
//
// Toy prompted tasks and rank-classification inference.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metrolab/model.hpp"
#include "metrolab/vocab.hpp"

namespace metrolab {

struct PromptInstance {
  std::string template_id;
  std::string input;
  std::vector<std::string> choices;
  std::size_t answer = 0;
};

/// Throws DataError unless there are at least two distinct choices and the answer
/// indexes one of them.
void validate_instance(const PromptInstance& instance);

/// Log-probability of a choice given the input, both already tokenized.
using ChoiceScorer = std::function<double(std::span<const TokenId> input, std::span<const TokenId> choice)>;

/// Sum over choice tokens of teacher-forced log p(token | input, preceding choice
/// tokens). No end-of-sequence term. An empty choice raises ContractError.
template <class Real>
double score_choice(const Model<Real>& model, std::span<const TokenId> input, std::span<const TokenId> choice);

template <class Real>
double score_choice(const Model<Real>& model, const Vocab& vocab, const std::string& input,
                    const std::string& choice);

template <class Real>
ChoiceScorer model_scorer(const Model<Real>& model);

std::vector<double> choice_scores(const ChoiceScorer& scorer, const Vocab& vocab, const PromptInstance& instance);

/// Index of the highest score; ties go to the lowest index.
std::size_t argmax_lowest(std::span<const double> scores);

std::size_t rank_classify(const ChoiceScorer& scorer, const Vocab& vocab, const PromptInstance& instance);

/// Tab-separated: template id, input, choices..., answer index. Blank lines are
/// skipped; malformed lines raise DataError naming the line number.
std::vector<PromptInstance> parse_task(std::istream& in, const std::string& source);
std::vector<PromptInstance> load_task_file(const std::filesystem::path& path);
/// Fields containing tabs or newlines raise DataError.
void write_task_file(const std::filesystem::path& path, const std::vector<PromptInstance>& instances);

struct TemplateScore {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct TaskReport {
  std::string task;
  std::map<std::string, TemplateScore> templates;
  /// Unweighted mean of per-template accuracies.
  double score() const;
};

struct MixtureReport {
  std::vector<TaskReport> tasks;
  double mean_score() const;
};

TaskReport evaluate_task(const ChoiceScorer& scorer, const Vocab& vocab, const std::string& name,
                         const std::vector<PromptInstance>& instances);

/// One task per file, named after the file stem.
MixtureReport evaluate_mixture(const ChoiceScorer& scorer, const Vocab& vocab,
                               const std::vector<std::filesystem::path>& task_files);

/// CSV with columns task,template,correct,total,accuracy plus one task,"mean" row
/// per task and a final overall row.
std::string format_mixture_csv(const MixtureReport& report);

// Toy task generators. Each draws from several templates and balances the answer
// index across choices.

/// Premise and hypothesis about who went where; choices "yes" / "no".
std::vector<PromptInstance> generate_nli_task(std::size_t count, std::uint64_t seed);
/// Continue or repeat a short sequence; the distractor alters one word.
std::vector<PromptInstance> generate_copy_task(std::size_t count, std::uint64_t seed);
/// Which family a two-word noun phrase belongs to, between the true class and one
/// other.
std::vector<PromptInstance> generate_word_sense_task(std::size_t count, std::uint64_t seed);

/// Finetuning pairs (input text, answer text) from prompt instances.
std::vector<std::pair<std::string, std::string>> instances_as_pairs(const std::vector<PromptInstance>& instances);

}  // namespace metrolab
