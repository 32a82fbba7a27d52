// SPDX-License-Identifier: Apache-2.0
//
// Glue shared by the command-line tool and the acceptance harness.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "metrolab/checkpoint.hpp"
#include "metrolab/config.hpp"
#include "metrolab/data.hpp"
#include "metrolab/eval_prompt.hpp"
#include "metrolab/model.hpp"
#include "metrolab/objectives.hpp"
#include "metrolab/trainer.hpp"
#include "metrolab/vocab.hpp"

namespace metrolab {

struct PretrainingData {
  Vocab vocab;
  std::vector<TokenSeq> sequences;
  PackStats stats;
};

/// Loads data.corpus, loads data.vocab_file or builds a vocabulary from the corpus,
/// then encodes and packs documents to data.seq_len.
PretrainingData prepare_pretraining_data(const RunConfig& config);

/// Same, from documents already in memory.
PretrainingData prepare_pretraining_data(const RunConfig& config, const std::vector<std::string>& documents);

/// Config stored in a checkpoint, with model.vocab_size taken from the token table.
RunConfig config_from_checkpoint(const Checkpoint& checkpoint);

/// Main model (auxiliary and RTD tensors stay at their initial values).
template <class Real>
Model<Real> model_from_checkpoint(const Checkpoint& checkpoint);

std::vector<Seq2SeqExample> encode_pairs(const Vocab& vocab,
                                         const std::vector<std::pair<std::string, std::string>>& pairs);

/// Task files listed comma-separated, as in data.train_tasks.
std::vector<std::string> split_list(const std::string& text);

struct AblationRow {
  std::string slug;
  std::string label;
  std::function<void(RunConfig&)> apply;
};

/// Named variants of the base configuration: METRO baseline, CLM loss on all
/// positions, RTD on the decoder, decoder RTD plus a CLM projection layer,
/// continuous span masking, the T5 span-corruption baseline and its all-token
/// LM loss.
const std::vector<AblationRow>& ablation_preset(const std::string& name);

/// The "1 2 3 4 5" collision example: one five-token sequence and a unigram
/// proposal over "1".."6".
struct AmbiguityFixture {
  Vocab vocab;
  std::vector<TokenSeq> corpus;
  ProposalFn proposal;
};
AmbiguityFixture collision_fixture();

}  // namespace metrolab
