// SPDX-License-Identifier: Apache-2.0
#include "metrolab/experiments.hpp"

#include "metrolab/errors.hpp"

namespace metrolab {

PretrainingData prepare_pretraining_data(const RunConfig& config, const std::vector<std::string>& documents) {
  const auto& d = config.data;
  PretrainingData out;
  out.vocab = d.vocab_file.empty() ? Vocab::build(documents, d.vocab_mode, d.vocab_size_cap, d.num_sentinels)
                                   : Vocab::load(d.vocab_file, d.vocab_mode, d.num_sentinels);
  std::vector<TokenSeq> encoded;
  encoded.reserve(documents.size());
  for (const auto& doc : documents) encoded.push_back(out.vocab.encode(doc));
  out.sequences = pack_documents(encoded, d.seq_len, &out.stats);
  if (out.sequences.empty()) throw DataError("corpus produced no training sequences");
  return out;
}

PretrainingData prepare_pretraining_data(const RunConfig& config) {
  if (config.data.corpus.empty()) throw ConfigError("data.corpus: a corpus path is required for pretraining");
  return prepare_pretraining_data(config, load_corpus(config.data.corpus));
}

RunConfig config_from_checkpoint(const Checkpoint& checkpoint) {
  RunConfig config = parse_config(checkpoint.config_text);
  const NamedArray* table = checkpoint.find("embed.tokens");
  if (!table || table->shape.size() != 2) throw CheckpointError("checkpoint has no 2-D embed.tokens tensor");
  config.model.vocab_size = table->shape[0];
  return config;
}

template <class Real>
Model<Real> model_from_checkpoint(const Checkpoint& checkpoint) {
  const RunConfig config = config_from_checkpoint(checkpoint);
  Model<Real> model(config.model, 0);
  load_main_model(model, checkpoint);
  return model;
}

std::vector<Seq2SeqExample> encode_pairs(const Vocab& vocab,
                                         const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::vector<Seq2SeqExample> out;
  out.reserve(pairs.size());
  for (const auto& [input, target] : pairs) out.push_back({vocab.encode(input), vocab.encode(target)});
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto end = comma == std::string::npos ? text.size() : comma;
    std::string item = text.substr(start, end - start);
    const auto first = item.find_first_not_of(" \t");
    const auto last = item.find_last_not_of(" \t");
    if (first != std::string::npos) out.push_back(item.substr(first, last - first + 1));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

const std::vector<AblationRow>& ablation_preset(const std::string& name) {
  static const std::vector<AblationRow> table4 = {
      {"metro", "METRO baseline", [](RunConfig&) {}},
      {"clm_all_positions", "CLM Loss on All Position",
       [](RunConfig& c) { c.model.target_variant = TargetVariant::all_tokens; }},
      {"rtd_decoder", "RTD on Decoder", [](RunConfig& c) { c.model.rtd_location = RtdLocation::decoder; }},
      {"rtd_decoder_clm_projection", "+ Projection Layer on CLM",
       [](RunConfig& c) {
         c.model.rtd_location = RtdLocation::decoder;
         c.model.clm_head_style = ClmHeadStyle::projection;
       }},
      {"span_mask", "Continuous Span Mask", [](RunConfig& c) { c.model.masking_kind = MaskPattern::span; }},
      {"t5", "T5 baseline",
       [](RunConfig& c) {
         c.train.objective = Objective::t5_span;
         c.train.t5_target = T5Target::sentinel;
         c.model.masking_kind = MaskPattern::span;
       }},
      {"t5_all_token_lm", "All-token LM loss",
       [](RunConfig& c) {
         c.train.objective = Objective::t5_span;
         c.train.t5_target = T5Target::all_tokens;
         c.model.masking_kind = MaskPattern::span;
       }},
  };
  if (name == "table4") return table4;
  throw ConfigError("unknown ablation preset '" + name + "' (expected: table4)");
}

AmbiguityFixture collision_fixture() {
  AmbiguityFixture f;
  f.vocab = Vocab::from_tokens({"1", "2", "3", "4", "5", "6"}, VocabMode::word, 0);
  f.corpus = {f.vocab.encode("1 2 3 4 5")};
  f.proposal = unigram_proposal({f.vocab.encode("1 2 3 4 5 6")});
  return f;
}

template Model<float> model_from_checkpoint<float>(const Checkpoint&);
template Model<double> model_from_checkpoint<double>(const Checkpoint&);

}  // namespace metrolab
