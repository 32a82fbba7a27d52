// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "metrolab/masking.hpp"
#include "metrolab/vocab.hpp"

namespace metrolab {

enum class RtdLocation { encoder, decoder };
enum class TargetVariant { masked_only, all_tokens, all_tokens_masked_loss };
enum class NormStyle { post_ln, pre_ln };
enum class ClmHeadStyle { linear, projection, copy };
enum class Activation { relu, gelu };
enum class Objective { metro, t5_span, finetune };
enum class T5Target { sentinel, all_tokens };
enum class Precision { f32, f64 };

std::string_view enum_name(RtdLocation v);
std::string_view enum_name(TargetVariant v);
std::string_view enum_name(NormStyle v);
std::string_view enum_name(ClmHeadStyle v);
std::string_view enum_name(Activation v);
std::string_view enum_name(Objective v);
std::string_view enum_name(T5Target v);
std::string_view enum_name(Precision v);

TargetVariant parse_target_variant(std::string_view name);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t aux_layers = 0;  // 0 = one third of enc_layers, at least 1
  std::size_t vocab_size = 0;  // 0 = taken from the vocabulary
  std::size_t max_abs_positions = 128;
  std::size_t rel_buckets = 32;
  std::size_t rel_max_distance = 128;
  double dropout = 0.1;
  double init_std = 0.02;
  RtdLocation rtd_location = RtdLocation::encoder;
  TargetVariant target_variant = TargetVariant::all_tokens_masked_loss;
  MaskPattern masking_kind = MaskPattern::iid;
  double mask_ratio = 0.15;
  double mean_span = 3.0;
  NormStyle norm_style = NormStyle::post_ln;
  ClmHeadStyle clm_head_style = ClmHeadStyle::linear;
  Activation activation = Activation::relu;
  bool share_rel_bias_layers = true;
  bool share_rel_bias_enc_dec = false;
  bool detach_aux_embedding = false;

  std::size_t effective_aux_layers() const;
  /// Throws ConfigError naming the offending key.
  void validate() const;
};

struct TrainConfig {
  Objective objective = Objective::metro;
  T5Target t5_target = T5Target::sentinel;
  double peak_lr = 4e-4;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 2000;
  std::size_t batch_size = 8;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;
  double clip_norm = 2.0;  // 0 disables clipping
  double weight_decay = 0.01;
  double lambda_rtd = 50.0;
  double lambda_clm = 1.0;
  double lr_multiplier_finetune = 0.1;
  std::optional<std::uint64_t> seed;
  std::size_t log_interval = 1;
  std::size_t checkpoint_interval = 0;  // 0 = final checkpoint only
  double divergence_factor = 10.0;
  std::size_t divergence_window = 100;
  Precision precision = Precision::f32;
  bool diagnostic = false;

  void validate() const;
};

struct DataConfig {
  std::string corpus;
  std::string vocab_file;
  std::string train_tasks;  // comma-separated task files
  std::string eval_tasks;
  VocabMode vocab_mode = VocabMode::word;
  std::size_t vocab_size_cap = 0;
  std::size_t num_sentinels = 16;
  std::size_t seq_len = 64;
  std::size_t target_len = 32;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs";
  std::string run_name = "run";

  void validate() const;
  std::filesystem::path run_dir() const { return std::filesystem::path(output_dir) / run_name; }
};

/// "section.key" -> textual value.
using ConfigEntries = std::map<std::string, std::string>;

ConfigEntries to_entries(const RunConfig& config);
/// Unknown keys and malformed values raise ConfigError.
RunConfig from_entries(const ConfigEntries& entries);

/// INI text: [section] headers, key = value lines, '#' or ';' comments.
ConfigEntries parse_ini(std::string_view text);
RunConfig parse_config(std::string_view text);
/// Canonical form: sections and keys sorted, every key written.
std::string serialize_config(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);

/// Applies METROLAB_<SECTION>_<KEY> variables; returns the keys that were overridden.
std::vector<std::string> apply_env_overrides(
    RunConfig& config, const std::function<const char*(const char*)>& getenv_fn);

/// Sets one "section.key" value with the same validation as file input.
void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value);

std::vector<std::string> config_keys();

}  // namespace metrolab
