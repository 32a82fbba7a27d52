// SPDX-License-Identifier: Apache-2.0
#include "metrolab/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "metrolab/errors.hpp"

namespace metrolab {
namespace {

template <class E>
struct EnumTable {
  std::vector<std::pair<E, std::string_view>> items;

  std::string_view name(E v) const {
    for (auto& [e, n] : items) {
      if (e == v) return n;
    }
    return "?";
  }
  E parse(std::string_view text, std::string_view what) const {
    for (auto& [e, n] : items) {
      if (n == text) return e;
    }
    std::string expected;
    for (auto& [e, n] : items) expected += (expected.empty() ? "" : "|") + std::string(n);
    throw ConfigError(std::string(what) + ": expected one of " + expected + ", got '" + std::string(text) + "'");
  }
};

const EnumTable<RtdLocation> kRtdLocation{{{RtdLocation::encoder, "encoder"}, {RtdLocation::decoder, "decoder"}}};
const EnumTable<TargetVariant> kTargetVariant{{{TargetVariant::masked_only, "masked_only"},
                                               {TargetVariant::all_tokens, "all_tokens"},
                                               {TargetVariant::all_tokens_masked_loss, "all_tokens_masked_loss"}}};
const EnumTable<NormStyle> kNormStyle{{{NormStyle::post_ln, "post_ln"}, {NormStyle::pre_ln, "pre_ln"}}};
const EnumTable<ClmHeadStyle> kClmHead{{{ClmHeadStyle::linear, "linear"},
                                        {ClmHeadStyle::projection, "projection"},
                                        {ClmHeadStyle::copy, "copy"}}};
const EnumTable<Activation> kActivation{{{Activation::relu, "relu"}, {Activation::gelu, "gelu"}}};
const EnumTable<Objective> kObjective{
    {{Objective::metro, "metro"}, {Objective::t5_span, "t5_span"}, {Objective::finetune, "finetune"}}};
const EnumTable<T5Target> kT5Target{{{T5Target::sentinel, "sentinel"}, {T5Target::all_tokens, "all_tokens"}}};
const EnumTable<Precision> kPrecision{{{Precision::f32, "f32"}, {Precision::f64, "f64"}}};

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  double v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected a real number, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key + ": expected a boolean (true|false), got '" + text + "'");
}

struct Field {
  std::string key;  // section.name
  std::function<std::optional<std::string>(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Field size_field(std::string key, T RunConfig::*block, std::size_t T::*member) {
  return {key, [=](const RunConfig& c) -> std::optional<std::string> { return std::to_string((c.*block).*member); },
          [=](RunConfig& c, const std::string& v) { (c.*block).*member = parse_unsigned(key, v); }};
}

template <class T>
Field real_field(std::string key, T RunConfig::*block, double T::*member) {
  return {key, [=](const RunConfig& c) -> std::optional<std::string> { return format_double((c.*block).*member); },
          [=](RunConfig& c, const std::string& v) { (c.*block).*member = parse_real(key, v); }};
}

template <class T>
Field bool_field(std::string key, T RunConfig::*block, bool T::*member) {
  return {key, [=](const RunConfig& c) -> std::optional<std::string> { return (c.*block).*member ? "true" : "false"; },
          [=](RunConfig& c, const std::string& v) { (c.*block).*member = parse_bool(key, v); }};
}

template <class T, class E>
Field enum_field(std::string key, T RunConfig::*block, E T::*member, const EnumTable<E>& table) {
  return {key,
          [=, &table](const RunConfig& c) -> std::optional<std::string> {
            return std::string(table.name((c.*block).*member));
          },
          [=, &table](RunConfig& c, const std::string& v) { (c.*block).*member = table.parse(v, key); }};
}

template <class T>
Field string_field(std::string key, T RunConfig::*block, std::string T::*member) {
  return {key, [=](const RunConfig& c) -> std::optional<std::string> { return (c.*block).*member; },
          [=](RunConfig& c, const std::string& v) { (c.*block).*member = v; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using M = ModelConfig;
    using T = TrainConfig;
    using D = DataConfig;
    const auto m = &RunConfig::model;
    const auto t = &RunConfig::train;
    const auto d = &RunConfig::data;
    std::vector<Field> f{
        size_field("model.d_model", m, &M::d_model),
        size_field("model.n_heads", m, &M::n_heads),
        size_field("model.d_ff", m, &M::d_ff),
        size_field("model.enc_layers", m, &M::enc_layers),
        size_field("model.dec_layers", m, &M::dec_layers),
        size_field("model.aux_layers", m, &M::aux_layers),
        size_field("model.vocab_size", m, &M::vocab_size),
        size_field("model.max_abs_positions", m, &M::max_abs_positions),
        size_field("model.rel_buckets", m, &M::rel_buckets),
        size_field("model.rel_max_distance", m, &M::rel_max_distance),
        real_field("model.dropout", m, &M::dropout),
        real_field("model.init_std", m, &M::init_std),
        enum_field("model.rtd_location", m, &M::rtd_location, kRtdLocation),
        enum_field("model.target_variant", m, &M::target_variant, kTargetVariant),
        {"model.masking_kind",
         [](const RunConfig& c) -> std::optional<std::string> {
           return std::string(mask_pattern_name(c.model.masking_kind));
         },
         [](RunConfig& c, const std::string& v) {
           try {
             c.model.masking_kind = parse_mask_pattern(v);
           } catch (const ConfigError&) {
             throw ConfigError("model.masking_kind: expected one of iid|span, got '" + v + "'");
           }
         }},
        real_field("model.mask_ratio", m, &M::mask_ratio),
        real_field("model.mean_span", m, &M::mean_span),
        enum_field("model.norm_style", m, &M::norm_style, kNormStyle),
        enum_field("model.clm_head_style", m, &M::clm_head_style, kClmHead),
        enum_field("model.activation", m, &M::activation, kActivation),
        bool_field("model.share_rel_bias_layers", m, &M::share_rel_bias_layers),
        bool_field("model.share_rel_bias_enc_dec", m, &M::share_rel_bias_enc_dec),
        bool_field("model.detach_aux_embedding", m, &M::detach_aux_embedding),

        enum_field("train.objective", t, &T::objective, kObjective),
        enum_field("train.t5_target", t, &T::t5_target, kT5Target),
        real_field("train.peak_lr", t, &T::peak_lr),
        size_field("train.warmup_steps", t, &T::warmup_steps),
        size_field("train.total_steps", t, &T::total_steps),
        size_field("train.batch_size", t, &T::batch_size),
        real_field("train.adam_beta1", t, &T::adam_beta1),
        real_field("train.adam_beta2", t, &T::adam_beta2),
        real_field("train.adam_eps", t, &T::adam_eps),
        real_field("train.clip_norm", t, &T::clip_norm),
        real_field("train.weight_decay", t, &T::weight_decay),
        real_field("train.lambda_rtd", t, &T::lambda_rtd),
        real_field("train.lambda_clm", t, &T::lambda_clm),
        real_field("train.lr_multiplier_finetune", t, &T::lr_multiplier_finetune),
        {"train.seed",
         [](const RunConfig& c) -> std::optional<std::string> {
           if (!c.train.seed) return std::nullopt;
           return std::to_string(*c.train.seed);
         },
         [](RunConfig& c, const std::string& v) { c.train.seed = parse_unsigned("train.seed", v); }},
        size_field("train.log_interval", t, &T::log_interval),
        size_field("train.checkpoint_interval", t, &T::checkpoint_interval),
        real_field("train.divergence_factor", t, &T::divergence_factor),
        size_field("train.divergence_window", t, &T::divergence_window),
        enum_field("train.precision", t, &T::precision, kPrecision),
        bool_field("train.diagnostic", t, &T::diagnostic),

        string_field("data.corpus", d, &D::corpus),
        string_field("data.vocab_file", d, &D::vocab_file),
        string_field("data.train_tasks", d, &D::train_tasks),
        string_field("data.eval_tasks", d, &D::eval_tasks),
        {"data.vocab_mode",
         [](const RunConfig& c) -> std::optional<std::string> {
           return std::string(vocab_mode_name(c.data.vocab_mode));
         },
         [](RunConfig& c, const std::string& v) {
           try {
             c.data.vocab_mode = parse_vocab_mode(v);
           } catch (const ConfigError&) {
             throw ConfigError("data.vocab_mode: expected one of char|word|unigram-count-cap, got '" + v + "'");
           }
         }},
        size_field("data.vocab_size_cap", d, &D::vocab_size_cap),
        size_field("data.num_sentinels", d, &D::num_sentinels),
        size_field("data.seq_len", d, &D::seq_len),
        size_field("data.target_len", d, &D::target_len),

        {"run.output_dir", [](const RunConfig& c) -> std::optional<std::string> { return c.output_dir; },
         [](RunConfig& c, const std::string& v) { c.output_dir = v; }},
        {"run.run_name", [](const RunConfig& c) -> std::optional<std::string> { return c.run_name; },
         [](RunConfig& c, const std::string& v) { c.run_name = v; }},
    };
    std::sort(f.begin(), f.end(), [](const Field& a, const Field& b) { return a.key < b.key; });
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

std::string_view enum_name(RtdLocation v) { return kRtdLocation.name(v); }
std::string_view enum_name(TargetVariant v) { return kTargetVariant.name(v); }
std::string_view enum_name(NormStyle v) { return kNormStyle.name(v); }
std::string_view enum_name(ClmHeadStyle v) { return kClmHead.name(v); }
std::string_view enum_name(Activation v) { return kActivation.name(v); }
std::string_view enum_name(Objective v) { return kObjective.name(v); }
std::string_view enum_name(T5Target v) { return kT5Target.name(v); }
std::string_view enum_name(Precision v) { return kPrecision.name(v); }

TargetVariant parse_target_variant(std::string_view name) { return kTargetVariant.parse(name, "target variant"); }

std::size_t ModelConfig::effective_aux_layers() const {
  return aux_layers != 0 ? aux_layers : std::max<std::size_t>(1, enc_layers / 3);
}

void ModelConfig::validate() const {
  require(d_model > 0, "model.d_model must be positive");
  require(n_heads > 0 && d_model % n_heads == 0, "model.d_model must be divisible by model.n_heads");
  require(d_ff > 0, "model.d_ff must be positive");
  require(enc_layers > 0, "model.enc_layers must be positive");
  require(dec_layers > 0, "model.dec_layers must be positive");
  require(effective_aux_layers() <= enc_layers, "model.aux_layers must not exceed model.enc_layers");
  require(max_abs_positions > 0, "model.max_abs_positions must be positive");
  require(rel_buckets >= 4 && rel_buckets % 2 == 0, "model.rel_buckets must be an even number >= 4");
  require(rel_max_distance > rel_buckets / 4, "model.rel_max_distance must exceed rel_buckets / 4");
  require(dropout >= 0.0 && dropout < 1.0, "model.dropout must lie in [0, 1)");
  require(init_std > 0.0, "model.init_std must be positive");
  require(mask_ratio > 0.0 && mask_ratio < 0.5, "model.mask_ratio must lie in (0, 0.5)");
  require(mean_span >= 2.0, "model.mean_span must be at least 2");
}

void TrainConfig::validate() const {
  require(peak_lr > 0.0, "train.peak_lr must be positive");
  require(total_steps > 0, "train.total_steps must be positive");
  require(warmup_steps < total_steps, "train.warmup_steps must be smaller than train.total_steps");
  require(batch_size > 0, "train.batch_size must be positive");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "train.adam_beta1 must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "train.adam_beta2 must lie in [0, 1)");
  require(adam_eps > 0.0, "train.adam_eps must be positive");
  require(clip_norm >= 0.0, "train.clip_norm must be non-negative (0 disables clipping)");
  require(weight_decay >= 0.0, "train.weight_decay must be non-negative");
  require(lambda_rtd >= 0.0, "train.lambda_rtd must be non-negative");
  require(lambda_clm >= 0.0, "train.lambda_clm must be non-negative");
  require(lr_multiplier_finetune > 0.0, "train.lr_multiplier_finetune must be positive");
  require(log_interval > 0, "train.log_interval must be positive");
  require(divergence_factor > 1.0, "train.divergence_factor must exceed 1");
  require(divergence_window > 0, "train.divergence_window must be positive");
}

void DataConfig::validate() const {
  require(seq_len >= 8, "data.seq_len must be at least 8");
  require(target_len >= 2, "data.target_len must be at least 2");
  require(vocab_mode != VocabMode::unigram || vocab_size_cap > 0,
          "data.vocab_size_cap is required for unigram-count-cap vocabularies");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  require(!run_name.empty(), "run.run_name must not be empty");
  require(model.max_abs_positions >= data.seq_len + 1,
          "model.max_abs_positions must be at least data.seq_len + 1");
  require(model.max_abs_positions >= data.target_len + 1,
          "model.max_abs_positions must be at least data.target_len + 1");
}

ConfigEntries to_entries(const RunConfig& config) {
  ConfigEntries out;
  for (const auto& f : fields()) {
    if (auto v = f.get(config)) out[f.key] = *v;
  }
  return out;
}

RunConfig from_entries(const ConfigEntries& entries) {
  RunConfig config;
  for (const auto& [key, value] : entries) find_field(key).set(config, value);
  return config;
}

void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value) {
  find_field(dotted_key).set(config, value);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

ConfigEntries parse_ini(std::string_view text) {
  ConfigEntries out;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key outside of a section");
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto hash = value.find(" #");
    if (hash != std::string::npos) value = trim(std::string_view(value).substr(0, hash));
    const std::string dotted = section + "." + key;
    if (!out.emplace(dotted, value).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + dotted + "'");
    }
  }
  return out;
}

RunConfig parse_config(std::string_view text) { return from_entries(parse_ini(text)); }

std::string serialize_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& [key, value] : to_entries(config)) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += '\n';
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + value + "\n";
  }
  return out;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<std::string> apply_env_overrides(RunConfig& config,
                                             const std::function<const char*(const char*)>& getenv_fn) {
  std::vector<std::string> applied;
  for (const auto& f : fields()) {
    std::string var = "METROLAB_" + f.key;
    std::replace(var.begin(), var.end(), '.', '_');
    std::transform(var.begin(), var.end(), var.begin(), [](unsigned char c) { return std::toupper(c); });
    if (const char* value = getenv_fn(var.c_str())) {
      f.set(config, value);
      applied.push_back(f.key);
    }
  }
  return applied;
}

}  // namespace metrolab
