// SPDX-License-Identifier: Apache-2.0
#include "metrolab/model.hpp"

#include <cmath>
#include <limits>

#include "metrolab/errors.hpp"

namespace metrolab {
namespace {

enum Init { kNormal, kZeros, kOnes };

constexpr double kLayerNormEps = 1e-6;

}  // namespace

std::size_t relative_bucket(std::int64_t distance, std::size_t num_buckets, std::size_t max_distance) {
  const std::size_t half = num_buckets / 2;
  const std::size_t offset = distance > 0 ? half : 0;
  const auto n = static_cast<std::uint64_t>(distance < 0 ? -distance : distance);
  const std::size_t max_exact = half / 2;
  if (n < max_exact) return offset + static_cast<std::size_t>(n);
  const double scaled = std::log(static_cast<double>(n) / static_cast<double>(max_exact)) /
                        std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact)) *
                        static_cast<double>(half - max_exact);
  const auto bucket = max_exact + static_cast<std::size_t>(std::floor(scaled + 1e-9));
  return offset + std::min(bucket, half - 1);
}

std::vector<TokenId> flagged_rows(std::span<const std::uint8_t> mask) {
  std::vector<TokenId> rows;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) rows.push_back(static_cast<TokenId>(i));
  }
  return rows;
}

template <class Real>
Model<Real>::Model(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  if (config_.vocab_size == 0) throw ConfigError("model.vocab_size must be set before building a model");
  if (config_.clm_head_style == ClmHeadStyle::copy) {
    throw ConfigError("model.clm_head_style=copy: copy-mechanism CLM head is not implemented");
  }
  Rng rng(init_seed);
  const std::size_t d = config_.d_model;
  const std::size_t v = config_.vocab_size;
  add_param("embed.tokens", {v, d}, kNormal);
  add_stack("aux", config_.effective_aux_layers(), false);
  add_param("aux.mlm_bias", {v}, kZeros);
  add_stack("enc", config_.enc_layers, false);
  add_stack("dec", config_.dec_layers, true);
  add_linear("rtd.dense", d, d);
  add_layer_norm("rtd.ln");
  add_linear("rtd.out", d, 1);
  if (config_.clm_head_style == ClmHeadStyle::projection) {
    add_linear("clm.dense", d, d);
    add_layer_norm("clm.ln");
  }
  add_param("clm.bias", {v}, kZeros);

  for (const auto& name : normal_init_) {
    for (auto& x : params_.at(name).mutable_data()) x = static_cast<Real>(rng.normal() * config_.init_std);
  }
  normal_init_.clear();
}

template <class Real>
typename Model<Real>::T& Model<Real>::add_param(const std::string& name, Shape shape, int init) {
  T t(std::move(shape), true);
  auto data = t.mutable_data();
  std::fill(data.begin(), data.end(), init == kOnes ? Real(1) : Real(0));
  if (init == kNormal) normal_init_.push_back(name);
  names_.push_back(name);
  return params_.emplace(name, std::move(t)).first->second;
}

template <class Real>
void Model<Real>::add_linear(const std::string& prefix, std::size_t in, std::size_t out) {
  add_param(prefix + ".weight", {in, out}, kNormal);
  add_param(prefix + ".bias", {out}, kZeros);
}

template <class Real>
void Model<Real>::add_layer_norm(const std::string& prefix) {
  add_param(prefix + ".gain", {config_.d_model}, kOnes);
  add_param(prefix + ".bias", {config_.d_model}, kZeros);
}

template <class Real>
void Model<Real>::add_attention(const std::string& prefix) {
  for (const char* part : {".q", ".k", ".v", ".o"}) add_linear(prefix + part, config_.d_model, config_.d_model);
}

template <class Real>
void Model<Real>::add_stack(const std::string& prefix, std::size_t layers, bool with_cross) {
  const std::size_t d = config_.d_model;
  add_param(prefix + ".pos", {config_.max_abs_positions, d}, kNormal);
  if (config_.norm_style == NormStyle::post_ln) add_layer_norm(prefix + ".embed_ln");
  const bool own_rel = !(prefix == "dec" && config_.share_rel_bias_enc_dec);
  const Shape rel_shape{config_.rel_buckets, config_.n_heads};
  if (own_rel && config_.share_rel_bias_layers) add_param(prefix + ".rel_bias", rel_shape, kNormal);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    if (own_rel && !config_.share_rel_bias_layers) add_param(lp + ".rel_bias", rel_shape, kNormal);
    add_attention(lp + ".self");
    add_layer_norm(lp + ".self_ln");
    if (with_cross) {
      add_attention(lp + ".cross");
      add_layer_norm(lp + ".cross_ln");
    }
    add_linear(lp + ".ffn.in", d, config_.d_ff);
    add_linear(lp + ".ffn.out", config_.d_ff, d);
    add_layer_norm(lp + ".ffn_ln");
  }
  if (config_.norm_style == NormStyle::pre_ln) add_layer_norm(prefix + ".final_ln");
}

template <class Real>
const typename Model<Real>::T& Model<Real>::parameter(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("no parameter named '" + name + "'");
  return it->second;
}

template <class Real>
typename Model<Real>::T& Model<Real>::parameter(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("no parameter named '" + name + "'");
  return it->second;
}

template <class Real>
std::size_t Model<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.numel();
  return n;
}

template <class Real>
void Model<Real>::check_length(const TokenBatch& batch) const {
  if (batch.cols > config_.max_abs_positions) {
    throw LengthError("input length " + std::to_string(batch.cols) + " exceeds max_abs_positions " +
                      std::to_string(config_.max_abs_positions));
  }
  if (batch.rows == 0 || batch.cols == 0) throw ContractError("empty batch");
}

template <class Real>
typename Model<Real>::T Model<Real>::token_table(bool detach) const {
  const T& table = parameter("embed.tokens");
  return detach ? table.detach() : table;
}

template <class Real>
typename Model<Real>::T Model<Real>::layer_norm_named(const T& x, const std::string& prefix) const {
  return layer_norm(x, parameter(prefix + ".gain"), parameter(prefix + ".bias"), Real(kLayerNormEps));
}

template <class Real>
typename Model<Real>::T Model<Real>::linear_named(const T& x, const std::string& prefix) const {
  return linear(x, parameter(prefix + ".weight"), parameter(prefix + ".bias"));
}

template <class Real>
typename Model<Real>::T Model<Real>::embed(const std::string& prefix, const TokenBatch& batch, bool detach_tokens,
                                           const ForwardPass<Real>& pass) const {
  std::vector<TokenId> positions(batch.rows * batch.cols);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i % batch.cols);
  T x = add(embedding(token_table(detach_tokens), std::span<const TokenId>(batch.ids)),
            embedding(parameter(prefix + ".pos"), std::span<const TokenId>(positions)));
  if (config_.norm_style == NormStyle::post_ln) x = layer_norm_named(x, prefix + ".embed_ln");
  return dropout(x, static_cast<Real>(config_.dropout), pass.rng, pass.training);
}

template <class Real>
typename Model<Real>::T Model<Real>::sublayer(const T& x, const std::string& ln, const ForwardPass<Real>& pass,
                                              const std::function<T(const T&)>& body) const {
  const Real p = static_cast<Real>(config_.dropout);
  if (config_.norm_style == NormStyle::post_ln) {
    return layer_norm_named(add(x, dropout(body(x), p, pass.rng, pass.training)), ln);
  }
  return add(x, dropout(body(layer_norm_named(x, ln)), p, pass.rng, pass.training));
}

template <class Real>
typename Model<Real>::T Model<Real>::attention_block(const std::string& prefix, const T& x, const T& kv,
                                                     const T& bias, const AttentionSpec& spec) const {
  T q = linear_named(x, prefix + ".q");
  T k = linear_named(kv, prefix + ".k");
  T v = linear_named(kv, prefix + ".v");
  return linear_named(attention(q, k, v, bias, spec), prefix + ".o");
}

template <class Real>
typename Model<Real>::T Model<Real>::feed_forward(const std::string& prefix, const T& x,
                                                  std::span<const std::uint8_t> valid,
                                                  const ForwardPass<Real>& pass) const {
  T h = linear_named(x, prefix + ".in");
  h = config_.activation == Activation::relu ? relu(h) : gelu(h);
  if (pass.observer && *pass.observer) (*pass.observer)(prefix, h, valid);
  return linear_named(h, prefix + ".out");
}

template <class Real>
std::string Model<Real>::rel_table_name(const std::string& stack, std::size_t layer) const {
  const bool borrowed = stack == "dec" && config_.share_rel_bias_enc_dec;
  const std::string owner = borrowed ? "enc" : stack;
  if (config_.share_rel_bias_layers) return owner + ".rel_bias";
  const std::size_t l = borrowed ? layer % config_.enc_layers : layer;
  return owner + ".layer" + std::to_string(l) + ".rel_bias";
}

template <class Real>
typename Model<Real>::T Model<Real>::relative_bias(const std::string& table, std::size_t query_len,
                                                   std::size_t key_len) const {
  std::vector<TokenId> buckets(query_len * key_len);
  for (std::size_t i = 0; i < query_len; ++i) {
    for (std::size_t j = 0; j < key_len; ++j) {
      const auto dist = static_cast<std::int64_t>(j) - static_cast<std::int64_t>(i);
      buckets[i * key_len + j] =
          static_cast<TokenId>(relative_bucket(dist, config_.rel_buckets, config_.rel_max_distance));
    }
  }
  return embedding(parameter(table), std::span<const TokenId>(buckets));
}

template <class Real>
typename Model<Real>::T Model<Real>::run_stack(const std::string& prefix, std::size_t layers,
                                               const TokenBatch& input, const T* memory,
                                               const TokenBatch* memory_batch,
                                               const ForwardPass<Real>& pass) const {
  check_length(input);
  const bool detach = prefix == "aux" && config_.detach_aux_embedding;
  T x = embed(prefix, input, detach, pass);
  const auto valid = input.valid_mask();
  AttentionSpec self_spec{input.rows, config_.n_heads, input.cols, input.cols, prefix == "dec", valid};
  AttentionSpec cross_spec;
  if (memory) {
    if (memory_batch->rows != input.rows) {
      throw DimensionError("decoder batch has " + std::to_string(input.rows) + " rows but the encoder batch has " +
                           std::to_string(memory_batch->rows));
    }
    cross_spec = AttentionSpec{input.rows, config_.n_heads, input.cols, memory_batch->cols, false,
                               memory_batch->valid_mask()};
  }
  T shared_bias;
  if (config_.share_rel_bias_layers) shared_bias = relative_bias(rel_table_name(prefix, 0), input.cols, input.cols);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    const T bias = config_.share_rel_bias_layers ? shared_bias
                                                 : relative_bias(rel_table_name(prefix, l), input.cols, input.cols);
    x = sublayer(x, lp + ".self_ln", pass,
                 [&](const T& h) { return attention_block(lp + ".self", h, h, bias, self_spec); });
    if (memory) {
      x = sublayer(x, lp + ".cross_ln", pass,
                   [&](const T& h) { return attention_block(lp + ".cross", h, *memory, T(), cross_spec); });
    }
    x = sublayer(x, lp + ".ffn_ln", pass, [&](const T& h) { return feed_forward(lp + ".ffn", h, valid, pass); });
  }
  if (config_.norm_style == NormStyle::pre_ln) x = layer_norm_named(x, prefix + ".final_ln");
  return x;
}

template <class Real>
typename Model<Real>::T Model<Real>::aux_hidden(const TokenBatch& masked, const ForwardPass<Real>& pass) const {
  return run_stack("aux", config_.effective_aux_layers(), masked, nullptr, nullptr, pass);
}

template <class Real>
typename Model<Real>::T Model<Real>::mlm_logits(const T& hidden, std::span<const TokenId> rows) const {
  const T h = rows.empty() ? hidden : embedding(hidden, rows);
  return add_bias(matmul_nt(h, token_table(config_.detach_aux_embedding)), parameter("aux.mlm_bias"));
}

template <class Real>
typename Model<Real>::T Model<Real>::aux_forward(const TokenBatch& masked, const ForwardPass<Real>& pass) const {
  return mlm_logits(aux_hidden(masked, pass));
}

template <class Real>
typename Model<Real>::T Model<Real>::encode(const TokenBatch& input, const ForwardPass<Real>& pass) const {
  return run_stack("enc", config_.enc_layers, input, nullptr, nullptr, pass);
}

template <class Real>
typename Model<Real>::T Model<Real>::decode(const T& memory, const TokenBatch& memory_batch,
                                            const TokenBatch& decoder_input, const ForwardPass<Real>& pass) const {
  return run_stack("dec", config_.dec_layers, decoder_input, &memory, &memory_batch, pass);
}

template <class Real>
typename Model<Real>::T Model<Real>::rtd_logits(const T& hidden) const {
  T h = relu(linear_named(hidden, "rtd.dense"));
  h = layer_norm_named(h, "rtd.ln");
  return linear_named(h, "rtd.out");
}

template <class Real>
typename Model<Real>::T Model<Real>::clm_logits(const T& decoder_hidden, std::span<const TokenId> rows) const {
  T h = rows.empty() ? decoder_hidden : embedding(decoder_hidden, rows);
  if (config_.clm_head_style == ClmHeadStyle::projection) {
    h = layer_norm_named(relu(linear_named(h, "clm.dense")), "clm.ln");
  }
  return add_bias(matmul_nt(h, token_table(false)), parameter("clm.bias"));
}

template <class Real>
std::vector<NamedArray> Model<Real>::export_tensors() const {
  std::vector<NamedArray> out;
  out.reserve(names_.size());
  const DType dtype = sizeof(Real) == sizeof(double) ? DType::f64 : DType::f32;
  for (const auto& name : names_) {
    const T& p = params_.at(name);
    out.push_back({name, p.shape(), dtype, std::vector<double>(p.data().begin(), p.data().end())});
  }
  return out;
}

template <class Real>
void Model<Real>::import_tensors(const std::vector<NamedArray>& arrays,
                                 const std::function<bool(const std::string&)>& select) {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  for (const auto& name : names_) {
    if (select && !select(name)) continue;
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    T& p = params_.at(name);
    if (it->second->shape != p.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(it->second->shape) + ", expected " +
                            shape_str(p.shape()));
    }
    auto dst = p.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(it->second->values[i]);
  }
}

template <class Real>
TokenId sample_categorical(std::span<const Real> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw ContractError("cannot sample from an empty distribution");
  if (!(temperature > 0.0)) throw ConfigError("sampling temperature must be positive");
  double peak = -std::numeric_limits<double>::infinity();
  for (Real l : logits) peak = std::max(peak, static_cast<double>(l));
  std::vector<double> weights(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    weights[i] = std::exp((static_cast<double>(logits[i]) - peak) / temperature);
    total += weights[i];
  }
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  for (std::size_t i = weights.size(); i > 0; --i) {
    if (weights[i - 1] > 0.0) return static_cast<TokenId>(i - 1);
  }
  return 0;
}

template <class Real>
TokenSeq sample_noise(const Tensor<Real>& logits, std::span<const TokenId> x_orig, const MaskPlan& plan,
                      double temperature, Rng& rng) {
  if (plan.flags.size() != x_orig.size() || logits.rank() != 2 || logits.dim(0) != x_orig.size()) {
    throw ContractError("logits " + shape_str(logits.shape()) + " and plan of " + std::to_string(plan.flags.size()) +
                        " positions must align with a sequence of " + std::to_string(x_orig.size()));
  }
  const std::size_t vocab = logits.dim(1);
  TokenSeq out(x_orig.begin(), x_orig.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (plan.flags[i]) out[i] = sample_categorical(logits.data().subspan(i * vocab, vocab), temperature, rng);
  }
  return out;
}

template class Model<float>;
template class Model<double>;
template TokenId sample_categorical<float>(std::span<const float>, double, Rng&);
template TokenId sample_categorical<double>(std::span<const double>, double, Rng&);
template TokenSeq sample_noise<float>(const Tensor<float>&, std::span<const TokenId>, const MaskPlan&, double, Rng&);
template TokenSeq sample_noise<double>(const Tensor<double>&, std::span<const TokenId>, const MaskPlan&, double,
                                       Rng&);

}  // namespace metrolab
