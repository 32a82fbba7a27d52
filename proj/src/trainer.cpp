// SPDX-License-Identifier: Apache-2.0
#include "metrolab/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "metrolab/errors.hpp"

namespace metrolab {
namespace {

constexpr const char* kOptM = "opt.m.";
constexpr const char* kOptV = "opt.v.";
constexpr const char* kLossHistory = "trainer.loss_history";

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

ModelConfig resolve_model_config(const RunConfig& config, const Vocab& vocab) {
  ModelConfig m = config.model;
  if (m.vocab_size == 0) m.vocab_size = vocab.size();
  if (m.vocab_size != vocab.size()) {
    throw ConfigError("model.vocab_size is " + std::to_string(m.vocab_size) + " but the vocabulary has " +
                      std::to_string(vocab.size()) + " entries");
  }
  return m;
}

std::uint64_t required_seed(const RunConfig& config) {
  if (!config.train.seed) throw ConfigError("train.seed is required (pass --seed or set it in the config)");
  return *config.train.seed;
}

AdamHyper hyper_of(const TrainConfig& t) { return {t.adam_beta1, t.adam_beta2, t.adam_eps, t.weight_decay}; }

template <class Real>
void zero_all(const std::vector<NamedTensor<Real>>& params) {
  for (const auto& p : params) {
    Tensor<Real> handle = p.tensor;
    handle.zero_grad();
  }
}

template <class Real>
void append_optimizer_state(Checkpoint& ck, const AdamState<Real>& adam, const std::vector<double>& history) {
  const DType dtype = sizeof(Real) == sizeof(double) ? DType::f64 : DType::f32;
  for (const auto& [name, m] : adam.m) {
    ck.tensors.push_back({kOptM + name, Shape{m.size()}, dtype, std::vector<double>(m.begin(), m.end())});
  }
  for (const auto& [name, v] : adam.v) {
    ck.tensors.push_back({kOptV + name, Shape{v.size()}, dtype, std::vector<double>(v.begin(), v.end())});
  }
  ck.tensors.push_back({kLossHistory, Shape{history.size()}, DType::f64, history});
}

template <class Real>
void restore_optimizer_state(const Checkpoint& ck, AdamState<Real>& adam) {
  adam = AdamState<Real>{};
  adam.step = ck.step;
  for (const auto& t : ck.tensors) {
    const bool is_m = t.name.rfind(kOptM, 0) == 0;
    const bool is_v = t.name.rfind(kOptV, 0) == 0;
    if (!is_m && !is_v) continue;
    auto& slot = (is_m ? adam.m : adam.v)[t.name.substr(6)];
    slot.assign(t.values.begin(), t.values.end());
  }
}

bool finite(double x) { return std::isfinite(x); }

}  // namespace

double learning_rate(std::uint64_t step, double peak, std::size_t warmup) {
  const double s = static_cast<double>(std::max<std::uint64_t>(step, 1));
  const double w = static_cast<double>(std::max<std::size_t>(warmup, 1));
  return peak * std::min(s / w, std::sqrt(w / s));
}

template <class Real>
void adam_step(const std::vector<NamedTensor<Real>>& params, AdamState<Real>& state, const AdamHyper& hyper,
               double lr) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (const auto& [name, tensor] : params) {
    if (!tensor.has_grad()) continue;
    Tensor<Real> p = tensor;
    auto theta = p.mutable_data();
    const auto g = tensor.grad();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != theta.size()) m.assign(theta.size(), Real(0));
    if (v.size() != theta.size()) v.assign(theta.size(), Real(0));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = hyper.beta1 * static_cast<double>(m[i]) + (1.0 - hyper.beta1) * gi;
      const double vi = hyper.beta2 * static_cast<double>(v[i]) + (1.0 - hyper.beta2) * gi * gi;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + hyper.eps);
      const double th = static_cast<double>(theta[i]);
      theta[i] = static_cast<Real>(th - lr * (update + hyper.weight_decay * th));
    }
  }
}

template <class Real>
double global_grad_norm(const std::vector<NamedTensor<Real>>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (Real g : p.tensor.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(total);
}

template <class Real>
double clip_gradients(const std::vector<NamedTensor<Real>>& params, double clip) {
  const double norm = global_grad_norm(params);
  if (clip > 0.0 && norm > clip && std::isfinite(norm)) {
    const Real scale = static_cast<Real>(clip / norm);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (Real& g : p.tensor.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

DivergenceDetector::DivergenceDetector(double factor, std::size_t window, std::size_t min_history)
    : factor_(factor), window_(window), min_history_(min_history) {}

std::optional<std::string> DivergenceDetector::observe(std::uint64_t step, double loss) {
  if (!std::isfinite(loss)) return "non-finite loss at step " + std::to_string(step);
  std::optional<std::string> verdict;
  if (history_.size() >= min_history_) {
    const std::size_t n = std::min(window_, history_.size());
    std::vector<double> recent(history_.end() - static_cast<std::ptrdiff_t>(n), history_.end());
    std::nth_element(recent.begin(), recent.begin() + static_cast<std::ptrdiff_t>(n / 2), recent.end());
    double median = recent[n / 2];
    if (n % 2 == 0) {
      const double lower = *std::max_element(recent.begin(), recent.begin() + static_cast<std::ptrdiff_t>(n / 2));
      median = 0.5 * (median + lower);
    }
    if (loss > factor_ * median) {
      verdict = "loss " + fmt(loss) + " at step " + std::to_string(step) + " exceeds " + fmt(factor_) +
                "x the trailing median " + fmt(median);
    }
  }
  if (!verdict) history_.push_back(loss);
  return verdict;
}

std::string format_metrics_row(const MetricsRow& r) {
  return std::to_string(r.step) + "," + fmt(r.l_mlm) + "," + fmt(r.l_rtd) + "," + fmt(r.l_clm) + "," +
         fmt(r.combined) + "," + fmt(r.grad_norm) + "," + fmt(r.rtd_recall_masked) + "," + fmt(r.rtd_precision) +
         "," + fmt(r.lr);
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write metrics file " + path.string());
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) out << format_metrics_row(r) << '\n';
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw DataError(path.string() + ": unexpected metrics header");
  }
  std::vector<MetricsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> fields;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      double v = 0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc()) {
        if (cell == "nan" || cell == "-nan") v = std::nan("");
        else if (cell == "inf") v = INFINITY;
        else if (cell == "-inf") v = -INFINITY;
        else throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed number '" + cell + "'");
      }
      fields.push_back(v);
    }
    if (fields.size() != 9) throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 9 columns");
    MetricsRow r;
    r.step = static_cast<std::uint64_t>(fields[0]);
    r.l_mlm = fields[1];
    r.l_rtd = fields[2];
    r.l_clm = fields[3];
    r.combined = fields[4];
    r.grad_norm = fields[5];
    r.rtd_recall_masked = fields[6];
    r.rtd_precision = fields[7];
    r.lr = fields[8];
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------

template <class Real>
Pretrainer<Real>::Pretrainer(RunConfig config, const Vocab& vocab, std::vector<TokenSeq> sequences)
    : config_((config.validate(), std::move(config))),
      sentinels_(vocab.sentinels()),
      maskable_(vocab.maskable_fn()),
      model_(resolve_model_config(config_, vocab), Rng::derive(required_seed(config_), 1).next_u64()),
      batches_(std::move(sequences), config_.train.batch_size, required_seed(config_)),
      rng_(Rng::derive(required_seed(config_), 2)),
      detector_(config_.train.divergence_factor, config_.train.divergence_window) {
  config_.model.vocab_size = model_.vocab_size();
  if (config_.train.objective == Objective::finetune) {
    throw ConfigError("train.objective=finetune is handled by the finetune command");
  }
  if (config_.train.objective == Objective::metro && config_.model.target_variant == TargetVariant::masked_only &&
      !config_.train.diagnostic) {
    throw ConfigError(
        "model.target_variant=masked_only is an ill-formed decoding target; it is only available with "
        "train.diagnostic=true");
  }
}

template <class Real>
std::vector<NamedTensor<Real>> Pretrainer<Real>::trainable() const {
  std::vector<NamedTensor<Real>> out;
  for (const auto& name : model_.parameter_names()) out.push_back({name, model_.parameter(name)});
  return out;
}

template <class Real>
MetricsRow Pretrainer<Real>::step() {
  const TokenBatch x = batches_.next();
  const auto params = trainable();
  zero_all(params);
  const auto& t = config_.train;
  const auto& m = config_.model;
  MetricsRow row;
  row.step = step_ + 1;
  Tape<Real> tape;
  Tensor<Real> loss;
  {
    TapeScope<Real> scope(tape);
    ForwardPass<Real> pass{true, &rng_, nullptr};
    if (t.objective == Objective::metro) {
      ObjectiveOptions opts{t.lambda_rtd, t.lambda_clm, t.diagnostic};
      RtdStats stats;
      auto terms = metro_objective(model_, x, opts, rng_, pass, nullptr, &stats);
      const auto b = terms.breakdown();
      row.l_mlm = b.l_mlm;
      row.l_rtd = b.l_rtd;
      row.l_clm = b.l_clm;
      row.rtd = stats;
      row.rtd_recall_masked = stats.recall_masked();
      row.rtd_precision = stats.precision();
      loss = terms.combined;
    } else {
      auto plans = sample_batch_plans(x, m.masking_kind, m.mask_ratio, m.mean_span, rng_, maskable_);
      auto corrupted = build_span_corruption_batch(x, plans, sentinels_, t.t5_target);
      loss = seq2seq_loss(model_, corrupted.encoder_input, corrupted.target, pass);
      row.l_clm = static_cast<double>(loss.item());
    }
  }
  row.combined = static_cast<double>(loss.item());
  if (auto verdict = detector_.observe(row.step, row.combined)) throw DivergenceError(*verdict);
  tape.backward(loss);
  row.grad_norm = clip_gradients(params, t.clip_norm);
  if (!finite(row.grad_norm)) {
    throw DivergenceError("non-finite gradient norm at step " + std::to_string(row.step));
  }
  row.lr = learning_rate(row.step, t.peak_lr, t.warmup_steps);
  adam_step(params, adam_, hyper_of(t), row.lr);
  step_ = row.step;
  return row;
}

template <class Real>
Checkpoint Pretrainer<Real>::snapshot() const {
  Checkpoint ck;
  ck.config_text = serialize_config(config_);
  ck.step = step_;
  ck.rng_state = rng_.serialize();
  ck.tensors = model_.export_tensors();
  append_optimizer_state(ck, adam_, detector_.history());
  return ck;
}

template <class Real>
void Pretrainer<Real>::restore(const Checkpoint& checkpoint) {
  model_.import_tensors(checkpoint.tensors);
  restore_optimizer_state(checkpoint, adam_);
  step_ = checkpoint.step;
  rng_.deserialize(checkpoint.rng_state);
  batches_.seek(step_);
  detector_ = DivergenceDetector(config_.train.divergence_factor, config_.train.divergence_window);
  if (const auto* h = checkpoint.find(kLossHistory)) {
    for (double loss : h->values) detector_.observe(0, loss);
  }
}

namespace {

template <class Trainer>
TrainOutcome run_loop(Trainer& trainer, const RunConfig& config, std::uint64_t target, bool write_artifacts,
                      const std::function<void(const MetricsRow&)>& on_row,
                      const std::function<std::uint64_t()>& steps_done) {
  TrainOutcome outcome;
  const auto dir = config.run_dir();
  std::ofstream metrics;
  if (write_artifacts) {
    std::filesystem::create_directories(dir);
    const auto path = dir / "metrics.csv";
    const bool resume = steps_done() > 0 && std::filesystem::exists(path);
    metrics.open(path, std::ios::binary | (resume ? std::ios::app : std::ios::trunc));
    if (!metrics) throw DataError("cannot write " + path.string());
    if (!resume) metrics << kMetricsHeader << '\n';
  }
  while (steps_done() < target) {
    MetricsRow row;
    try {
      row = trainer.step();
    } catch (const DivergenceError& e) {
      outcome.diverged = true;
      outcome.divergence_reason = e.what();
      outcome.divergence_step = steps_done() + 1;
      break;
    }
    if (row.step % config.train.log_interval == 0 || row.step == target) {
      outcome.metrics.push_back(row);
      if (write_artifacts) metrics << format_metrics_row(row) << '\n' << std::flush;
      if (on_row) on_row(row);
    }
    const auto interval = config.train.checkpoint_interval;
    if (write_artifacts && interval > 0 && row.step % interval == 0) {
      save_checkpoint(dir / "checkpoints" / ("step_" + std::to_string(row.step) + ".ckpt"), trainer.snapshot());
    }
  }
  outcome.steps = steps_done();
  if (write_artifacts) save_checkpoint(dir / "final.ckpt", trainer.snapshot());
  return outcome;
}

}  // namespace

template <class Real>
TrainOutcome Pretrainer<Real>::run(std::optional<std::uint64_t> until, bool write_artifacts,
                                   const std::function<void(const MetricsRow&)>& on_row) {
  return run_loop(*this, config_, until.value_or(config_.train.total_steps), write_artifacts, on_row,
                  [this] { return step_; });
}

// ---------------------------------------------------------------------------

bool is_main_model_tensor(const std::string& name) {
  return name.rfind("aux.", 0) != 0 && name.rfind("rtd.", 0) != 0 && name.rfind("opt.", 0) != 0 &&
         name.rfind("trainer.", 0) != 0;
}

template <class Real>
void load_main_model(Model<Real>& model, const Checkpoint& checkpoint) {
  model.import_tensors(checkpoint.tensors, is_main_model_tensor);
}

std::pair<TokenBatch, TargetSpec> seq2seq_batch(const std::vector<Seq2SeqExample>& examples,
                                                std::span<const std::size_t> indices, std::size_t seq_len,
                                                std::size_t target_len) {
  std::vector<TokenSeq> inputs;
  std::vector<SequenceTarget> targets;
  for (std::size_t idx : indices) {
    const auto& ex = examples.at(idx);
    if (ex.input.empty()) throw DataError("finetuning example with an empty input");
    inputs.emplace_back(ex.input.begin(), ex.input.begin() + static_cast<std::ptrdiff_t>(std::min(seq_len, ex.input.size())));
    SequenceTarget t;
    const std::size_t keep = std::min(ex.target.size(), target_len - 1);
    t.decoder_target.assign(ex.target.begin(), ex.target.begin() + static_cast<std::ptrdiff_t>(keep));
    t.decoder_target.push_back(kEos);
    t.loss_mask.assign(t.decoder_target.size(), 1);
    t.decoder_input.push_back(kBos);
    t.decoder_input.insert(t.decoder_input.end(), t.decoder_target.begin(), t.decoder_target.end() - 1);
    targets.push_back(std::move(t));
  }
  return {TokenBatch::from_rows(inputs), targets_from_sequences(targets, TargetVariant::all_tokens)};
}

template <class Real>
Finetuner<Real>::Finetuner(RunConfig config, Model<Real> model, std::vector<Seq2SeqExample> examples)
    : config_((config.validate(), std::move(config))),
      model_(std::move(model)),
      examples_(std::move(examples)),
      rng_(Rng::derive(required_seed(config_), 3)),
      detector_(config_.train.divergence_factor, config_.train.divergence_window) {
  if (examples_.empty()) throw DataError("finetuning needs at least one example");
  order_ = epoch_permutation(examples_.size(), required_seed(config_), 0);
}

template <class Real>
std::vector<NamedTensor<Real>> Finetuner<Real>::trainable() const {
  std::vector<NamedTensor<Real>> out;
  for (const auto& name : model_.parameter_names()) {
    if (is_main_model_tensor(name)) out.push_back({name, model_.parameter(name)});
  }
  return out;
}

template <class Real>
MetricsRow Finetuner<Real>::step() {
  const auto& t = config_.train;
  std::vector<std::size_t> picked;
  while (picked.size() < std::min(t.batch_size, examples_.size())) {
    if (cursor_ >= order_.size()) {
      order_ = epoch_permutation(examples_.size(), required_seed(config_), ++epoch_);
      cursor_ = 0;
    }
    picked.push_back(order_[cursor_++]);
  }
  auto [enc, target] = seq2seq_batch(examples_, picked, config_.data.seq_len, config_.data.target_len);
  const auto params = trainable();
  zero_all(params);
  MetricsRow row;
  row.step = step_ + 1;
  Tape<Real> tape;
  Tensor<Real> loss;
  {
    TapeScope<Real> scope(tape);
    loss = seq2seq_loss(model_, enc, target, ForwardPass<Real>{true, &rng_, nullptr});
  }
  row.l_clm = row.combined = static_cast<double>(loss.item());
  if (auto verdict = detector_.observe(row.step, row.combined)) throw DivergenceError(*verdict);
  tape.backward(loss);
  row.grad_norm = clip_gradients(params, t.clip_norm);
  if (!finite(row.grad_norm)) {
    throw DivergenceError("non-finite gradient norm at step " + std::to_string(row.step));
  }
  row.lr = learning_rate(row.step, peak_lr(), t.warmup_steps);
  adam_step(params, adam_, hyper_of(t), row.lr);
  step_ = row.step;
  return row;
}

template <class Real>
Checkpoint Finetuner<Real>::snapshot() const {
  Checkpoint ck;
  ck.config_text = serialize_config(config_);
  ck.step = step_;
  ck.rng_state = rng_.serialize();
  ck.tensors = model_.export_tensors();
  append_optimizer_state(ck, adam_, detector_.history());
  return ck;
}

template <class Real>
TrainOutcome Finetuner<Real>::run(std::optional<std::uint64_t> until, bool write_artifacts,
                                  const std::function<void(const MetricsRow&)>& on_row) {
  return run_loop(*this, config_, until.value_or(config_.train.total_steps), write_artifacts, on_row,
                  [this] { return step_; });
}

template <class Real>
TokenSeq greedy_decode(const Model<Real>& model, std::span<const TokenId> input, std::size_t max_len) {
  NoGradScope<Real> no_grad;
  const TokenBatch enc = TokenBatch::from_rows({TokenSeq(input.begin(), input.end())});
  const Tensor<Real> memory = model.encode(enc);
  TokenSeq prefix{kBos};
  TokenSeq out;
  const std::size_t limit = std::min(max_len, model.config().max_abs_positions);
  const std::size_t v = model.vocab_size();
  while (out.size() < limit) {
    const TokenBatch dec = TokenBatch::from_rows({prefix});
    const Tensor<Real> hidden = model.decode(memory, enc, dec);
    const std::vector<TokenId> last{static_cast<TokenId>(prefix.size() - 1)};
    const Tensor<Real> logits = model.clm_logits(hidden, last);
    const auto row = logits.data().subspan(0, v);
    const auto next = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    if (next == kEos) break;
    out.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

template <class Real>
double exact_match(const Model<Real>& model, const std::vector<Seq2SeqExample>& examples, std::size_t max_len) {
  if (examples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& ex : examples) hits += greedy_decode(model, ex.input, max_len) == ex.target;
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

#define METROLAB_INSTANTIATE_TRAINER(Real)                                                                       \
  template void adam_step<Real>(const std::vector<NamedTensor<Real>>&, AdamState<Real>&, const AdamHyper&,       \
                                double);                                                                         \
  template double global_grad_norm<Real>(const std::vector<NamedTensor<Real>>&);                                 \
  template double clip_gradients<Real>(const std::vector<NamedTensor<Real>>&, double);                           \
  template class Pretrainer<Real>;                                                                               \
  template class Finetuner<Real>;                                                                                \
  template void load_main_model<Real>(Model<Real>&, const Checkpoint&);                                          \
  template TokenSeq greedy_decode<Real>(const Model<Real>&, std::span<const TokenId>, std::size_t);              \
  template double exact_match<Real>(const Model<Real>&, const std::vector<Seq2SeqExample>&, std::size_t);

METROLAB_INSTANTIATE_TRAINER(float)
METROLAB_INSTANTIATE_TRAINER(double)

}  // namespace metrolab
