// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metrolab/checkpoint.hpp"
#include "metrolab/config.hpp"
#include "metrolab/data.hpp"
#include "metrolab/model.hpp"
#include "metrolab/objectives.hpp"

namespace metrolab {

/// Linear warmup to peak, then inverse-square-root decay. step counts from 1.
double learning_rate(std::uint64_t step, double peak, std::size_t warmup);

template <class Real>
struct NamedTensor {
  std::string name;
  Tensor<Real> tensor;
};

template <class Real>
struct AdamState {
  std::map<std::string, std::vector<Real>> m;
  std::map<std::string, std::vector<Real>> v;
  std::uint64_t step = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
};

/// One AdamW update with decoupled weight decay. Parameters without a gradient
/// buffer are left untouched, moments included.
template <class Real>
void adam_step(const std::vector<NamedTensor<Real>>& params, AdamState<Real>& state, const AdamHyper& hyper,
               double lr);

/// Global L2 norm over all gradient buffers.
template <class Real>
double global_grad_norm(const std::vector<NamedTensor<Real>>& params);

/// Scales gradients by clip / norm when the norm exceeds clip (> 0). Returns the
/// norm before clipping.
template <class Real>
double clip_gradients(const std::vector<NamedTensor<Real>>& params, double clip);

/// Flags a non-finite loss, or a loss above factor × the median of the preceding
/// `window` losses once at least min_history of them exist.
class DivergenceDetector {
 public:
  DivergenceDetector(double factor = 10.0, std::size_t window = 100, std::size_t min_history = 10);

  std::optional<std::string> observe(std::uint64_t step, double loss);
  const std::vector<double>& history() const { return history_; }

 private:
  double factor_;
  std::size_t window_;
  std::size_t min_history_;
  std::vector<double> history_;
};

struct MetricsRow {
  std::uint64_t step = 0;
  double l_mlm = 0, l_rtd = 0, l_clm = 0, combined = 0, grad_norm = 0;
  double rtd_recall_masked = 0, rtd_precision = 0, lr = 0;
  RtdStats rtd;
};

inline constexpr const char* kMetricsHeader =
    "step,l_mlm,l_rtd,l_clm,combined,grad_norm,rtd_recall_masked,rtd_precision,lr";

std::string format_metrics_row(const MetricsRow& row);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct TrainOutcome {
  std::uint64_t steps = 0;
  bool diverged = false;
  std::string divergence_reason;
  std::uint64_t divergence_step = 0;
  std::vector<MetricsRow> metrics;
};

/// Pretraining with the METRO objective or sentinel span corruption.
template <class Real>
class Pretrainer {
 public:
  Pretrainer(RunConfig config, const Vocab& vocab, std::vector<TokenSeq> sequences);

  /// Restores parameters, optimizer moments, rng and step from a checkpoint
  /// written by snapshot().
  void restore(const Checkpoint& checkpoint);
  Checkpoint snapshot() const;

  /// One optimization step. Throws DivergenceError on a non-finite loss or gradient
  /// or when the detector fires; the parameters are not updated in that case.
  MetricsRow step();

  /// Runs until total_steps (or `until`), writing metrics and checkpoints under
  /// run_dir when write_artifacts is set. Divergence ends the run early.
  TrainOutcome run(std::optional<std::uint64_t> until = std::nullopt, bool write_artifacts = false,
                   const std::function<void(const MetricsRow&)>& on_row = {});

  Model<Real>& model() { return model_; }
  const Model<Real>& model() const { return model_; }
  std::uint64_t steps_done() const { return step_; }
  const RunConfig& config() const { return config_; }
  std::vector<NamedTensor<Real>> trainable() const;

 private:
  RunConfig config_;
  SentinelRange sentinels_;
  MaskableFn maskable_;
  Model<Real> model_;
  BatchIterator batches_;
  Rng rng_;
  AdamState<Real> adam_;
  DivergenceDetector detector_;
  std::uint64_t step_ = 0;
};

struct Seq2SeqExample {
  TokenSeq input;
  TokenSeq target;  // without EOS
};

/// Sequence-to-sequence finetuning of the main model. Auxiliary and RTD tensors are
/// never optimized; targets get EOS appended.
template <class Real>
class Finetuner {
 public:
  Finetuner(RunConfig config, Model<Real> model, std::vector<Seq2SeqExample> examples);

  MetricsRow step();
  TrainOutcome run(std::optional<std::uint64_t> until = std::nullopt, bool write_artifacts = false,
                   const std::function<void(const MetricsRow&)>& on_row = {});
  Checkpoint snapshot() const;

  Model<Real>& model() { return model_; }
  std::vector<NamedTensor<Real>> trainable() const;
  double peak_lr() const { return config_.train.peak_lr * config_.train.lr_multiplier_finetune; }

 private:
  RunConfig config_;
  Model<Real> model_;
  std::vector<Seq2SeqExample> examples_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  Rng rng_;
  AdamState<Real> adam_;
  DivergenceDetector detector_;
  std::uint64_t step_ = 0;
};

/// True for tensors that finetuning and inference use.
bool is_main_model_tensor(const std::string& name);

/// Loads main-model tensors from a pretraining checkpoint; missing ones raise
/// CheckpointError.
template <class Real>
void load_main_model(Model<Real>& model, const Checkpoint& checkpoint);

template <class Real>
TokenSeq greedy_decode(const Model<Real>& model, std::span<const TokenId> input, std::size_t max_len);

template <class Real>
double exact_match(const Model<Real>& model, const std::vector<Seq2SeqExample>& examples, std::size_t max_len);

/// Encoder inputs truncated to seq_len, targets to target_len − 1 before EOS.
std::pair<TokenBatch, TargetSpec> seq2seq_batch(const std::vector<Seq2SeqExample>& examples,
                                                std::span<const std::size_t> indices, std::size_t seq_len,
                                                std::size_t target_len);

}  // namespace metrolab
