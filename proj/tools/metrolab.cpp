// SPDX-License-Identifier: Apache-2.0
//
// metrolab: pretraining, finetuning, evaluation, analysis and diagnostics.
#include <openssl/sha.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "metrolab/analysis.hpp"
#include "metrolab/checkpoint.hpp"
#include "metrolab/config.hpp"
#include "metrolab/errors.hpp"
#include "metrolab/eval_prompt.hpp"
#include "metrolab/experiments.hpp"
#include "metrolab/masking.hpp"
#include "metrolab/objectives.hpp"
#include "metrolab/synthetic.hpp"
#include "metrolab/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace metrolab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitData = 4;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

/// SHA-1 of "blob <size>\0<content>", as git computes object ids.
std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  SHA_CTX ctx;
  SHA1_Init(&ctx);
  SHA1_Update(&ctx, header.data(), header.size());
  SHA1_Update(&ctx, content.data(), content.size());
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1_Final(digest, &ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char b : digest) {
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

struct Manifest {
  std::string command;
  std::string config_text;
  std::vector<fs::path> inputs;
  json extra = json::object();
};

void write_manifest(const fs::path& dir, const Manifest& m) {
  json j;
  j["command"] = m.command;
  j["created"] = utc_now();
  j["config_sha1"] = git_blob_sha1(m.config_text);
  json inputs = json::array();
  for (const auto& p : m.inputs) {
    if (p.empty()) continue;
    inputs.push_back({{"path", p.string()}, {"sha1", git_blob_sha1(read_file(p))}});
  }
  j["inputs"] = inputs;
  j["versions"] = {{"metrolab", METROLAB_VERSION},
                   {"compiler", __VERSION__},
                   {"cli11", CLI11_VERSION},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  for (const auto& [k, v] : m.extra.items()) j[k] = v;
  write_file(dir / "manifest.json", j.dump(2) + "\n");
  if (!m.config_text.empty()) write_file(dir / "config.cfg", m.config_text);
}

// Options shared by every config-driven subcommand.
struct ConfigOptions {
  std::string path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string output_dir;
  std::string run_name;

  void attach(CLI::App* app, bool config_required) {
    auto* opt = app->add_option("-c,--config", path, "INI run configuration");
    if (config_required) opt->required();
    opt->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "Random seed (required here or as train.seed)");
    app->add_option("--set", sets, "Override a key: section.key=value (repeatable)");
    app->add_option("--output-dir", output_dir, "Overrides output_dir");
    app->add_option("--run-name", run_name, "Overrides run_name");
  }

  RunConfig load() const {
    RunConfig config = path.empty() ? RunConfig{} : load_config(path);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + kv + "'");
      set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (const auto& key : apply_env_overrides(config, [](const char* name) { return std::getenv(name); })) {
      std::cerr << "env override: " << key << "\n";
    }
    if (seed) config.train.seed = *seed;
    if (!output_dir.empty()) config.output_dir = output_dir;
    if (!run_name.empty()) config.run_name = run_name;
    if (!config.train.seed) throw ConfigError("train.seed: a seed is required (pass --seed or set train.seed)");
    config.validate();
    return config;
  }
};

void print_row(const MetricsRow& r) {
  std::fprintf(stderr, "step %llu  combined %.4f  mlm %.4f  rtd %.4f  clm %.4f  |g| %.3f  lr %.3g\n",
               static_cast<unsigned long long>(r.step), r.combined, r.l_mlm, r.l_rtd, r.l_clm, r.grad_norm, r.lr);
}

int report_outcome(const TrainOutcome& outcome, const fs::path& dir) {
  if (outcome.diverged) {
    write_file(dir / "divergence.txt", "step " + std::to_string(outcome.divergence_step) + ": " +
                                           outcome.divergence_reason + "\n");
    std::cerr << "diverged at step " << outcome.divergence_step << ": " << outcome.divergence_reason << "\n";
    return kExitDivergence;
  }
  std::cerr << "finished " << outcome.steps << " steps; artifacts in " << dir.string() << "\n";
  return kExitOk;
}

// ---- pretrain -------------------------------------------------------------

template <class Real>
TrainOutcome pretrain_with(const RunConfig& config, const PretrainingData& data, const std::string& resume,
                           bool quiet) {
  Pretrainer<Real> trainer(config, data.vocab, data.sequences);
  if (!resume.empty()) trainer.restore(load_checkpoint(resume));
  return trainer.run(std::nullopt, true, [quiet](const MetricsRow& r) {
    if (!quiet) print_row(r);
  });
}

int run_pretrain(const RunConfig& config, const std::string& resume, bool quiet, const std::string& command) {
  if (config.train.objective == Objective::finetune) {
    throw ConfigError("train.objective: 'finetune' runs use the finetune subcommand");
  }
  const PretrainingData data = prepare_pretraining_data(config);
  const fs::path dir = config.run_dir();
  fs::create_directories(dir);
  data.vocab.save(dir / "vocab.txt");
  Manifest m{command, serialize_config(config), {config.data.corpus, config.data.vocab_file, resume}};
  m.extra["packing"] = {{"documents", data.stats.documents},
                        {"skipped_short", data.stats.skipped_short},
                        {"sequences", data.stats.sequences},
                        {"vocab_size", data.vocab.size()}};
  write_manifest(dir, m);
  const TrainOutcome outcome = config.train.precision == Precision::f64
                                   ? pretrain_with<double>(config, data, resume, quiet)
                                   : pretrain_with<float>(config, data, resume, quiet);
  return report_outcome(outcome, dir);
}

// ---- checkpoint helpers ---------------------------------------------------

Vocab vocab_for_checkpoint(const fs::path& checkpoint, const RunConfig& config, const std::string& explicit_path) {
  const auto& d = config.data;
  if (!explicit_path.empty()) return Vocab::load(explicit_path, d.vocab_mode, d.num_sentinels);
  for (const fs::path& dir : {checkpoint.parent_path(), checkpoint.parent_path().parent_path()}) {
    if (fs::exists(dir / "vocab.txt")) return Vocab::load(dir / "vocab.txt", d.vocab_mode, d.num_sentinels);
  }
  if (!d.vocab_file.empty()) return Vocab::load(d.vocab_file, d.vocab_mode, d.num_sentinels);
  throw DataError("no vocab.txt next to " + checkpoint.string() + "; pass --vocab");
}

std::vector<Seq2SeqExample> examples_from_tasks(const Vocab& vocab, const std::vector<std::string>& files,
                                                std::size_t limit) {
  std::vector<Seq2SeqExample> out;
  for (const auto& f : files) {
    for (auto& ex : encode_pairs(vocab, instances_as_pairs(load_task_file(f)))) out.push_back(std::move(ex));
  }
  if (limit > 0 && out.size() > limit) out.resize(limit);
  if (out.empty()) throw DataError("no examples in the given task files");
  return out;
}

fs::path analysis_dir(const RunConfig& config, const std::string& out, const std::string& sub) {
  return out.empty() ? config.run_dir() / sub : fs::path(out);
}

// ---- finetune -------------------------------------------------------------

template <class Real>
TrainOutcome finetune_with(const RunConfig& config, const Vocab& vocab, const std::string& init,
                           std::vector<Seq2SeqExample> examples, bool quiet) {
  ModelConfig mc = config.model;
  mc.vocab_size = vocab.size();
  Model<Real> model(mc, Rng::derive(*config.train.seed, 1).next_u64());
  if (!init.empty()) load_main_model(model, load_checkpoint(init));
  Finetuner<Real> tuner(config, std::move(model), std::move(examples));
  return tuner.run(std::nullopt, true, [quiet](const MetricsRow& r) {
    if (!quiet) print_row(r);
  });
}

// ---- eval / analysis ------------------------------------------------------

template <class Real>
int eval_with(const Checkpoint& ck, const Vocab& vocab, const std::vector<std::string>& tasks, const fs::path& dir) {
  const auto model = model_from_checkpoint<Real>(ck);
  std::vector<fs::path> files(tasks.begin(), tasks.end());
  const auto report = evaluate_mixture(model_scorer(model), vocab, files);
  write_file(dir / "eval.csv", format_mixture_csv(report));
  for (const auto& t : report.tasks) std::cout << t.task << "\t" << t.score() << "\n";
  std::cout << "mean\t" << report.mean_score() << "\n";
  return kExitOk;
}

template <class Real>
int activations_with(const Checkpoint& ck, const std::vector<Seq2SeqExample>& examples, double threshold,
                     const fs::path& dir) {
  const auto model = model_from_checkpoint<Real>(ck);
  const auto report = census_activations(model, examples, threshold);
  write_file(dir / "activations.csv", format_activation_csv(report));
  std::cout << "neurons\t" << report.neuron_count() << "\nunder_activated\t" << report.under_activated_count()
            << "\nunder_activated_pct\t" << report.under_activated_percentage() << "\n";
  return kExitOk;
}

std::string histogram_csv(const SensitivityHistogram& h) {
  std::ostringstream out;
  out << "lower,upper,count\n";
  const auto e = SensitivityHistogram::edges();
  out << "0," << e.front() << ',' << h.counts.front() << '\n';
  for (std::size_t i = 0; i < SensitivityHistogram::kInnerBins; ++i) {
    out << e[i] << ',' << e[i + 1] << ',' << h.counts[i + 1] << '\n';
  }
  out << e.back() << ",inf," << h.counts.back() << '\n';
  return out.str();
}

template <class Real>
int sensitivity_with(const Checkpoint& ck, const std::vector<Seq2SeqExample>& examples, SensitivityFormula formula,
                     const fs::path& dir) {
  auto model = model_from_checkpoint<Real>(ck);
  const auto report = parameter_sensitivity(model, examples, formula);
  write_file(dir / "sensitivity.csv", format_sensitivity_csv(report));
  write_file(dir / "sensitivity_histogram.csv", histogram_csv(report.histogram));
  const auto s = report.overall();
  std::cout << "parameters\t" << report.parameter_count() << "\nloss\t" << report.loss << "\nmean\t" << s.mean
            << "\nvariance\t" << s.var << "\n";
  return kExitOk;
}

template <class Real>
CheckpointAnalysis analyse_checkpoint(const Checkpoint& ck, const std::vector<Seq2SeqExample>& examples) {
  auto model = model_from_checkpoint<Real>(ck);
  const auto census = census_activations(model, examples);
  const auto sens = parameter_sensitivity(model, examples);
  return {ck.step, census.neuron_count(), sens.parameter_count(), census.under_activated_percentage(),
          sens.overall().var};
}

std::vector<fs::path> run_checkpoints(const fs::path& run) {
  std::vector<std::pair<std::uint64_t, fs::path>> found;
  if (fs::exists(run / "checkpoints")) {
    for (const auto& e : fs::directory_iterator(run / "checkpoints")) {
      const auto stem = e.path().stem().string();
      if (e.path().extension() == ".ckpt" && stem.rfind("step_", 0) == 0) {
        found.emplace_back(std::stoull(stem.substr(5)), e.path());
      }
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& [step, p] : found) out.push_back(p);
  if (fs::exists(run / "final.ckpt")) out.push_back(run / "final.ckpt");
  if (out.empty()) throw CheckpointError("no checkpoints under " + run.string());
  return out;
}

RunAnalysis analyse_run(const fs::path& run, const std::vector<Seq2SeqExample>& examples) {
  RunAnalysis out;
  out.label = run.filename().string();
  std::uint64_t last = 0;
  for (const auto& path : run_checkpoints(run)) {
    const Checkpoint ck = load_checkpoint(path);
    if (!out.checkpoints.empty() && ck.step == last) continue;
    last = ck.step;
    const auto config = config_from_checkpoint(ck);
    out.checkpoints.push_back(config.train.precision == Precision::f64 ? analyse_checkpoint<double>(ck, examples)
                                                                       : analyse_checkpoint<float>(ck, examples));
  }
  return out;
}

// ---- export-report --------------------------------------------------------

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::string export_report(const std::vector<fs::path>& runs) {
  std::ostringstream out;
  out << "run,command,objective,rtd_location,target_variant,masking_kind,steps,diverged," << kMetricsHeader << "\n";
  for (const auto& run : runs) {
    const json manifest = json::parse(read_file(run / "manifest.json"));
    const RunConfig config = load_config(run / "config.cfg");
    std::vector<MetricsRow> rows;
    if (fs::exists(run / "metrics.csv")) rows = read_metrics_csv(run / "metrics.csv");
    out << csv_field(run.filename().string()) << ',' << csv_field(manifest.value("command", "")) << ','
        << enum_name(config.train.objective) << ',' << enum_name(config.model.rtd_location) << ','
        << enum_name(config.model.target_variant) << ',' << mask_pattern_name(config.model.masking_kind) << ','
        << (rows.empty() ? 0 : rows.back().step) << ',' << (fs::exists(run / "divergence.txt") ? 1 : 0) << ',';
    if (rows.empty()) {
      out << std::string(std::count(kMetricsHeader, kMetricsHeader + std::strlen(kMetricsHeader), ','), ',') << "\n";
    } else {
      out << format_metrics_row(rows.back()) << "\n";
    }
  }
  return out.str();
}

std::vector<fs::path> discover_runs(const fs::path& root) {
  std::vector<fs::path> out;
  if (fs::exists(root / "manifest.json") && fs::exists(root / "config.cfg")) out.push_back(root);
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "manifest.json") && fs::exists(e.path() / "config.cfg") &&
        fs::exists(e.path() / "metrics.csv")) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---- generate-data --------------------------------------------------------

std::string example_config(const fs::path& dir, std::uint64_t seed) {
  RunConfig c;
  c.data.corpus = (dir / "corpus.txt").string();
  c.data.vocab_file = (dir / "vocab.txt").string();
  c.data.train_tasks = (dir / "tasks" / "nli_train.tsv").string() + "," +
                       (dir / "tasks" / "copy_train.tsv").string() + "," +
                       (dir / "tasks" / "word_sense_train.tsv").string();
  c.data.eval_tasks = (dir / "tasks" / "nli.tsv").string() + "," + (dir / "tasks" / "copy.tsv").string() + "," +
                      (dir / "tasks" / "word_sense.tsv").string();
  c.train.seed = seed;
  c.output_dir = (dir / "runs").string();
  c.run_name = "metro";
  return serialize_config(c);
}

int generate_data(const fs::path& dir, std::size_t bytes, std::size_t task_items, std::uint64_t seed) {
  auto documents = generate_corpus(bytes, seed);
  write_lines(dir / "corpus.txt", documents);
  const auto task_seed = [seed](std::uint64_t k) { return Rng::derive(seed, k).next_u64(); };
  const std::vector<std::pair<std::string, std::vector<PromptInstance>>> tasks = {
      {"nli_train", generate_nli_task(task_items, task_seed(10))},
      {"copy_train", generate_copy_task(task_items, task_seed(11))},
      {"word_sense_train", generate_word_sense_task(task_items, task_seed(12))},
      {"nli", generate_nli_task(task_items, task_seed(20))},
      {"copy", generate_copy_task(task_items, task_seed(21))},
      {"word_sense", generate_word_sense_task(task_items, task_seed(22))},
  };
  for (const auto& [name, instances] : tasks) {
    write_task_file(dir / "tasks" / (name + ".tsv"), instances);
    for (const auto& [input, answer] : instances_as_pairs(instances)) {
      documents.push_back(input);
      documents.push_back(answer);
    }
    for (const auto& inst : instances) {
      for (const auto& c : inst.choices) documents.push_back(c);
    }
  }
  // One vocabulary covers corpus and task words so finetuning and evaluation see no UNK.
  Vocab::build(documents, VocabMode::word, 0, RunConfig{}.data.num_sentinels).save(dir / "vocab.txt");
  write_file(dir / "pretrain.cfg", example_config(dir, seed));
  Manifest m{"generate-data", "", {dir / "corpus.txt", dir / "vocab.txt"}};
  m.extra["seed"] = seed;
  m.extra["bytes"] = bytes;
  write_manifest(dir, m);
  std::cerr << "wrote corpus, tasks and pretrain.cfg under " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metrolab: encoder-decoder pretraining with replaced token detection and corrective LM"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string command_line;
  for (int i = 0; i < argc; ++i) command_line += (i ? " " : "") + std::string(argv[i]);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress per-step progress");

  ConfigOptions pre_opts;
  std::string resume;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain with the METRO objective or T5 span corruption");
  pre_opts.attach(pretrain, true);
  pretrain->add_option("--resume", resume, "Continue from a checkpoint of this run")->check(CLI::ExistingFile);

  ConfigOptions ft_opts;
  std::string ft_init, ft_vocab, ft_tasks;
  auto* finetune = app.add_subcommand("finetune", "Sequence-to-sequence finetuning on prompted task files");
  ft_opts.attach(finetune, true);
  finetune->add_option("--init", ft_init, "Pretraining checkpoint")->check(CLI::ExistingFile);
  finetune->add_option("--vocab", ft_vocab, "Vocabulary file (default: next to --init)");
  finetune->add_option("--tasks", ft_tasks, "Comma-separated task files (default: data.train_tasks)");

  std::string ck_path, vocab_path, out_dir, tasks_arg, formula_name = "taylor";
  std::size_t limit = 256;
  double threshold = kDefaultCensusThreshold;
  auto add_checkpoint_opts = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", ck_path, "Model checkpoint")->required()->check(CLI::ExistingFile);
    sub->add_option("--vocab", vocab_path, "Vocabulary file (default: next to the checkpoint)");
    sub->add_option("--tasks", tasks_arg, "Comma-separated task files (default: data.eval_tasks)");
    sub->add_option("--out", out_dir, "Output directory (default: <run>/<subcommand>)");
  };
  auto* eval = app.add_subcommand("eval", "Rank-classification accuracy per task and template");
  add_checkpoint_opts(eval);
  auto* act = app.add_subcommand("analyze-activations", "Under-activated feed-forward neuron census");
  add_checkpoint_opts(act);
  act->add_option("--threshold", threshold, "Inactive-token quantile")->check(CLI::Range(0.0, 1.0));
  act->add_option("--limit", limit, "Examples drawn from the task files (0 = all)");
  auto* sens = app.add_subcommand("analyze-sensitivity", "First-order parameter sensitivity");
  add_checkpoint_opts(sens);
  sens->add_option("--formula", formula_name, "taylor | printed")->check(CLI::IsMember({"taylor", "printed"}));
  sens->add_option("--limit", limit, "Examples drawn from the task files (0 = all)");

  std::string cmp_a, cmp_b;
  auto* compare = app.add_subcommand("compare-runs", "Census and sensitivity across the checkpoints of two runs");
  compare->add_option("a", cmp_a, "First run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("b", cmp_b, "Second run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--tasks", tasks_arg, "Comma-separated task files")->required();
  compare->add_option("--limit", limit, "Examples drawn from the task files (0 = all)");
  compare->add_option("--out", out_dir, "Output CSV path")->required();

  std::string variant_name, corpus_path;
  std::size_t trials = 4000;
  std::uint64_t diag_seed = 0;
  auto* ambiguity = app.add_subcommand("diagnose-ambiguity", "Decoder-target ambiguity rate for a target variant");
  ambiguity->add_option("--variant", variant_name, "masked_only | all_tokens | all_tokens_masked_loss")->required();
  ambiguity->add_option("--corpus", corpus_path, "Corpus file (default: the 1 2 3 4 5 collision example)")
      ->check(CLI::ExistingFile);
  ambiguity->add_option("--trials", trials, "Mask draws");
  ambiguity->add_option("--seed", diag_seed, "Random seed")->required();

  std::string pattern_name = "both";
  std::size_t length = 200, draws = 100000;
  double ratio = 0.15, mean_span = 3.0;
  auto* leakage = app.add_subcommand("diagnose-leakage", "Adjacent-mask dependence of iid and span masking");
  leakage->add_option("--pattern", pattern_name, "iid | span | both")->check(CLI::IsMember({"iid", "span", "both"}));
  leakage->add_option("--length", length, "Sequence length");
  leakage->add_option("--draws", draws, "Mask draws");
  leakage->add_option("--ratio", ratio, "Mask ratio");
  leakage->add_option("--mean-span", mean_span, "Mean span length");
  leakage->add_option("--seed", diag_seed, "Random seed")->required();

  ConfigOptions grid_opts;
  std::string preset = "table4";
  std::optional<std::size_t> grid_steps;
  auto* grid = app.add_subcommand("ablation-grid", "Pretrain every named variant of a preset");
  grid_opts.attach(grid, true);
  grid->add_option("--preset", preset, "Variant set")->check(CLI::IsMember({"table4"}));
  grid->add_option("--steps", grid_steps, "Overrides train.total_steps");

  std::vector<std::string> report_runs;
  std::string report_out;
  auto* report = app.add_subcommand("export-report", "Aggregate run manifests and final metrics into one CSV");
  report->add_option("runs", report_runs, "Run directories or roots to scan")->required();
  report->add_option("--out", report_out, "Output CSV (default: stdout)");

  std::string gen_dir;
  std::size_t gen_bytes = 1 << 20, gen_items = 400;
  auto* gen = app.add_subcommand("generate-data", "Write the synthetic corpus, toy task files and a config");
  gen->add_option("--out", gen_dir, "Output directory")->required();
  gen->add_option("--bytes", gen_bytes, "Approximate corpus size");
  gen->add_option("--items", gen_items, "Instances per task file");
  gen->add_option("--seed", diag_seed, "Random seed")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*pretrain) return run_pretrain(pre_opts.load(), resume, quiet, command_line);

    if (*finetune) {
      RunConfig config = ft_opts.load();
      config.train.objective = Objective::finetune;
      const auto task_files = split_list(ft_tasks.empty() ? config.data.train_tasks : ft_tasks);
      if (task_files.empty()) throw ConfigError("data.train_tasks: no task files given");
      Vocab vocab;
      if (!ft_init.empty()) {
        vocab = vocab_for_checkpoint(ft_init, config, ft_vocab);
      } else if (!ft_vocab.empty() || !config.data.vocab_file.empty()) {
        vocab = Vocab::load(ft_vocab.empty() ? config.data.vocab_file : ft_vocab, config.data.vocab_mode,
                            config.data.num_sentinels);
      } else {
        throw ConfigError("finetune needs --init, --vocab or data.vocab_file");
      }
      auto examples = examples_from_tasks(vocab, task_files, 0);
      const fs::path dir = config.run_dir();
      fs::create_directories(dir);
      vocab.save(dir / "vocab.txt");
      std::vector<fs::path> inputs{ft_init};
      for (const auto& f : task_files) inputs.emplace_back(f);
      write_manifest(dir, {command_line, serialize_config(config), inputs});
      const auto outcome = config.train.precision == Precision::f64
                               ? finetune_with<double>(config, vocab, ft_init, std::move(examples), quiet)
                               : finetune_with<float>(config, vocab, ft_init, std::move(examples), quiet);
      return report_outcome(outcome, dir);
    }

    if (*eval || *act || *sens) {
      const Checkpoint ck = load_checkpoint(ck_path);
      const RunConfig config = config_from_checkpoint(ck);
      const Vocab vocab = vocab_for_checkpoint(ck_path, config, vocab_path);
      const auto tasks = split_list(tasks_arg.empty() ? config.data.eval_tasks : tasks_arg);
      if (tasks.empty()) throw ConfigError("data.eval_tasks: no task files given (use --tasks)");
      const bool f64 = config.train.precision == Precision::f64;
      const std::string sub = eval->parsed() ? "eval" : act->parsed() ? "activations" : "sensitivity";
      const fs::path dir = analysis_dir(config, out_dir, sub);
      std::vector<fs::path> inputs{ck_path};
      for (const auto& t : tasks) inputs.emplace_back(t);
      Manifest m{command_line, ck.config_text, inputs};
      m.extra["checkpoint_step"] = ck.step;
      write_manifest(dir, m);
      if (*eval) return f64 ? eval_with<double>(ck, vocab, tasks, dir) : eval_with<float>(ck, vocab, tasks, dir);
      const auto examples = examples_from_tasks(vocab, tasks, limit);
      if (*act) {
        return f64 ? activations_with<double>(ck, examples, threshold, dir)
                   : activations_with<float>(ck, examples, threshold, dir);
      }
      const auto formula = formula_name == "printed" ? SensitivityFormula::printed : SensitivityFormula::taylor;
      return f64 ? sensitivity_with<double>(ck, examples, formula, dir)
                 : sensitivity_with<float>(ck, examples, formula, dir);
    }

    if (*compare) {
      const auto first = run_checkpoints(cmp_a).front();
      const Checkpoint ck = load_checkpoint(first);
      const Vocab vocab = vocab_for_checkpoint(first, config_from_checkpoint(ck), vocab_path);
      const auto examples = examples_from_tasks(vocab, split_list(tasks_arg), limit);
      const auto table = compare_runs(analyse_run(cmp_a, examples), analyse_run(cmp_b, examples));
      write_file(out_dir, table);
      std::cout << table;
      return kExitOk;
    }

    if (*ambiguity) {
      const TargetVariant variant = parse_target_variant(variant_name);
      Rng rng(diag_seed);
      AmbiguityReport r;
      if (corpus_path.empty()) {
        const auto f = collision_fixture();
        r = detect_target_ambiguity(f.corpus, f.proposal, variant, trials, rng, f.vocab.maskable_fn());
      } else {
        const auto docs = load_corpus(corpus_path);
        const Vocab vocab = Vocab::build(docs, VocabMode::word, 0, 0);
        std::vector<TokenSeq> corpus;
        for (const auto& d : docs) corpus.push_back(vocab.encode(d));
        r = detect_target_ambiguity(corpus, unigram_proposal(corpus), variant, trials, rng, vocab.maskable_fn());
      }
      std::cout << "variant\t" << enum_name(variant) << "\ndraws\t" << r.draws << "\ncolliding_pairs\t"
                << r.colliding_pairs << "\nambiguous_pairs\t" << r.ambiguous_pairs << "\nambiguity_rate\t"
                << r.rate() << "\nloss_mask_divergence_rate\t" << r.mask_divergence_rate() << "\n";
      return kExitOk;
    }

    if (*leakage) {
      std::cout << "pattern\tmarginal\tconditional\tlift\tadjacent_correlation\n";
      for (const char* name : {"iid", "span"}) {
        if (pattern_name != "both" && pattern_name != name) continue;
        Rng rng = Rng::derive(diag_seed, name[0] == 'i' ? 1 : 2);
        const auto d = measure_mask_dependence(parse_mask_pattern(name), length, ratio, mean_span, draws, rng);
        std::cout << name << '\t' << d.marginal << '\t' << d.conditional << '\t' << d.lift << '\t'
                  << d.adjacent_correlation << '\n';
      }
      return kExitOk;
    }

    if (*grid) {
      const RunConfig base = grid_opts.load();
      const fs::path root = base.run_dir();
      int worst = kExitOk;
      std::ostringstream summary;
      summary << "row,label,exit_code\n";
      for (const auto& row : ablation_preset(preset)) {
        RunConfig c = base;
        row.apply(c);
        if (grid_steps) c.train.total_steps = *grid_steps;
        c.output_dir = root.string();
        c.run_name = row.slug;
        c.validate();
        std::cerr << "== " << row.label << " (" << row.slug << ")\n";
        const int code = run_pretrain(c, "", quiet, command_line + " [" + row.slug + "]");
        summary << row.slug << ',' << csv_field(row.label) << ',' << code << '\n';
        if (code != kExitOk && worst == kExitOk) worst = code;
      }
      write_file(root / "grid.csv", summary.str());
      write_file(root / "report.csv", export_report(discover_runs(root)));
      std::cerr << "grid summary in " << (root / "grid.csv").string() << "\n";
      return worst;
    }

    if (*report) {
      std::vector<fs::path> runs;
      for (const auto& r : report_runs) {
        for (auto& p : discover_runs(r)) runs.push_back(std::move(p));
      }
      if (runs.empty()) throw DataError("no run directories (manifest.json + config.cfg + metrics.csv) found");
      const auto csv = export_report(runs);
      if (report_out.empty()) {
        std::cout << csv;
      } else {
        write_file(report_out, csv);
      }
      return kExitOk;
    }

    if (*gen) return generate_data(gen_dir, gen_bytes, gen_items, diag_seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
