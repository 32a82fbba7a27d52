// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "metrolab/config.hpp"
#include "metrolab/experiments.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "metrolab_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args, std::string* out = nullptr) {
  const fs::path log = workdir() / "stdout.txt";
  const std::string cmd = "cd '" + workdir().string() + "' && '" METROLAB_CLI_PATH "' " + args + " > '" +
                          log.string() + "' 2> '" + (workdir() / "stderr.txt").string() + "'";
  const int status = std::system(cmd.c_str());
  if (out) {
    std::ifstream in(log);
    std::stringstream s;
    s << in.rdbuf();
    *out = s.str();
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

const char* kSmall =
    " --set model.d_model=16 --set model.n_heads=2 --set model.d_ff=32 --set train.warmup_steps=2"
    " --set train.total_steps=6";

void ensure_data() {
  if (!fs::exists(workdir() / "data" / "pretrain.cfg")) {
    REQUIRE(run("generate-data --out data --bytes 20000 --items 40 --seed 5") == 0);
  }
}

}  // namespace

TEST_CASE("generate-data writes corpus, tasks, vocabulary and a config") {
  ensure_data();
  for (const char* f : {"corpus.txt", "vocab.txt", "pretrain.cfg", "manifest.json", "tasks/nli.tsv", "tasks/copy.tsv",
                        "tasks/word_sense.tsv", "tasks/nli_train.tsv"}) {
    CHECK(fs::exists(workdir() / "data" / f));
  }
}

TEST_CASE("pretrain twice in 64-bit mode gives byte-identical metrics") {
  ensure_data();
  const std::string common = std::string("-q pretrain -c data/pretrain.cfg --seed 7 --set train.precision=f64") + kSmall;
  REQUIRE(run(common + " --run-name a") == 0);
  REQUIRE(run(common + " --run-name b") == 0);
  const auto a = slurp(workdir() / "data/runs/a/metrics.csv");
  CHECK(!a.empty());
  CHECK(a == slurp(workdir() / "data/runs/b/metrics.csv"));
  for (const char* f : {"manifest.json", "config.cfg", "metrics.csv", "final.ckpt", "vocab.txt"}) {
    CHECK(fs::exists(workdir() / "data/runs/a" / f));
  }
}

TEST_CASE("ablation-grid runs one variant per preset row") {
  ensure_data();
  REQUIRE(run(std::string("-q ablation-grid -c data/pretrain.cfg --preset table4 --steps 3 --run-name grid") + kSmall) ==
          0);
  const auto& rows = metrolab::ablation_preset("table4");
  CHECK(rows.size() == 7);
  const std::string grid = slurp(workdir() / "data/runs/grid/grid.csv");
  for (const char* label : {"CLM Loss on All Position", "RTD on Decoder", "+ Projection Layer on CLM",
                            "Continuous Span Mask", "All-token LM loss"}) {
    CHECK(grid.find(label) != std::string::npos);
  }
  for (const auto& row : rows) {
    const auto dir = workdir() / "data/runs/grid" / row.slug;
    CHECK(fs::exists(dir / "final.ckpt"));
    CHECK(fs::exists(dir / "manifest.json"));
  }
  std::string report;
  REQUIRE(run("export-report data/runs/grid", &report) == 0);
  CHECK(std::count(report.begin(), report.end(), '\n') == 8);
}

TEST_CASE("diagnose-ambiguity separates the target variants") {
  std::string out;
  REQUIRE(run("diagnose-ambiguity --variant masked_only --seed 3", &out) == 0);
  CHECK(out.find("ambiguity_rate\t0\n") == std::string::npos);
  for (const char* v : {"all_tokens", "all_tokens_masked_loss"}) {
    REQUIRE(run(std::string("diagnose-ambiguity --variant ") + v + " --seed 3", &out) == 0);
    CHECK(out.find("ambiguity_rate\t0\n") != std::string::npos);
  }
}

TEST_CASE("evaluation and analysis subcommands write their reports") {
  ensure_data();
  REQUIRE(run(std::string("-q pretrain -c data/pretrain.cfg --run-name p") + kSmall) == 0);
  CHECK(run("eval --checkpoint data/runs/p/final.ckpt") == 0);
  CHECK(fs::exists(workdir() / "data/runs/p/eval/eval.csv"));
  CHECK(run("analyze-activations --checkpoint data/runs/p/final.ckpt --limit 20") == 0);
  CHECK(fs::exists(workdir() / "data/runs/p/activations/activations.csv"));
  CHECK(run("analyze-sensitivity --checkpoint data/runs/p/final.ckpt --limit 10") == 0);
  CHECK(fs::exists(workdir() / "data/runs/p/sensitivity/sensitivity.csv"));
  CHECK(run(std::string("-q finetune -c data/pretrain.cfg --init data/runs/p/final.ckpt --run-name f") + kSmall) == 0);
  CHECK(fs::exists(workdir() / "data/runs/f/final.ckpt"));
}

TEST_CASE("exit codes distinguish config, data and divergence failures") {
  ensure_data();
  CHECK(run("pretrain -c data/pretrain.cfg --set model.nonsense=1") == 2);
  CHECK(run("pretrain -c data/pretrain.cfg --set train.peak_lr=fast") == 2);
  CHECK(run("pretrain -c data/pretrain.cfg --set data.corpus=missing.txt") == 4);
  CHECK(run(std::string("-q pretrain -c data/pretrain.cfg --run-name boom --set train.peak_lr=1e30") + kSmall) == 3);
  CHECK(fs::exists(workdir() / "data/runs/boom/divergence.txt"));
  CHECK(run("no-such-command") == 2);
  {
    std::ofstream f(workdir() / "noseed.cfg");
    f << "[model]\nd_model = 16\n";
  }
  CHECK(run("pretrain -c noseed.cfg") == 2);
}
