// Copyright 2026 The ConMIM Lab Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "conmim/cli/config.hpp"
#include "conmim/cli/metrics.hpp"
#include "conmim/cli/runner.hpp"

namespace {

using namespace conmim;
namespace fs = std::filesystem;

cli::RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return cli::parse_config(in);
}

TEST(Config, DefaultsMatchTheDeskRecipe) {
  const cli::RunConfig c;
  EXPECT_EQ(c.model.depth, 4u);
  EXPECT_EQ(c.model.dim, 96u);
  EXPECT_EQ(c.model.num_patches(), 64u);
  EXPECT_EQ(c.train.epochs, 100u);
  EXPECT_EQ(c.train.peak_lr, 1.5e-3);
  EXPECT_EQ(c.train.alpha0, 0.996);
  EXPECT_EQ(c.train.mask_ratio, 0.75);
  EXPECT_EQ(c.loss.temperature, 0.1);
  EXPECT_EQ(c.data.n, 8000u);
}

TEST(Config, ParsesSectionsAndComments) {
  const auto c = parse(
      "# run\n[model]\ndim = 48   # narrower\nheads=3\n\n[train]\nobjective = patch_nomask\nmask_strategy = block\n"
      "[loss]\nnegative_pool = cross_image\n[run]\nseed = 9\n");
  EXPECT_EQ(c.model.dim, 48u);
  EXPECT_EQ(c.model.heads, 3u);
  EXPECT_EQ(c.train.objective, train::Objective::patch_nomask);
  EXPECT_EQ(c.train.mask_strategy, data::MaskStrategy::block);
  EXPECT_EQ(c.loss.negative_pool, obj::NegativePool::cross_image);
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_EQ(c.probe.seed, 9u);
}

TEST(Config, ErrorsCarryTheLineNumber) {
  try {
    parse("[train]\nepochs = 3\nlearning_rate = 1\n");
    FAIL();
  } catch (const cli::UsageError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(":3:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("unknown key 'train.learning_rate'"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse("epochs = 3\n"), cli::UsageError);
  EXPECT_THROW(parse("[train\n"), cli::UsageError);
  EXPECT_THROW(parse("[train]\nepochs = many\n"), cli::UsageError);
}

TEST(Config, DumpParseRoundTrip) {
  cli::RunConfig c;
  cli::set_field(c, "train.peak_lr", "0.0007");
  cli::set_field(c, "loss.temperature", "0.05");
  cli::set_field(c, "train.momentum_sync", "true");
  cli::set_field(c, "train.max_steps", "200");
  cli::set_field(c, "model.masking", "pixel");
  const std::string text = cli::dump_config(c);
  EXPECT_EQ(cli::dump_config(parse(text)), text);
  const auto back = parse(text);
  EXPECT_EQ(back.train.peak_lr, 0.0007);
  EXPECT_TRUE(back.train.momentum_sync);
  EXPECT_EQ(back.train.max_steps, 200u);
  EXPECT_EQ(back.model.masking, vit::MaskingMode::pixel);
}

TEST(Config, MissingFileIsAUsageError) {
  try {
    cli::load_config("/nonexistent/run.ini");
    FAIL();
  } catch (const cli::UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/run.ini"), std::string::npos);
  }
}

TEST(Config, ValidateCatchesBadCombinations) {
  cli::RunConfig c;
  c.data.source = "manifest";
  EXPECT_THROW(c.validate(), cli::UsageError);
  c = {};
  c.probe.unfrozen_blocks = 5;
  EXPECT_THROW(c.validate(), cli::UsageError);
  c = {};
  c.model.dim = 95;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Metrics, HeaderWrittenOnce) {
  const auto dir = fs::temp_directory_path() / "conmim_metrics_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  train::MetricsRow r{1, 0, 1e-4, 0.996, 4.1, 1.5, 4.0, 0.0};
  cli::emit_metrics(dir, r);
  r.step = 2;
  cli::emit_metrics(dir, r);
  std::ifstream in(dir / "metrics.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, cli::kMetricsHeader);
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 2);
  fs::remove_all(dir);
}

TEST(Ablation, SweepsListTheirVariants) {
  EXPECT_EQ(cli::ablation_variants("table4").size(), 3u);
  EXPECT_EQ(cli::ablation_variants("table5").size(), 3u);
  EXPECT_EQ(cli::ablation_variants("table7").size(), 5u);
  EXPECT_EQ(cli::ablation_variants("mask").size(), 7u);
  EXPECT_THROW(cli::ablation_variants("table9"), cli::UsageError);
  cli::RunConfig c;
  for (const auto& v : cli::ablation_variants("table7"))
    if (v.name == "no_momentum") v.apply(c);
  EXPECT_TRUE(c.train.momentum_sync);
}

TEST(Datasets, SynthSplitsAreDisjoint) {
  cli::RunConfig c;
  c.data.n = 16;
  c.data.probe_train = 8;
  c.data.probe_val = 8;
  c.model.image_side = 8;
  const auto d = cli::load_datasets(c);
  EXPECT_EQ(d.pretrain.size(), 16u);
  EXPECT_EQ(d.probe_val.size(), 8u);
  EXPECT_NE(d.pretrain[0].source_id, d.probe_train[0].source_id);
  EXPECT_NE(d.probe_train.back().source_id, d.probe_val.front().source_id);
}

#ifdef CONMIM_CLI_PATH
int run(const std::string& args) {
  const int status = std::system((std::string(CONMIM_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::pair<int, std::string> run_capture(const std::string& args) {
  std::string out;
  FILE* pipe = ::popen((std::string(CONMIM_CLI_PATH) + " " + args + " 2>&1").c_str(), "r");
  if (!pipe) return {-1, out};
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

const std::string kTinySets =
    " --set model.image_side=8 --set model.patch_side=2 --set model.dim=16 --set model.heads=2"
    " --set model.depth=1 --set train.epochs=1 --set train.batch_size=4 --set data.n=8"
    " --set data.probe_train=8 --set data.probe_val=8 --set probe.epochs=1";

TEST(Binary, MissingConfigNamesThePath) {
  const auto [rc, out] = run_capture("pretrain -c /nonexistent/run.ini");
  EXPECT_EQ(rc, 2);
  EXPECT_NE(out.find("/nonexistent/run.ini"), std::string::npos) << out;
}

TEST(Binary, AblateTable4WritesThreeRows) {
  const auto dir = fs::temp_directory_path() / "conmim_cli_ablate";
  fs::remove_all(dir);
  ASSERT_EQ(run("ablate table4 -o " + dir.string() + kTinySets), 0);
  const auto rows = read_csv(dir / "ablate_table4.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0][0], "variant");
  fs::remove_all(dir);
}

TEST(Binary, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("pretrain --bogus"), 2);
  EXPECT_EQ(run("pretrain -c /nonexistent.ini"), 2);
  EXPECT_EQ(run("pretrain --set train.nope=1"), 2);
  EXPECT_EQ(run("probe --checkpoint /nonexistent.cmim"), 2);
}

TEST(Binary, GradcheckPasses) { EXPECT_EQ(run("gradcheck --instances 2"), 0); }

TEST(Binary, TinyPretrainWritesArtifacts) {
  const auto dir = fs::temp_directory_path() / "conmim_cli_run";
  fs::remove_all(dir);
  ASSERT_EQ(run("pretrain -o " + dir.string() + kTinySets + " --set train.epochs=3"), 0);
  const auto rows = read_csv(dir / "metrics.csv");
  ASSERT_GE(rows.size(), 3u);
  EXPECT_EQ(rows[0][3], "momentum_alpha");
  EXPECT_EQ(rows[0][4], "loss");
  double prev_alpha = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double alpha = std::stod(rows[i][3]);
    EXPECT_GE(alpha, prev_alpha) << "row " << i;
    EXPECT_TRUE(std::isfinite(std::stod(rows[i][4]))) << "row " << i;
    prev_alpha = alpha;
  }
  EXPECT_TRUE(fs::exists(dir / "config.ini"));
  ASSERT_TRUE(fs::exists(dir / "checkpoint.cmim"));
  EXPECT_EQ(run("probe --checkpoint " + (dir / "checkpoint.cmim").string()), 0);
  EXPECT_EQ(run("export-attn --checkpoint " + (dir / "checkpoint.cmim").string() + " --index 0 --block 0 -o " +
                (dir / "attn.csv").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "attn.csv"));
  EXPECT_EQ(run("export-attn --checkpoint " + (dir / "checkpoint.cmim").string() + " --index 0 --block 7 -o " +
                (dir / "attn.csv").string()),
            2);
  fs::remove_all(dir);
}
#endif

}  // namespace
