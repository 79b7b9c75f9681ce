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

// conmim: command-line front end for the lab.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "conmim/cli/runner.hpp"
#include "conmim/eval/attention.hpp"
#include "conmim/numerics/allocator.hpp"

namespace fs = std::filesystem;
using namespace conmim;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

// Base config: -c if given, else the one stored in the checkpoint, else defaults.
cli::RunConfig resolve(const Common& c, const std::string& checkpoint = {}) {
  cli::RunConfig cfg;
  if (!c.config.empty()) {
    cfg = cli::load_config(c.config);
  } else if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw cli::UsageError("checkpoint not found: " + checkpoint);
    std::istringstream stored(train::checkpoint_config(checkpoint));
    cfg = cli::parse_config(stored, checkpoint);
  }
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw cli::UsageError("--set expects section.key=value, got '" + kv + "'");
    cli::set_field(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.propagate_seed();
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool out = true) {
  app->add_option("-c,--config", c.config, "Run configuration file");
  app->add_option("--set", c.overrides, "Override one key, e.g. --set train.epochs=5");
  if (out) app->add_option("-o,--out", c.out, "Output directory (overrides run.out_dir)");
}

template <class T>
int pretrain_cmd(const cli::RunConfig& cfg) {
  const auto data = cli::load_datasets(cfg);
  const auto res = cli::run_pretrain<T>(cfg, data, cfg.out_dir);
  const auto& last = res.history.back();
  std::printf("pretrain: %lld steps, final loss %.6g, rank %.4g -> %s\n", static_cast<long long>(res.state.step),
              last.loss, last.pos_key_rank_mean, (fs::path(cfg.out_dir) / "checkpoint.cmim").c_str());
  return 0;
}

template <class T>
vit::ParamSet<T> encoder_from(const std::string& checkpoint, const cli::RunConfig& cfg) {
  if (checkpoint.empty()) return vit::init_params<T>(cfg.model, cfg.seed);
  if (!fs::exists(checkpoint)) throw cli::UsageError("checkpoint not found: " + checkpoint);
  return train::load_checkpoint<T>(checkpoint).pair.theta;
}

template <class T>
int probe_cmd(const cli::RunConfig& cfg, const std::string& checkpoint) {
  const auto data = cli::load_datasets(cfg);
  const auto theta = encoder_from<T>(checkpoint, cfg);
  const auto r = cli::run_probe(theta, cfg, data);
  std::printf("probe: mode=%s unfrozen=%zu val_accuracy=%.6f train_accuracy=%.6f\n",
              cfg.probe.mode == eval::ProbeMode::linear ? "linear" : "partial", cfg.probe.unfrozen_blocks, r.accuracy,
              r.train_accuracy);
  return 0;
}

template <class T>
int ablate_cmd(const cli::RunConfig& cfg, const std::string& sweep) {
  cli::ablation_variants(sweep);  // reject unknown sweeps before any work
  const auto data = cli::load_datasets(cfg);
  std::cout << "variant,final_loss,pos_key_rank_mean,probe_accuracy" << std::endl;
  cli::run_ablation<T>(sweep, cfg, data, cfg.out_dir, &std::cout);
  return 0;
}

template <class T>
int export_cmd(const cli::RunConfig& cfg, const std::string& checkpoint, const std::string& image, std::size_t index,
               std::size_t block, const std::string& out) {
  const auto theta = encoder_from<T>(checkpoint, cfg);
  data::ImageRecord img;
  if (!image.empty()) {
    if (!fs::exists(image)) throw cli::UsageError("image not found: " + image);
    img = data::load_ppm_file(image);
  } else {
    img = data::synth_image(index, data::synth_label(index, cfg.data.classes, cfg.seed), cfg.model.image_side, cfg.seed);
  }
  const auto grid = eval::export_attention(theta, img, block, cfg.model);
  if (out.empty() || out == "-") {
    eval::write_attention_csv(std::cout, grid);
  } else {
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + out);
    eval::write_attention_csv(f, grid);
  }
  std::fprintf(stderr, "export-attn: block %zu, cls self-weight %.6g, spatial entropy %.6g\n", block, grid.cls_self,
               eval::spatial_entropy(grid));
  return 0;
}

template <class F>
int dispatch(const cli::RunConfig& cfg, F&& f) {
  return cfg.model.dtype == nd::DType::f64 ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  nd::tune_allocator();
  CLI::App app{"Masked image modeling lab: denoising patch contrast, baselines and ablations"};
  app.require_subcommand(1);

  Common pre_opts, probe_opts, ablate_opts, export_opts, gen_opts;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain an encoder pair");
  add_common(pretrain, pre_opts);

  auto* probe = app.add_subcommand("probe", "Linear or partial fine-tuning probe of a checkpoint");
  add_common(probe, probe_opts, false);
  std::string probe_ckpt, probe_mode;
  std::size_t unfrozen = 0;
  probe->add_option("--checkpoint", probe_ckpt, "Checkpoint to probe (random init when omitted)");
  probe->add_option("--mode", probe_mode, "linear | partial");
  auto* unfrozen_opt = probe->add_option("--unfrozen", unfrozen, "Trainable trailing blocks (partial mode)");

  auto* ablate = app.add_subcommand("ablate", "Run a named ablation sweep");
  add_common(ablate, ablate_opts);
  std::string sweep;
  ablate->add_option("sweep", sweep, "table4 | table5 | table7 | mask | temp | momentum")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op and objective");
  std::uint64_t gc_seed = 0;
  std::size_t gc_instances = 8;
  double gc_tol = 1e-4;
  gradcheck->add_option("--seed", gc_seed);
  gradcheck->add_option("--instances", gc_instances, "Random instances per op");
  gradcheck->add_option("--tolerance", gc_tol, "Maximum relative error");

  auto* exporter = app.add_subcommand("export-attn", "Export [CLS] attention of one block as a CSV grid");
  add_common(exporter, export_opts, false);
  std::string ex_ckpt, ex_image, ex_out;
  std::size_t ex_index = 0, ex_block = 0;
  exporter->add_option("--checkpoint", ex_ckpt, "Checkpoint (random init when omitted)");
  exporter->add_option("--image", ex_image, "P6 image; defaults to a synthetic image");
  exporter->add_option("--index", ex_index, "Synthetic image index when --image is absent");
  exporter->add_option("--block", ex_block, "Block index");
  exporter->add_option("-o,--out", ex_out, "Output CSV ('-' for stdout)");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as PPM files plus manifest.tsv");
  add_common(gen, gen_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*pretrain) {
      const auto cfg = resolve(pre_opts);
      return dispatch(cfg, [&](auto t) { return pretrain_cmd<decltype(t)>(cfg); });
    }
    if (*probe) {
      auto cfg = resolve(probe_opts, probe_ckpt);
      if (!probe_mode.empty()) cli::set_field(cfg, "probe.mode", probe_mode);
      if (*unfrozen_opt) cfg.probe.unfrozen_blocks = unfrozen;
      cfg.validate();
      return dispatch(cfg, [&](auto t) { return probe_cmd<decltype(t)>(cfg, probe_ckpt); });
    }
    if (*ablate) {
      const auto cfg = resolve(ablate_opts);
      return dispatch(cfg, [&](auto t) { return ablate_cmd<decltype(t)>(cfg, sweep); });
    }
    if (*gradcheck) {
      bool ok = true;
      for (const auto& line : cli::gradcheck_suite(gc_seed, gc_instances)) {
        const bool pass = line.max_rel_error < gc_tol;
        ok = ok && pass;
        std::printf("%-28s max_rel_err=%.3e %s\n", line.name.c_str(), line.max_rel_error, pass ? "ok" : "FAIL");
      }
      return ok ? 0 : 1;
    }
    if (*exporter) {
      const auto cfg = resolve(export_opts, ex_ckpt);
      if (ex_block >= cfg.model.depth)
        throw cli::UsageError("--block " + std::to_string(ex_block) + " out of range for depth " +
                              std::to_string(cfg.model.depth));
      return dispatch(cfg, [&](auto t) { return export_cmd<decltype(t)>(cfg, ex_ckpt, ex_image, ex_index, ex_block, ex_out); });
    }
    if (*gen) {
      const auto cfg = resolve(gen_opts);
      const auto records = data::synth_dataset(cfg.data.n, cfg.data.classes, cfg.model.image_side, cfg.seed);
      data::write_dataset(cfg.out_dir, records);
      std::printf("gen-data: %zu images -> %s\n", records.size(), (fs::path(cfg.out_dir) / "manifest.tsv").c_str());
      return 0;
    }
  } catch (const cli::UsageError& e) {
    std::fprintf(stderr, "conmim: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "conmim: error: %s\n", e.what());
    return 1;
  }
  return 2;
}
