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

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "conmim/cli/config.hpp"
#include "conmim/cli/metrics.hpp"
#include "conmim/data/ppm.hpp"
#include "conmim/data/synth.hpp"
#include "conmim/eval/probe.hpp"
#include "conmim/numerics/op_registry.hpp"
#include "conmim/trainer/checkpoint.hpp"
#include "conmim/trainer/pretrain.hpp"

namespace conmim::cli {

struct Datasets {
  std::vector<data::ImageRecord> pretrain, probe_train, probe_val;
};

/// Synthetic source: one generator call, split into disjoint index ranges.
/// Manifest source: pretraining uses every record; the probe splits take the
/// first probe_train + probe_val labelled records.
inline Datasets load_datasets(const RunConfig& cfg) {
  Datasets d;
  if (cfg.data.source == "synth") {
    auto all = data::synth_dataset(cfg.data.n + cfg.data.probe_train + cfg.data.probe_val, cfg.data.classes,
                                   cfg.model.image_side, cfg.seed);
    const auto a = all.begin() + static_cast<std::ptrdiff_t>(cfg.data.n);
    const auto b = a + static_cast<std::ptrdiff_t>(cfg.data.probe_train);
    d.pretrain.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(a));
    d.probe_train.assign(std::make_move_iterator(a), std::make_move_iterator(b));
    d.probe_val.assign(std::make_move_iterator(b), std::make_move_iterator(all.end()));
    return d;
  }
  d.pretrain = data::read_manifest(cfg.data.manifest);
  for (const auto& r : d.pretrain) {
    if (r.height() != cfg.model.image_side || r.width() != cfg.model.image_side)
      throw std::runtime_error("manifest image " + r.source_id + " is not " + std::to_string(cfg.model.image_side) +
                               " pixels square");
    if (!r.label) continue;
    if (d.probe_train.size() < cfg.data.probe_train) d.probe_train.push_back(r);
    else if (d.probe_val.size() < cfg.data.probe_val) d.probe_val.push_back(r);
  }
  return d;
}

/// Pretraining with on-disk artifacts: metrics.csv (recreated), config.ini,
/// and checkpoint.cmim rewritten after every epoch.
template <class T>
train::PretrainResult<T> run_pretrain(const RunConfig& cfg, const Datasets& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::filesystem::remove(dir / "metrics.csv");
  const std::string dumped = dump_config(cfg);
  {
    std::ofstream out(dir / "config.ini", std::ios::trunc);
    out << dumped;
  }
  train::PretrainHooks hooks;
  hooks.wall_clock = cfg.wall_clock;
  hooks.on_step = [&](const train::MetricsRow& r) { emit_metrics(dir, r); };
  auto checkpoint = [&](train::PretrainResult<T>& res, std::size_t) {
    train::save_checkpoint(train::Checkpoint<T>{res.pair, res.adam, res.state, dumped}, dir / "checkpoint.cmim");
  };
  return train::pretrain<T>(data.pretrain, cfg.model, cfg.train, cfg.loss, hooks, checkpoint);
}

template <class T>
eval::ProbeResult run_probe(const vit::ParamSet<T>& theta, const RunConfig& cfg, const Datasets& data) {
  return cfg.probe.mode == eval::ProbeMode::linear
             ? eval::linear_probe(theta, data.probe_train, data.probe_val, cfg.model, cfg.probe)
             : eval::partial_finetune(theta, data.probe_train, data.probe_val, cfg.model, cfg.probe);
}

// ---------------------------------------------------------------------------
// Ablations

struct Variant {
  std::string name;
  std::function<void(RunConfig&)> apply;
};

inline std::vector<Variant> ablation_variants(const std::string& sweep) {
  using train::AugVariant;
  using train::Objective;
  std::vector<Variant> v;
  if (sweep == "table4") {
    v = {{"conmim", [](RunConfig& c) { c.train.objective = Objective::conmim; }},
         {"instance_contrast", [](RunConfig& c) { c.train.objective = Objective::instance; }},
         {"patchcontrast_nomask", [](RunConfig& c) { c.train.objective = Objective::patch_nomask; }}};
  } else if (sweep == "table5") {
    v = {{"per_image", [](RunConfig& c) { c.loss.negative_pool = obj::NegativePool::per_image; }},
         {"cross_image", [](RunConfig& c) { c.loss.negative_pool = obj::NegativePool::cross_image; }},
         {"filtered", [](RunConfig& c) { c.loss.negative_pool = obj::NegativePool::filtered; }}};
  } else if (sweep == "table7") {
    v = {{"conmim", [](RunConfig&) {}},
         {"both_strong", [](RunConfig& c) { c.train.aug = AugVariant::both_strong; }},
         {"both_basic", [](RunConfig& c) { c.train.aug = AugVariant::both_basic; }},
         {"switched", [](RunConfig& c) { c.train.aug = AugVariant::switched; }},
         {"no_momentum", [](RunConfig& c) { c.train.momentum_sync = true; }}};
  } else if (sweep == "mask") {
    for (double r : {0.4, 0.6, 0.75, 0.9})
      v.push_back({"block_" + std::to_string(static_cast<int>(r * 100)), [r](RunConfig& c) {
                     c.train.mask_strategy = data::MaskStrategy::block;
                     c.train.mask_ratio = r;
                   }});
    for (double r : {0.6, 0.75, 0.9})
      v.push_back({"random_" + std::to_string(static_cast<int>(r * 100)), [r](RunConfig& c) {
                     c.train.mask_strategy = data::MaskStrategy::random;
                     c.train.mask_ratio = r;
                   }});
  } else if (sweep == "temp") {
    for (const char* t : {"0.05", "0.07", "0.1", "0.15", "0.2"})
      v.push_back({std::string("tau_") + t, [t](RunConfig& c) { c.loss.temperature = std::stod(t); }});
  } else if (sweep == "momentum") {
    for (const char* a : {"0.99", "0.996", "0.999"})
      v.push_back({std::string("alpha_") + a, [a](RunConfig& c) { c.train.alpha0 = std::stod(a); }});
  } else {
    throw UsageError("unknown sweep '" + sweep + "' (table4, table5, table7, mask, temp, momentum)");
  }
  return v;
}

struct AblationRow {
  std::string variant;
  double final_loss = 0, final_rank = 0, probe_accuracy = 0;
};

inline std::string format_ablation_row(const AblationRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g", r.variant.c_str(), r.final_loss, r.final_rank, r.probe_accuracy);
  return buf;
}

/// Every variant starts from the same config (same seed, data and order) and
/// changes only its own knob. Rows go to dir/ablate_<sweep>.csv.
template <class T>
std::vector<AblationRow> run_ablation(const std::string& sweep, const RunConfig& base, const Datasets& data,
                                      const std::filesystem::path& dir, std::ostream* log = nullptr) {
  const auto variants = ablation_variants(sweep);
  std::filesystem::create_directories(dir);
  const auto csv = dir / ("ablate_" + sweep + ".csv");
  {
    std::ofstream out(csv, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + csv.string());
    out << "variant,final_loss,pos_key_rank_mean,probe_accuracy\n";
  }
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    RunConfig cfg = base;
    v.apply(cfg);
    cfg.validate();
    const auto res = run_pretrain<T>(cfg, data, dir / v.name);
    AblationRow row{v.name, res.history.back().loss, res.history.back().pos_key_rank_mean,
                    run_probe(res.pair.theta, cfg, data).accuracy};
    std::ofstream(csv, std::ios::app) << format_ablation_row(row) << '\n';
    if (log) *log << format_ablation_row(row) << std::endl;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Gradient-check suite

struct GradCheckLine {
  std::string name;
  double max_rel_error = 0;
};

/// Toy batch for the full loss: queries depend on `x`, keys are constants.
inline nd::Tensor<double> toy_keys(std::uint64_t seed, std::size_t n, std::size_t k, std::size_t d) {
  Rng rng = Rng::stream(seed, "gradcheck.keys");
  nd::Tensor<double> t({n, k, d});
  for (auto& v : t.mutable_values()) v = rng.normal();
  return t;
}

/// Registry ops over `instances` random cases each, plus every objective on a
/// 2-image, K=4, D=8 toy batch.
inline std::vector<GradCheckLine> gradcheck_suite(std::uint64_t seed, std::size_t instances = 8) {
  std::vector<GradCheckLine> out;
  Rng rng = Rng::stream(seed, "gradcheck");
  for (const auto& op : nd::op_registry()) {
    double worst = 0;
    for (std::size_t i = 0; i < instances; ++i) worst = std::max(worst, nd::check_op_instance(op, rng).max_rel_error);
    out.push_back({op.name, worst});
  }
  const std::size_t n = 2, k = 4, d = 8;
  const auto keys = toy_keys(seed, n, k, d);
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1, 1, 0};
  nd::Tensor<double> q = toy_keys(seed + 1, n, k, d);
  for (auto pool : {obj::NegativePool::per_image, obj::NegativePool::cross_image, obj::NegativePool::filtered}) {
    obj::LossConfig lc;
    lc.negative_pool = pool;
    lc.filter_threshold = 0.3;
    out.push_back({std::string("conmim_loss.") + obj::pool_name(pool),
                   nd::grad_check([&](const nd::Tensor<double>& x) { return obj::conmim_loss(x, keys, mask, lc).loss; }, q)});
  }
  const auto b = nd::reshape(toy_keys(seed + 2, 1, 4, d), {4, d});
  out.push_back({"instance_infonce_loss",
                 nd::grad_check([&](const nd::Tensor<double>& x) { return obj::instance_infonce_loss(x, b, 0.2).loss; },
                                nd::reshape(toy_keys(seed + 3, 1, 4, d), {4, d}))});
  const std::vector<std::size_t> ids = {0, 3, 2, 1, 3};
  out.push_back({"beit_style_loss",
                 nd::grad_check([&](const nd::Tensor<double>& x) { return obj::beit_style_loss(x, ids).loss; },
                                nd::reshape(toy_keys(seed + 4, 1, 5, 4), {5, 4}))});
  return out;
}

}  // namespace conmim::cli
