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

#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "conmim/data/augment.hpp"
#include "conmim/trainer/step.hpp"

namespace conmim::train {

/// One row of the metrics log.
struct MetricsRow {
  std::int64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0, momentum_alpha = 0, loss = 0, pos_key_rank_mean = 0, softmax_entropy_mean = 0, wall_ms = 0;
};

/// Augmentation settings for a training config.
inline data::AugConfig aug_config(const vit::ViTConfig& vcfg, const TrainConfig& cfg) {
  data::AugConfig a;
  a.out_side = vcfg.image_side;
  a.patch_side = vcfg.patch_side;
  a.mask_strategy = cfg.mask_strategy;
  const bool masked = cfg.objective == Objective::conmim || cfg.objective == Objective::beit;
  a.mask_ratio = masked ? cfg.mask_ratio : 0.0;
  switch (cfg.aug) {
    case AugVariant::standard: a.full_strong = true, a.corrupted_strong = false; break;
    case AugVariant::both_strong: a.full_strong = true, a.corrupted_strong = true; break;
    case AugVariant::both_basic: a.full_strong = false, a.corrupted_strong = false; break;
    case AugVariant::switched: a.full_strong = false, a.corrupted_strong = true; break;
  }
  return a;
}

/// Image order for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::stream(seed, "data.order", epoch);
  for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
  return order;
}

/// Seed for the augmentation and mask draws of one (epoch, image) visit.
inline std::uint64_t visit_seed(std::uint64_t seed, std::size_t epoch, std::size_t n, std::size_t index) {
  return derive_seed(seed, stream_tag("augment"), epoch * n + index);
}

template <class T>
obj::TokenizerCodebook fit_tokenizer(const std::vector<data::ImageRecord>& images, const vit::ViTConfig& vcfg,
                                     const TrainConfig& cfg, std::size_t max_images = 512) {
  const std::size_t m = std::min(images.size(), max_images), k = vcfg.num_patches(), p = vcfg.patch_dim();
  nd::Tensor<float> patches({m * k, p});
  for (std::size_t i = 0; i < m; ++i) {
    const nd::Tensor<float> one = to_patches<float>(images[i], vcfg);
    std::copy_n(one.data(), k * p, patches.mutable_data() + i * k * p);
  }
  return obj::fit_codebook(patches, cfg.vocab, cfg.seed);
}

template <class T>
struct PretrainResult {
  vit::EncoderPair<T> pair;
  AdamState<T> adam;
  ScheduleState state;
  std::vector<MetricsRow> history;
};

struct PretrainHooks {
  std::function<void(const MetricsRow&)> on_step;
  std::function<void(std::size_t epoch)> on_epoch;  // after the last step of the epoch
  bool wall_clock = false;                         // wall_ms stays 0 otherwise
};

/// Runs the full schedule from a fresh synced pair. The last partial batch of
/// each epoch is dropped.
template <class T>
PretrainResult<T> pretrain(const std::vector<data::ImageRecord>& images, const vit::ViTConfig& vcfg,
                           const TrainConfig& cfg, const obj::LossConfig& lcfg, PretrainHooks hooks = {},
                           std::function<void(PretrainResult<T>&, std::size_t)> checkpoint = {}) {
  vcfg.validate();
  cfg.validate();
  lcfg.validate();
  const std::size_t n = images.size(), steps_per_epoch = n / cfg.batch_size;
  if (steps_per_epoch == 0)
    throw std::invalid_argument("pretrain: " + std::to_string(n) + " images < batch size " + std::to_string(cfg.batch_size));
  vit::ParamSet<T> theta = vit::init_params<T>(vcfg, cfg.seed);
  add_objective_params(theta, vcfg, cfg);
  PretrainResult<T> res{vit::EncoderPair<T>::synced(std::move(theta)), {}, make_schedule(cfg, steps_per_epoch), {}};
  res.adam = AdamState<T>::zeros_like(res.pair.theta);
  std::optional<obj::TokenizerCodebook> codebook;
  if (cfg.objective == Objective::beit) codebook = fit_tokenizer<T>(images, vcfg, cfg);
  const data::AugConfig acfg = aug_config(vcfg, cfg);

  auto stop = [&] { return cfg.max_steps > 0 && res.state.step >= static_cast<std::int64_t>(cfg.max_steps); };
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop(); ++epoch) {
    const auto order = epoch_order(n, cfg.seed, epoch);
    for (std::size_t s = 0; s < steps_per_epoch && !stop(); ++s) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<data::AugPair> pairs;
      pairs.reserve(cfg.batch_size);
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        const std::size_t idx = order[s * cfg.batch_size + i];
        pairs.push_back(data::augment_pair(images[idx], visit_seed(cfg.seed, epoch, n, idx), acfg));
      }
      const Batch<T> batch = make_batch<T>(pairs, vcfg, codebook ? &*codebook : nullptr);
      const auto rep = train_step(res.pair, res.adam, batch, vcfg, cfg, lcfg, res.state);
      MetricsRow row{res.state.step, epoch, rep.lr, rep.alpha, rep.loss.value, rep.loss.mean_rank,
                     rep.loss.mean_softmax_entropy, 0.0};
      if (hooks.wall_clock)
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      res.history.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
    }
    if (checkpoint) checkpoint(res, epoch);
    if (hooks.on_epoch) hooks.on_epoch(epoch);
  }
  return res;
}

}  // namespace conmim::train
