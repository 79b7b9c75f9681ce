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

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

#include "conmim/data/mask.hpp"

namespace conmim::train {

/// Pretraining objective. patch_nomask is plain patch-level contrast with
/// every position as an anchor and no corruption.
enum class Objective { conmim, instance, patch_nomask, beit };

/// Which views receive the strong photometric pipeline.
enum class AugVariant { standard, both_strong, both_basic, switched };

inline const char* objective_name(Objective o) {
  switch (o) {
    case Objective::conmim: return "conmim";
    case Objective::instance: return "instance";
    case Objective::patch_nomask: return "patch_nomask";
    default: return "beit";
  }
}

inline Objective parse_objective(const std::string& s) {
  if (s == "conmim") return Objective::conmim;
  if (s == "instance") return Objective::instance;
  if (s == "patch_nomask") return Objective::patch_nomask;
  if (s == "beit") return Objective::beit;
  throw std::invalid_argument("unknown objective '" + s + "'");
}

inline const char* aug_variant_name(AugVariant v) {
  switch (v) {
    case AugVariant::standard: return "standard";
    case AugVariant::both_strong: return "both_strong";
    case AugVariant::both_basic: return "both_basic";
    default: return "switched";
  }
}

inline AugVariant parse_aug_variant(const std::string& s) {
  if (s == "standard") return AugVariant::standard;
  if (s == "both_strong") return AugVariant::both_strong;
  if (s == "both_basic") return AugVariant::both_basic;
  if (s == "switched") return AugVariant::switched;
  throw std::invalid_argument("unknown aug variant '" + s + "'");
}

// Desk-scale defaults. Reference values for ImageNet-1K pretraining in
// comments: lr 5e-4, warmup 10 epochs, batch 2048, 800 epochs.
struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double peak_lr = 1.5e-3;
  double min_lr = 1e-5;
  double warmup_epochs = -1;  // negative: 10% of epochs
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.98;
  double adam_eps = 1e-8;
  double grad_clip = 3.0;  // 0 disables
  double alpha0 = 0.996;
  double mask_ratio = 0.75;
  data::MaskStrategy mask_strategy = data::MaskStrategy::random;
  std::uint64_t seed = 0;
  Objective objective = Objective::conmim;
  AugVariant aug = AugVariant::standard;
  bool momentum_sync = false;  // theta_tilde <- theta every step
  std::size_t vocab = 64;      // beit objective only
  bool audit_stop_gradient = false;
  std::size_t max_steps = 0;  // stop early without shortening the schedules; 0 = run them out

  double warmup() const { return warmup_epochs < 0 ? 0.1 * static_cast<double>(epochs) : warmup_epochs; }

  void validate() const {
    if (!(min_lr > 0 && min_lr <= peak_lr)) throw std::invalid_argument("train: need 0 < min_lr <= peak_lr");
    if (!(alpha0 >= 0 && alpha0 < 1)) throw std::invalid_argument("train: alpha0 must be in [0, 1)");
    if (batch_size == 0 || epochs == 0) throw std::invalid_argument("train: epochs and batch_size must be positive");
    if (objective != Objective::patch_nomask && objective != Objective::instance) data::check_ratio(mask_ratio);
  }
};

struct ScheduleState {
  std::int64_t step = 0;
  std::int64_t total_steps = 0;
  std::int64_t warmup_steps = 0;
};

enum class ScheduleKind { lr, momentum };

/// lr: linear warmup to peak, then cosine to min_lr. momentum: cosine from
/// alpha0 at step 0 to 1 at the last step.
inline double schedule_value(ScheduleKind kind, const ScheduleState& s, const TrainConfig& cfg) {
  if (s.total_steps <= 0 || s.step < 0 || s.step > s.total_steps)
    throw std::invalid_argument("schedule: step " + std::to_string(s.step) + " outside [0, " +
                                std::to_string(s.total_steps) + "]");
  const auto t = static_cast<double>(s.step), total = static_cast<double>(s.total_steps);
  if (kind == ScheduleKind::momentum)
    return 1.0 - (1.0 - cfg.alpha0) * (1.0 + std::cos(std::numbers::pi * t / total)) / 2.0;
  if (s.warmup_steps >= s.total_steps)
    throw std::invalid_argument("schedule: warmup " + std::to_string(s.warmup_steps) + " >= total " +
                                std::to_string(s.total_steps));
  const auto tw = static_cast<double>(s.warmup_steps);
  if (s.step <= s.warmup_steps) return s.warmup_steps == 0 ? cfg.peak_lr : cfg.peak_lr * (t / tw);
  return cfg.min_lr +
         (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * (t - tw) / (total - tw))) / 2.0;
}

inline ScheduleState make_schedule(const TrainConfig& cfg, std::size_t steps_per_epoch) {
  ScheduleState s;
  s.total_steps = static_cast<std::int64_t>(cfg.epochs * steps_per_epoch);
  s.warmup_steps = static_cast<std::int64_t>(std::llround(cfg.warmup() * static_cast<double>(steps_per_epoch)));
  return s;
}

}  // namespace conmim::train
