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
#include <optional>
#include <stdexcept>
#include <vector>

#include "conmim/data/augment.hpp"
#include "conmim/numerics/ops.hpp"
#include "conmim/objectives/codebook.hpp"
#include "conmim/objectives/losses.hpp"
#include "conmim/trainer/config.hpp"
#include "conmim/trainer/optim.hpp"
#include "conmim/vit/encoder.hpp"

namespace conmim::train {

/// Patchified views of one batch of AugPairs.
template <class T>
struct Batch {
  nd::Tensor<T> full;       // [N, K, P]
  nd::Tensor<T> corrupted;  // [N, K, P] before masking
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> token_ids;  // beit objective: ids of masked patches

  std::size_t size() const { return full.dim(0); }
};

template <class T>
nd::Tensor<T> to_patches(const data::ImageRecord& img, const vit::ViTConfig& cfg) {
  nd::Tensor<T> px = nd::Tensor<T>::uninitialized(img.pixels.shape());
  std::copy(img.pixels.values().begin(), img.pixels.values().end(), px.mutable_data());
  return vit::patchify(px, cfg);
}

template <class T>
nd::Tensor<T> stack_patches(const std::vector<const data::ImageRecord*>& images, const vit::ViTConfig& cfg) {
  const std::size_t k = cfg.num_patches(), p = cfg.patch_dim();
  nd::Tensor<T> out = nd::Tensor<T>::uninitialized({images.size(), k, p});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const nd::Tensor<T> one = to_patches<T>(*images[i], cfg);
    std::copy_n(one.data(), k * p, out.mutable_data() + i * k * p);
  }
  return out;
}

template <class T>
Batch<T> make_batch(const std::vector<data::AugPair>& pairs, const vit::ViTConfig& cfg,
                    const obj::TokenizerCodebook* codebook = nullptr) {
  if (pairs.empty()) throw std::invalid_argument("make_batch: empty batch");
  std::vector<const data::ImageRecord*> full, corrupted;
  Batch<T> b;
  for (const auto& pr : pairs) {
    if (pr.mask.flags.size() != cfg.num_patches())
      throw std::invalid_argument("make_batch: mask size does not match the patch grid");
    full.push_back(&pr.full_view);
    corrupted.push_back(&pr.corrupted_view_base);
    b.mask.insert(b.mask.end(), pr.mask.flags.begin(), pr.mask.flags.end());
  }
  b.full = stack_patches<T>(full, cfg);
  b.corrupted = stack_patches<T>(corrupted, cfg);
  if (codebook != nullptr) {
    const std::size_t p = cfg.patch_dim();
    std::vector<float> patch(p);
    for (std::size_t i = 0; i < b.mask.size(); ++i)
      if (b.mask[i]) {
        for (std::size_t j = 0; j < p; ++j) patch[j] = static_cast<float>(b.corrupted[i * p + j]);
        b.token_ids.push_back(obj::nearest_token(*codebook, patch.data()));
      }
  }
  return b;
}

/// Extra trainable tensors an objective needs on top of the encoder.
template <class T>
void add_objective_params(vit::ParamSet<T>& ps, const vit::ViTConfig& vcfg, const TrainConfig& cfg) {
  if (cfg.objective != Objective::beit) return;
  Rng rng = Rng::stream(cfg.seed, "init.beit_head");
  nd::Tensor<T> w({vcfg.dim, cfg.vocab});
  for (auto& v : w.mutable_values()) v = static_cast<T>(rng.truncated_normal(0.02));
  ps.add("beit_head.weight", std::move(w));
  ps.add("beit_head.bias", nd::Tensor<T>({cfg.vocab}));
}

template <class T>
struct StepReport {
  obj::LossReport<T> loss;
  double lr = 0, alpha = 0, grad_norm = 0;
};

namespace detail {

template <class T>
nd::Tensor<T> pooled(const nd::Tensor<T>& patch_features) {
  return nd::mean_axis(patch_features, 1);
}

// Key/target branch on the momentum twin: full views, no mask, through the
// momentum projection head.
template <class T>
nd::Tensor<T> momentum_keys(const vit::ParamSet<T>& slow, const Batch<T>& b, const vit::ViTConfig& vcfg,
                            const TrainConfig& cfg) {
  auto enc = vit::encode(slow, b.full, {}, vcfg);
  if (cfg.objective == Objective::instance) return vit::project_head(slow, pooled(enc.patch_features), vcfg);
  return vit::project_head(slow, enc.patch_features, vcfg);
}

template <class T>
void require_zero(const nd::Tape<T>& tape, std::int64_t node, const char* what) {
  if (!tape.has_grad(node)) return;
  for (T g : tape.node_grad(node))
    if (g != T(0)) throw std::logic_error(std::string("stop-gradient leak: nonzero gradient reached ") + what);
}

}  // namespace detail

/// One iteration: momentum keys, corrupted queries, loss, backward, AdamW,
/// then EMA (or a hard copy when momentum_sync is set).
template <class T>
StepReport<T> train_step(vit::EncoderPair<T>& pair, AdamState<T>& adam, const Batch<T>& batch,
                         const vit::ViTConfig& vcfg, const TrainConfig& cfg, const obj::LossConfig& lcfg,
                         ScheduleState& state) {
  if (batch.size() == 0) throw std::invalid_argument("train_step: empty batch");
  StepReport<T> rep;
  rep.lr = schedule_value(ScheduleKind::lr, state, cfg);
  rep.alpha = schedule_value(ScheduleKind::momentum, state, cfg);
  const std::size_t n = batch.size(), k = vcfg.num_patches();

  nd::Tape<T> tape;
  nd::Tensor<T> keys;
  vit::ParamSet<T> slow_bound;
  if (cfg.objective != Objective::beit) {
    if (cfg.audit_stop_gradient) {
      // Audit mode records the key branch too so the barrier can be checked
      // on real gradients rather than by construction.
      nd::TapeScope<T> scope(tape);
      slow_bound = pair.theta_tilde.bind(tape);
      keys = nd::stop_gradient(detail::momentum_keys(slow_bound, batch, vcfg, cfg));
    } else {
      nd::NoTapeScope<T> off;
      keys = detail::momentum_keys(pair.theta_tilde, batch, vcfg, cfg);
    }
  }

  vit::ParamSet<T> grads;
  {
    nd::TapeScope<T> scope(tape);
    const vit::ParamSet<T> fast = pair.theta.bind(tape);
    const bool masked = cfg.objective == Objective::conmim || cfg.objective == Objective::beit;
    auto enc = vit::encode(fast, batch.corrupted, masked ? std::span<const std::uint8_t>(batch.mask)
                                                         : std::span<const std::uint8_t>(), vcfg);
    switch (cfg.objective) {
      case Objective::conmim:
        rep.loss = obj::conmim_loss(vit::project_head(fast, enc.patch_features, vcfg), keys, batch.mask, lcfg);
        break;
      case Objective::patch_nomask: {
        const std::vector<std::uint8_t> all(n * k, 1);
        rep.loss = obj::conmim_loss(vit::project_head(fast, enc.patch_features, vcfg), keys, all, lcfg);
        break;
      }
      case Objective::instance:
        rep.loss = obj::instance_infonce_loss(vit::project_head(fast, detail::pooled(enc.patch_features), vcfg), keys,
                                              lcfg.temperature);
        break;
      case Objective::beit: {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < batch.mask.size(); ++i)
          if (batch.mask[i]) rows.push_back(i);
        if (rows.size() != batch.token_ids.size()) throw std::invalid_argument("train_step: batch has no token ids");
        const nd::Tensor<T> feats = nd::gather_rows(nd::reshape(enc.patch_features, {n * k, vcfg.dim}), rows);
        rep.loss = obj::beit_style_loss(nd::linear(feats, fast.at("beit_head.weight"), fast.at("beit_head.bias")),
                                        batch.token_ids);
        break;
      }
    }
    tape.backward(rep.loss.loss);
    for (const auto& [name, p] : fast) grads.add(name, tape.grad(p));
  }

  // The key branch must stay gradient-free on every step.
  if (cfg.audit_stop_gradient) {
    for (const auto& [name, p] : slow_bound) detail::require_zero(tape, p.tape_ref().node, "theta_tilde");
    // The barrier node itself receives the loss gradient; nothing may pass it.
    // The beit objective has no key branch.
    if (keys.on_tape()) {
      const auto& barrier = tape.nodes()[static_cast<std::size_t>(keys.tape_ref().node)];
      for (auto in : barrier.inputs) detail::require_zero(tape, in, "key features");
    }
  } else {
    for (const auto& [name, p] : pair.theta_tilde)
      if (tape.references_storage(p.data())) throw std::logic_error("stop-gradient leak: theta_tilde." + name + " on tape");
    if (keys.on_tape()) throw std::logic_error("stop-gradient leak: key features on tape");
  }
  rep.loss.loss = rep.loss.loss.detached();

  rep.grad_norm = adamw_step(pair.theta, grads, adam, rep.lr, cfg);
  if (cfg.momentum_sync) pair.sync();
  else ema_update(pair, rep.alpha);
  ++state.step;
  return rep;
}

}  // namespace conmim::train
