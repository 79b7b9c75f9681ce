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
#include <stdexcept>
#include <string>
#include <string_view>

#include "conmim/numerics/tape.hpp"
#include "conmim/trainer/config.hpp"
#include "conmim/vit/params.hpp"

namespace conmim::train {

/// LayerNorm parameters, biases and mask tokens are not decayed.
inline bool decays(std::string_view name) {
  if (name.ends_with(".bias")) return false;
  if (name.starts_with("mask_token")) return false;
  const auto dot = name.rfind('.');
  const std::string_view module = name.substr(0, dot);
  const auto last = module.rfind('.');
  return !module.substr(last == std::string_view::npos ? 0 : last + 1).starts_with("norm");
}

template <class T>
struct AdamState {
  vit::ParamSet<T> m, v;
  std::int64_t t = 0;

  static AdamState zeros_like(const vit::ParamSet<T>& params) {
    AdamState s;
    for (const auto& [name, p] : params) {
      s.m.add(name, nd::Tensor<T>(p.shape()));
      s.v.add(name, nd::Tensor<T>(p.shape()));
    }
    return s;
  }
};

template <class T>
double global_norm(const vit::ParamSet<T>& grads) {
  double s = 0;
  for (const auto& [_, g] : grads)
    for (T v : g.values()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

/// One AdamW update in place. Gradients are clipped to cfg.grad_clip global
/// norm first; decay is decoupled and applied before the Adam step.
/// Returns the pre-clip gradient norm.
template <class T>
double adamw_step(vit::ParamSet<T>& params, const vit::ParamSet<T>& grads, AdamState<T>& st, double lr,
                  const TrainConfig& cfg) {
  if (!params.congruent(grads) || !params.congruent(st.m)) throw std::invalid_argument("adamw: incongruent parameter sets");
  if (nd::strict_mode())
    for (const auto& [name, g] : grads)
      if (!g.all_finite()) throw nd::NonFiniteError("adamw: non-finite gradient for " + name);
  const double norm = global_norm(grads);
  const double clip = cfg.grad_clip > 0 && norm > cfg.grad_clip ? cfg.grad_clip / (norm + 1e-6) : 1.0;
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step = static_cast<T>(lr / bc1), inv_bc2 = static_cast<T>(1.0 / bc2), eps = static_cast<T>(cfg.adam_eps);
  const T c = static_cast<T>(clip);
  for (auto& [name, p] : params) {
    const T shrink = static_cast<T>(decays(name) ? 1.0 - lr * cfg.weight_decay : 1.0);
    T* w = p.mutable_data();
    T* m = st.m.at(name).mutable_data();
    T* v = st.v.at(name).mutable_data();
    const T* g = grads.at(name).data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T gi = g[i] * c;
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      w[i] = w[i] * shrink - step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
  return norm;
}

/// theta_tilde <- (1 - alpha) theta + alpha theta_tilde, elementwise.
template <class T>
void ema_update(vit::EncoderPair<T>& pair, double alpha) {
  if (!pair.congruent()) throw std::invalid_argument("ema_update: theta and theta_tilde are not congruent");
  for (auto& [name, slow] : pair.theta_tilde) {
    const T* fast = pair.theta.at(name).data();
    T* s = slow.mutable_data();
    for (std::size_t i = 0; i < slow.size(); ++i)
      s[i] = static_cast<T>((1.0 - alpha) * static_cast<double>(fast[i]) + alpha * static_cast<double>(s[i]));
  }
}

}  // namespace conmim::train
