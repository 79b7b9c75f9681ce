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
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/numerics/ops.hpp"
#include "conmim/rng.hpp"
#include "conmim/vit/config.hpp"
#include "conmim/vit/params.hpp"

namespace conmim::vit {

// ---------------------------------------------------------------------------
// Patch tokenization. Images are H x W x 3 row-major; patch rows are in raster
// order over the grid, each flattened as (y, x, channel).

template <class T>
nd::Tensor<T> patchify(const nd::Tensor<T>& image, const ViTConfig& cfg) {
  const std::size_t side = cfg.image_side, p = cfg.patch_side, g = cfg.grid();
  if (image.rank() != 3 || image.dim(0) != side || image.dim(1) != side || image.dim(2) != 3)
    throw nd::ShapeError("patchify", image.shape(), {side, side, 3});
  nd::Tensor<T> out({g * g, cfg.patch_dim()});
  T* dst = out.mutable_data();
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t y = 0; y < p; ++y) {
        const T* src = image.data() + ((gy * p + y) * side + gx * p) * 3;
        dst = std::copy_n(src, p * 3, dst);
      }
  return out;
}

template <class T>
nd::Tensor<T> unpatchify(const nd::Tensor<T>& patches, const ViTConfig& cfg) {
  const std::size_t side = cfg.image_side, p = cfg.patch_side, g = cfg.grid();
  if (patches.rank() != 2 || patches.dim(0) != g * g || patches.dim(1) != cfg.patch_dim())
    throw nd::ShapeError("unpatchify", patches.shape(), {g * g, cfg.patch_dim()});
  nd::Tensor<T> out({side, side, 3});
  const T* src = patches.data();
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t y = 0; y < p; ++y) {
        std::copy_n(src, p * 3, out.mutable_data() + ((gy * p + y) * side + gx * p) * 3);
        src += p * 3;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

inline std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

/// Truncated-normal(0.02) weights and tokens, zero biases, unit LN gains.
template <class T>
ParamSet<T> init_params(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = Rng::stream(seed, "init");
  ParamSet<T> ps;
  auto normal = [&](std::string name, nd::Shape shape) {
    nd::Tensor<T> t(std::move(shape));
    for (auto& v : t.mutable_values()) v = static_cast<T>(rng.truncated_normal(0.02));
    ps.add(std::move(name), std::move(t));
  };
  auto zeros = [&](std::string name, nd::Shape shape) { ps.add(std::move(name), nd::Tensor<T>(std::move(shape))); };
  auto ones = [&](std::string name, nd::Shape shape) { ps.add(std::move(name), nd::Tensor<T>::full(std::move(shape), T(1))); };

  const std::size_t d = cfg.dim, hidden = cfg.dim * cfg.mlp_ratio;
  normal("patch_embed.weight", {cfg.patch_dim(), d});
  zeros("patch_embed.bias", {d});
  normal("cls_token", {d});
  normal("pos_embed", {cfg.num_tokens(), d});
  normal("mask_token", {d});
  if (cfg.masking == MaskingMode::pixel) normal("mask_token_pixel", {cfg.patch_dim()});
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string pre = block_prefix(b);
    ones(pre + "norm1.weight", {d});
    zeros(pre + "norm1.bias", {d});
    normal(pre + "attn.qkv.weight", {d, 3 * d});
    zeros(pre + "attn.qkv.bias", {3 * d});
    normal(pre + "attn.proj.weight", {d, d});
    zeros(pre + "attn.proj.bias", {d});
    ones(pre + "norm2.weight", {d});
    zeros(pre + "norm2.bias", {d});
    normal(pre + "mlp.fc1.weight", {d, hidden});
    zeros(pre + "mlp.fc1.bias", {hidden});
    normal(pre + "mlp.fc2.weight", {hidden, d});
    zeros(pre + "mlp.fc2.bias", {d});
  }
  ones("norm.weight", {d});
  zeros("norm.bias", {d});
  for (std::size_t l = 0; l < cfg.proj_depth; ++l) {
    normal("head." + std::to_string(l) + ".weight", {d, d});
    zeros("head." + std::to_string(l) + ".bias", {d});
  }
  return ps;
}

// ---------------------------------------------------------------------------
// Forward

/// Patch embedding, mask substitution, [CLS] prepend and positional embedding.
/// `mask` holds N*K flags (row-major over images) or is empty for no masking.
template <class T>
nd::Tensor<T> embed(const ParamSet<T>& ps, const nd::Tensor<T>& patches, std::span<const std::uint8_t> mask,
                    const ViTConfig& cfg) {
  if (patches.rank() != 3 || patches.dim(1) != cfg.num_patches() || patches.dim(2) != cfg.patch_dim())
    throw nd::ShapeError("encode", patches.shape(), {0, cfg.num_patches(), cfg.patch_dim()});
  const std::size_t n = patches.dim(0), k = cfg.num_patches(), d = cfg.dim;
  if (!mask.empty() && mask.size() != n * k)
    throw std::invalid_argument("encode: mask has " + std::to_string(mask.size()) + " flags, expected " +
                                std::to_string(n * k));
  nd::Tensor<T> input = patches;
  if (!mask.empty() && cfg.masking == MaskingMode::pixel) input = nd::select_rows(input, ps.at("mask_token_pixel"), mask);
  nd::Tensor<T> x = nd::linear(input, ps.at("patch_embed.weight"), ps.at("patch_embed.bias"));
  if (!mask.empty() && cfg.masking == MaskingMode::embedding) x = nd::select_rows(x, ps.at("mask_token"), mask);
  nd::Tensor<T> cls = nd::reshape(nd::expand(ps.at("cls_token"), n), {n, 1, d});
  x = nd::concat(cls, x, 1);
  return nd::add(x, ps.at("pos_embed"));
}

/// One pre-norm transformer block over tokens [N, T, D]. When `attention` is
/// non-null the head-wise softmax maps [N, H, T, T] are stored there.
template <class T>
nd::Tensor<T> block_forward(const ParamSet<T>& ps, const nd::Tensor<T>& x, std::size_t index, const ViTConfig& cfg,
                            nd::Tensor<T>* attention = nullptr) {
  const std::string pre = block_prefix(index);
  const std::size_t n = x.dim(0), t = x.dim(1), d = cfg.dim, h = cfg.heads, hd = cfg.head_dim();

  nd::Tensor<T> y = nd::layer_norm(x, ps.at(pre + "norm1.weight"), ps.at(pre + "norm1.bias"));
  nd::Tensor<T> qkv = nd::linear(y, ps.at(pre + "attn.qkv.weight"), ps.at(pre + "attn.qkv.bias"));
  qkv = nd::permute(nd::reshape(qkv, {n, t, 3, h, hd}), {2, 0, 3, 1, 4});
  auto part = [&](std::size_t i) { return nd::reshape(nd::slice(qkv, 0, i, i + 1), {n * h, t, hd}); };
  nd::Tensor<T> q = nd::scale(part(0), T(1) / std::sqrt(T(hd)));
  nd::Tensor<T> attn = nd::softmax(nd::bmm(q, part(1), true));
  if (attention != nullptr) *attention = attn.detached().view_as({n, h, t, t});
  nd::Tensor<T> ctx = nd::bmm(attn, part(2));
  ctx = nd::reshape(nd::permute(nd::reshape(ctx, {n, h, t, hd}), {0, 2, 1, 3}), {n, t, d});
  nd::Tensor<T> out = nd::add(x, nd::linear(ctx, ps.at(pre + "attn.proj.weight"), ps.at(pre + "attn.proj.bias")));

  y = nd::layer_norm(out, ps.at(pre + "norm2.weight"), ps.at(pre + "norm2.bias"));
  y = nd::gelu(nd::linear(y, ps.at(pre + "mlp.fc1.weight"), ps.at(pre + "mlp.fc1.bias")));
  y = nd::linear(y, ps.at(pre + "mlp.fc2.weight"), ps.at(pre + "mlp.fc2.bias"));
  return nd::add(out, y);
}

template <class T>
struct EncodeResult {
  nd::Tensor<T> cls;                     // [N, D]
  nd::Tensor<T> patch_features;          // [N, K, D]
  std::vector<nd::Tensor<T>> attention;  // per block [N, H, T, T]; empty unless requested
};

/// Final norm then split into [CLS] and patch features.
template <class T>
EncodeResult<T> finish(const ParamSet<T>& ps, const nd::Tensor<T>& tokens) {
  const std::size_t t = tokens.dim(1), d = tokens.dim(2), n = tokens.dim(0);
  nd::Tensor<T> x = nd::layer_norm(tokens, ps.at("norm.weight"), ps.at("norm.bias"));
  EncodeResult<T> r;
  r.cls = nd::reshape(nd::slice(x, 1, 0, 1), {n, d});
  r.patch_features = nd::slice(x, 1, 1, t);
  return r;
}

/// Full encoder: patches [N, K, P] -> [CLS] [N, D] and patch features [N, K, D].
template <class T>
EncodeResult<T> encode(const ParamSet<T>& ps, const nd::Tensor<T>& patches, std::span<const std::uint8_t> mask,
                       const ViTConfig& cfg, bool keep_attention = false) {
  nd::Tensor<T> x = embed(ps, patches, mask, cfg);
  std::vector<nd::Tensor<T>> maps;
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    nd::Tensor<T> attn;
    x = block_forward(ps, x, b, cfg, keep_attention ? &attn : nullptr);
    if (keep_attention) maps.push_back(std::move(attn));
  }
  EncodeResult<T> r = finish(ps, x);
  r.attention = std::move(maps);
  return r;
}

/// proj_depth linear layers with GELU between them; the last layer is linear.
template <class T>
nd::Tensor<T> project_head(const ParamSet<T>& ps, const nd::Tensor<T>& features, const ViTConfig& cfg) {
  if (cfg.proj_depth == 0) throw std::invalid_argument("project_head: proj_depth must be >= 1");
  nd::Tensor<T> x = features;
  for (std::size_t l = 0; l < cfg.proj_depth; ++l) {
    const std::string pre = "head." + std::to_string(l) + ".";
    x = nd::linear(x, ps.at(pre + "weight"), ps.at(pre + "bias"));
    if (l + 1 < cfg.proj_depth) x = nd::gelu(x);
  }
  return x;
}

}  // namespace conmim::vit
