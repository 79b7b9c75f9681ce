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

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "conmim/data/image.hpp"
#include "conmim/data/mask.hpp"
#include "conmim/rng.hpp"

namespace conmim::data {

/// Geometric transform shared by both views of a pair.
struct Geom {
  bool flip = false;
  double x0 = 0, y0 = 0, w = 0, h = 0;  // crop window in source pixels
};

struct PhotometricConfig {
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double blur_p = 0.1;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 2.0;
  double solarize_p = 0.2;
  double solarize_threshold = 0.5;
};

struct AugConfig {
  std::size_t out_side = 32;
  std::size_t patch_side = 4;
  double scale_lo = 0.2, scale_hi = 1.0;
  double ratio_lo = 3.0 / 4.0, ratio_hi = 4.0 / 3.0;
  bool full_strong = true;        // photometric ops on the full view
  bool corrupted_strong = false;  // photometric ops on the corrupted view
  PhotometricConfig photometric;
  MaskStrategy mask_strategy = MaskStrategy::random;
  double mask_ratio = 0.75;  // 0 draws an empty mask
};

struct AugPair {
  ImageRecord full_view;
  ImageRecord corrupted_view_base;
  MaskPattern mask;
  Geom shared_geom;
};

/// Random resized crop (10 attempts, then centre crop) and a fair coin flip.
inline Geom sample_geom(Rng& rng, std::size_t src_h, std::size_t src_w, const AugConfig& cfg) {
  Geom g;
  const double area = static_cast<double>(src_h * src_w);
  const double log_lo = std::log(cfg.ratio_lo), log_hi = std::log(cfg.ratio_hi);
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(cfg.scale_lo, cfg.scale_hi);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const double w = std::round(std::sqrt(target * aspect)), h = std::round(std::sqrt(target / aspect));
    if (w >= 1 && h >= 1 && w <= static_cast<double>(src_w) && h <= static_cast<double>(src_h)) {
      g.w = w;
      g.h = h;
      g.x0 = static_cast<double>(rng.below(src_w - static_cast<std::size_t>(w) + 1));
      g.y0 = static_cast<double>(rng.below(src_h - static_cast<std::size_t>(h) + 1));
      found = true;
    }
  }
  if (!found) {
    const double s = static_cast<double>(std::min(src_h, src_w));
    g.w = g.h = s;
    g.x0 = (static_cast<double>(src_w) - s) / 2;
    g.y0 = (static_cast<double>(src_h) - s) / 2;
  }
  g.flip = rng.bernoulli(0.5);
  return g;
}

inline ImageRecord hflip(const ImageRecord& img) {
  ImageRecord out = img;
  out.pixels = img.pixels.clone();
  const std::size_t h = img.height(), w = img.width();
  float* dst = out.pixels.mutable_data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) dst[(y * w + x) * 3 + c] = img.at(y, w - 1 - x, c);
  return out;
}

/// Bilinear resample of the crop window to out_side x out_side, then flip.
inline ImageRecord apply_geom(const ImageRecord& img, const Geom& g, std::size_t out_side) {
  const std::size_t h = img.height(), w = img.width();
  ImageRecord out = blank_image(out_side, out_side);
  out.label = img.label;
  out.source_id = img.source_id;
  float* dst = out.pixels.mutable_data();
  const double sx = g.w / static_cast<double>(out_side), sy = g.h / static_cast<double>(out_side);
  for (std::size_t oy = 0; oy < out_side; ++oy) {
    const double fy = std::clamp(g.y0 + (static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_side; ++ox) {
      const std::size_t tx_out = g.flip ? out_side - 1 - ox : ox;
      const double fx = std::clamp(g.x0 + (static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = img.at(y0, x0, c) * (1 - tx) + img.at(y0, x1, c) * tx;
        const double bot = img.at(y1, x0, c) * (1 - tx) + img.at(y1, x1, c) * tx;
        dst[(oy * out_side + tx_out) * 3 + c] = static_cast<float>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Photometric ops, in place on [0, 1] pixels.

namespace detail {

inline float luma(const float* p) { return 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]; }

inline void rgb_to_hsv(const float* p, float& hh, float& s, float& v) {
  const float mx = std::max({p[0], p[1], p[2]}), mn = std::min({p[0], p[1], p[2]}), d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.f;
  if (d <= 0) {
    hh = 0;
    return;
  }
  if (mx == p[0]) hh = std::fmod((p[1] - p[2]) / d + 6.f, 6.f);
  else if (mx == p[1]) hh = (p[2] - p[0]) / d + 2.f;
  else hh = (p[0] - p[1]) / d + 4.f;
  hh /= 6.f;
}

inline void hsv_to_rgb(float hh, float s, float v, float* p) {
  const float h6 = hh * 6.f;
  const int i = static_cast<int>(std::floor(h6)) % 6;
  const float f = h6 - std::floor(h6);
  const float a = v * (1 - s), b = v * (1 - s * f), c = v * (1 - s * (1 - f));
  const float tab[6][3] = {{v, c, a}, {b, v, a}, {a, v, c}, {a, b, v}, {c, a, v}, {v, a, b}};
  for (int k = 0; k < 3; ++k) p[k] = tab[i][k];
}

inline void clamp01(ImageRecord& img) {
  for (auto& v : img.pixels.mutable_values()) v = std::clamp(v, 0.f, 1.f);
}

}  // namespace detail

inline void adjust_brightness(ImageRecord& img, float factor) {
  for (auto& v : img.pixels.mutable_values()) v *= factor;
  detail::clamp01(img);
}

inline void adjust_contrast(ImageRecord& img, float factor) {
  const std::size_t n = img.height() * img.width();
  float* p = img.pixels.mutable_data();
  double m = 0;
  for (std::size_t i = 0; i < n; ++i) m += detail::luma(p + 3 * i);
  const auto mean = static_cast<float>(m / static_cast<double>(n));
  for (auto& v : img.pixels.mutable_values()) v = mean + factor * (v - mean);
  detail::clamp01(img);
}

inline void adjust_saturation(ImageRecord& img, float factor) {
  float* p = img.pixels.mutable_data();
  for (std::size_t i = 0, n = img.height() * img.width(); i < n; ++i, p += 3) {
    const float l = detail::luma(p);
    for (int c = 0; c < 3; ++c) p[c] = l + factor * (p[c] - l);
  }
  detail::clamp01(img);
}

/// Rotates hue by `shift` turns.
inline void adjust_hue(ImageRecord& img, float shift) {
  float* p = img.pixels.mutable_data();
  for (std::size_t i = 0, n = img.height() * img.width(); i < n; ++i, p += 3) {
    float hh, s, v;
    detail::rgb_to_hsv(p, hh, s, v);
    hh = std::fmod(hh + shift + 1.f, 1.f);
    detail::hsv_to_rgb(hh, s, v, p);
  }
}

/// Separable Gaussian, radius ceil(3 sigma), clamped borders.
inline void gaussian_blur(ImageRecord& img, double sigma) {
  const auto r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<float> k(2 * r + 1);
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v = static_cast<float>(v / total);
  const int h = static_cast<int>(img.height()), w = static_cast<int>(img.width());
  std::vector<float> tmp(img.pixels.size());
  const float* src = img.pixels.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * src[(y * w + std::clamp(x + i, 0, w - 1)) * 3 + c];
        tmp[(y * w + x) * 3 + c] = acc;
      }
  float* dst = img.pixels.mutable_data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[(std::clamp(y + i, 0, h - 1) * w + x) * 3 + c];
        dst[(y * w + x) * 3 + c] = acc;
      }
}

inline void solarize(ImageRecord& img, float threshold) {
  for (auto& v : img.pixels.mutable_values())
    if (v >= threshold) v = 1.f - v;
}

/// Jitter (brightness, contrast, saturation, hue), then blur, then solarize.
inline void strong_photometric(ImageRecord& img, Rng& rng, const PhotometricConfig& pc) {
  img.pixels = img.pixels.clone();
  adjust_brightness(img, static_cast<float>(rng.uniform(1 - pc.brightness, 1 + pc.brightness)));
  adjust_contrast(img, static_cast<float>(rng.uniform(1 - pc.contrast, 1 + pc.contrast)));
  adjust_saturation(img, static_cast<float>(rng.uniform(1 - pc.saturation, 1 + pc.saturation)));
  adjust_hue(img, static_cast<float>(rng.uniform(-pc.hue, pc.hue)));
  if (rng.bernoulli(pc.blur_p)) gaussian_blur(img, rng.uniform(pc.blur_sigma_lo, pc.blur_sigma_hi));
  if (rng.bernoulli(pc.solarize_p)) solarize(img, static_cast<float>(pc.solarize_threshold));
}

/// Both views share one crop/flip; photometric ops follow the per-view mode.
/// The geometry, the photometric draws and the mask use separate streams so
/// toggling one never shifts the others.
inline AugPair augment_pair(const ImageRecord& img, std::uint64_t seed, const AugConfig& cfg, bool photometric = true) {
  Rng geom_rng = Rng::stream(seed, "augment");
  Rng full_rng = Rng::stream(seed, "augment.full");
  Rng corrupt_rng = Rng::stream(seed, "augment.corrupted");
  Rng mask_rng = Rng::stream(seed, "mask");
  AugPair pair;
  pair.shared_geom = sample_geom(geom_rng, img.height(), img.width(), cfg);
  ImageRecord base = apply_geom(img, pair.shared_geom, cfg.out_side);
  pair.full_view = base;
  pair.full_view.pixels = base.pixels.clone();
  pair.corrupted_view_base = std::move(base);
  if (photometric && cfg.full_strong) strong_photometric(pair.full_view, full_rng, cfg.photometric);
  if (photometric && cfg.corrupted_strong) strong_photometric(pair.corrupted_view_base, corrupt_rng, cfg.photometric);
  const std::size_t g = cfg.out_side / cfg.patch_side, k = g * g;
  if (cfg.mask_ratio > 0.0) pair.mask = sample_mask(k, cfg.mask_strategy, cfg.mask_ratio, mask_rng);
  else pair.mask = MaskPattern{std::vector<std::uint8_t>(k, 0), cfg.mask_strategy, 0.0};
  return pair;
}

}  // namespace conmim::data
