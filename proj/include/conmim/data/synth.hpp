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
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/data/image.hpp"
#include "conmim/rng.hpp"

namespace conmim::data {

inline constexpr std::array<const char*, 8> kShapeNames = {"disk", "square", "stripes", "checker",
                                                           "ring", "cross",  "blob",    "diagonal"};

namespace detail {

struct Color {
  float r, g, b;
};

inline Color random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
}

inline float color_distance(Color a, Color b) {
  return std::abs(a.r - b.r) + std::abs(a.g - b.g) + std::abs(a.b - b.b);
}

// Foreground coverage in [0, 1] of shape `id` at offset (dx, dy) from the
// centre, in units of the shape radius.
inline float coverage(int id, double dx, double dy, double angle, double freq) {
  const double d = std::hypot(dx, dy);
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  const bool in_box = std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
  switch (id) {
    case 0: return d <= 1.0;
    case 1: return std::abs(u) <= 0.85 && std::abs(v) <= 0.85;
    case 2: return in_box && std::sin(u * freq * std::numbers::pi) > 0.0;
    case 3: return in_box && ((static_cast<int>(std::floor((u + 1.0) * 2.0)) + static_cast<int>(std::floor((v + 1.0) * 2.0))) % 2 == 0);
    case 4: return d <= 1.0 && d >= 0.6;
    case 5: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case 6: return static_cast<float>(std::exp(-2.0 * d * d));
    default: return in_box && std::abs(u - v) <= 0.35;
  }
}

}  // namespace detail

/// Class labels come from a seeded permutation of 0..C-1 per block of C
/// indices, so every class appears exactly once per block.
inline int synth_label(std::size_t index, int classes, std::uint64_t seed) {
  const std::size_t block = index / static_cast<std::size_t>(classes);
  Rng rng = Rng::stream(seed, "labels", block);
  std::vector<int> perm(static_cast<std::size_t>(classes));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  return perm[index % static_cast<std::size_t>(classes)];
}

/// One synthetic image: shape `label` with random colours, pose, size and noise.
inline ImageRecord synth_image(std::size_t index, int label, std::size_t side, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "data", index);
  const detail::Color bg = detail::random_color(rng);
  detail::Color fg = detail::random_color(rng);
  while (detail::color_distance(fg, bg) < 0.6f) fg = detail::random_color(rng);
  const double radius = rng.uniform(0.22, 0.36) * static_cast<double>(side);
  const double cx = rng.uniform(radius, static_cast<double>(side) - radius);
  const double cy = rng.uniform(radius, static_cast<double>(side) - radius);
  const double angle = rng.uniform(0.0, std::numbers::pi / 2);
  const double freq = rng.uniform(2.0, 3.5);
  const double noise = rng.uniform(0.0, 0.06);

  ImageRecord img = blank_image(side, side);
  img.label = label;
  img.source_id = "synth:" + std::to_string(seed) + ":" + std::to_string(index);
  float* px = img.pixels.mutable_data();
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - cx) / radius, dy = (static_cast<double>(y) + 0.5 - cy) / radius;
      const float a = detail::coverage(label, dx, dy, angle, freq);
      const float rgb[3] = {bg.r + a * (fg.r - bg.r), bg.g + a * (fg.g - bg.g), bg.b + a * (fg.b - bg.b)};
      for (int c = 0; c < 3; ++c)
        *px++ = std::clamp(rgb[c] + static_cast<float>(noise * rng.normal()), 0.f, 1.f);
    }
  return img;
}

/// n images over C classes (2 <= C <= 8), deterministic per (seed, index).
inline std::vector<ImageRecord> synth_dataset(std::size_t n, int classes, std::size_t side, std::uint64_t seed) {
  if (classes < 2 || classes > static_cast<int>(kShapeNames.size()))
    throw std::invalid_argument("synth_dataset: classes must be in [2, 8], got " + std::to_string(classes));
  if (side == 0) throw std::invalid_argument("synth_dataset: side must be positive");
  std::vector<ImageRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_image(i, synth_label(i, classes, seed), side, seed));
  return out;
}

}  // namespace conmim::data
