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
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/data/image.hpp"
#include "conmim/rng.hpp"

namespace conmim::data {

inline void check_ratio(double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must be in (0, 1), got " + std::to_string(ratio));
}

namespace detail {

// Partial Fisher-Yates: marks `count` of `cells` uniformly without replacement.
inline void mark_random(std::vector<std::uint8_t>& flags, std::vector<std::size_t> cells, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(cells[i], cells[i + rng.below(cells.size() - i)]);
    flags[cells[i]] = 1;
  }
}

inline std::size_t grid_side(std::size_t k) {
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(k))));
  if (g * g != k) throw std::invalid_argument("block masking needs a square grid, K=" + std::to_string(k));
  return g;
}

}  // namespace detail

/// Exactly masked_count(k, ratio) flags. Random: uniform without replacement.
/// Block: union of rectangles (sides >= 2, aspect in [0.3, 3.3]) until the
/// target is reached; the last rectangle's surplus cells are dropped at random.
inline MaskPattern sample_mask(std::size_t k, MaskStrategy strategy, double ratio, Rng& rng) {
  check_ratio(ratio);
  if (k == 0) throw std::invalid_argument("sample_mask: K must be positive");
  const std::size_t target = masked_count(k, ratio);
  MaskPattern m{std::vector<std::uint8_t>(k, 0), strategy, ratio};
  if (strategy == MaskStrategy::random) {
    std::vector<std::size_t> cells(k);
    for (std::size_t i = 0; i < k; ++i) cells[i] = i;
    detail::mark_random(m.flags, std::move(cells), target, rng);
    return m;
  }

  const std::size_t g = detail::grid_side(k);
  if (g < 2) throw std::invalid_argument("block masking needs a grid of side >= 2");
  const double log_lo = std::log(0.3), log_hi = std::log(3.3);
  std::size_t count = 0;
  while (count < target) {
    const double area = rng.uniform(4.0, static_cast<double>(std::max<std::size_t>(target - count, 4)));
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    if (h < 2 || w < 2 || h > g || w > g) continue;
    const std::size_t top = rng.below(g - h + 1), left = rng.below(g - w + 1);
    std::vector<std::size_t> fresh;
    for (std::size_t y = top; y < top + h; ++y)
      for (std::size_t x = left; x < left + w; ++x)
        if (!m.flags[y * g + x]) fresh.push_back(y * g + x);
    if (count + fresh.size() <= target) {
      for (auto c : fresh) m.flags[c] = 1;
      count += fresh.size();
    } else {
      detail::mark_random(m.flags, std::move(fresh), target - count, rng);
      count = target;
    }
  }
  return m;
}

inline MaskPattern sample_mask(std::size_t k, MaskStrategy strategy, double ratio, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "mask");
  return sample_mask(k, strategy, ratio, rng);
}

}  // namespace conmim::data
