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
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/numerics/tensor.hpp"

namespace conmim::data {

/// H x W x 3 image with values in [0, 1] plus an optional class label.
struct ImageRecord {
  nd::Tensor<float> pixels;
  std::optional<int> label;
  std::string source_id;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }

  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width() + x) * 3 + c]; }
};

inline ImageRecord blank_image(std::size_t h, std::size_t w) { return {nd::Tensor<float>({h, w, 3}), std::nullopt, ""}; }

inline bool in_unit_range(const ImageRecord& img) {
  for (float v : img.pixels.values())
    if (!(v >= 0.f && v <= 1.f)) return false;
  return true;
}

/// Number of masked cells for a ratio; the guard keeps 0.75 * 64 at 48 rather
/// than 49 when the product rounds up by one ulp.
inline std::size_t masked_count(std::size_t k, double ratio) {
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(k) - 1e-9));
}

enum class MaskStrategy { random, block };

inline const char* strategy_name(MaskStrategy s) { return s == MaskStrategy::random ? "random" : "block"; }

inline MaskStrategy parse_strategy(const std::string& s) {
  if (s == "random") return MaskStrategy::random;
  if (s == "block") return MaskStrategy::block;
  throw std::invalid_argument("unknown mask strategy '" + s + "'");
}

struct MaskPattern {
  std::vector<std::uint8_t> flags;
  MaskStrategy strategy = MaskStrategy::random;
  double ratio = 0.0;

  std::size_t popcount() const {
    std::size_t n = 0;
    for (auto f : flags) n += f != 0;
    return n;
  }
};

}  // namespace conmim::data
