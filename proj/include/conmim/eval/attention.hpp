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
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/data/image.hpp"
#include "conmim/trainer/step.hpp"
#include "conmim/vit/encoder.hpp"

namespace conmim::eval {

/// Head-averaged [CLS] -> patch attention of one block on a sqrt(K) grid.
struct AttentionGrid {
  std::size_t side = 0;
  std::vector<double> cells;  // K values, raster order
  double cls_self = 0;        // [CLS] -> [CLS], not part of the grid
};

template <class T>
AttentionGrid export_attention(const vit::ParamSet<T>& theta, const data::ImageRecord& image, std::size_t block,
                               const vit::ViTConfig& vcfg) {
  if (block >= vcfg.depth)
    throw std::out_of_range("export_attention: block " + std::to_string(block) + " >= depth " + std::to_string(vcfg.depth));
  nd::NoTapeScope<T> off;
  const auto enc = vit::encode(theta, train::stack_patches<T>({&image}, vcfg), {}, vcfg, true);
  const nd::Tensor<T>& attn = enc.attention[block];  // [1, H, T, T]
  const std::size_t h = vcfg.heads, t = vcfg.num_tokens(), k = vcfg.num_patches();
  AttentionGrid g{vcfg.grid(), std::vector<double>(k, 0.0), 0.0};
  for (std::size_t head = 0; head < h; ++head) {
    const T* row = attn.data() + head * t * t;  // query 0 is [CLS]
    g.cls_self += row[0];
    for (std::size_t j = 0; j < k; ++j) g.cells[j] += row[1 + j];
  }
  g.cls_self /= static_cast<double>(h);
  for (auto& v : g.cells) v /= static_cast<double>(h);
  return g;
}

inline void write_attention_csv(std::ostream& out, const AttentionGrid& g) {
  char buf[32];
  for (std::size_t y = 0; y < g.side; ++y) {
    for (std::size_t x = 0; x < g.side; ++x) {
      std::snprintf(buf, sizeof buf, "%.9g", g.cells[y * g.side + x]);
      out << (x ? "," : "") << buf;
    }
    out << '\n';
  }
}

/// Shannon entropy (nats) of the grid renormalized to a distribution.
inline double spatial_entropy(const AttentionGrid& g) {
  double total = 0, h = 0;
  for (double v : g.cells) total += v;
  for (double v : g.cells)
    if (v > 0) h -= (v / total) * std::log(v / total);
  return h;
}

/// Population variance of spatial_entropy over a set of grids.
inline double entropy_variance(const std::vector<AttentionGrid>& grids) {
  if (grids.empty()) return 0;
  double m = 0, v = 0;
  for (const auto& g : grids) m += spatial_entropy(g);
  m /= static_cast<double>(grids.size());
  for (const auto& g : grids) v += (spatial_entropy(g) - m) * (spatial_entropy(g) - m);
  return v / static_cast<double>(grids.size());
}

}  // namespace conmim::eval
