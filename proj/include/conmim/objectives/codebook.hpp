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
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/numerics/tensor.hpp"
#include "conmim/rng.hpp"

namespace conmim::obj {

/// Discrete patch vocabulary standing in for a learned image tokenizer.
struct TokenizerCodebook {
  nd::Tensor<float> centroids;  // [V, P]

  std::size_t vocab() const { return centroids.dim(0); }
  std::size_t width() const { return centroids.dim(1); }
};

namespace detail {

inline double sq_dist(const float* a, const float* b, std::size_t p) {
  double s = 0;
  for (std::size_t i = 0; i < p; ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

/// Index of the nearest centroid (squared Euclidean, first wins ties).
inline std::size_t nearest_token(const TokenizerCodebook& cb, const float* patch) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < cb.vocab(); ++v) {
    const double d = detail::sq_dist(patch, cb.centroids.data() + v * cb.width(), cb.width());
    if (d < best_d) {
      best_d = d;
      best = v;
    }
  }
  return best;
}

inline std::vector<std::size_t> assign_tokens(const TokenizerCodebook& cb, const nd::Tensor<float>& patches) {
  const std::size_t m = patches.size() / cb.width();
  std::vector<std::size_t> ids(m);
  for (std::size_t i = 0; i < m; ++i) ids[i] = nearest_token(cb, patches.data() + i * cb.width());
  return ids;
}

/// Lloyd's k-means with k-means++ seeding; empty clusters keep their centroid.
inline TokenizerCodebook fit_codebook(const nd::Tensor<float>& patches, std::size_t v, std::uint64_t seed,
                                      int iterations = 20) {
  if (patches.rank() != 2) throw nd::ShapeError("fit_codebook: patches must be [M, P]");
  const std::size_t m = patches.dim(0), p = patches.dim(1);
  if (v == 0) throw std::invalid_argument("fit_codebook: V must be positive");
  if (m < v) throw std::invalid_argument("fit_codebook: " + std::to_string(m) + " patches < V=" + std::to_string(v));
  Rng rng = Rng::stream(seed, "tokenizer");
  const float* x = patches.data();
  TokenizerCodebook cb{nd::Tensor<float>({v, p})};
  float* c = cb.centroids.mutable_data();

  std::vector<double> d2(m, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(m);
  for (std::size_t j = 0; j < v; ++j) {
    std::copy_n(x + pick * p, p, c + j * p);
    double total = 0;
    for (std::size_t i = 0; i < m; ++i) {
      d2[i] = std::min(d2[i], detail::sq_dist(x + i * p, c + j * p, p));
      total += d2[i];
    }
    if (j + 1 == v) break;
    if (total <= 0) {
      pick = rng.below(m);
      continue;
    }
    double u = rng.uniform() * total;
    pick = m - 1;
    for (std::size_t i = 0; i < m; ++i) {
      u -= d2[i];
      if (u < 0) {
        pick = i;
        break;
      }
    }
  }

  std::vector<double> acc(v * p);
  std::vector<std::size_t> count(v);
  for (int it = 0; it < iterations; ++it) {
    std::fill(acc.begin(), acc.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t a = nearest_token(cb, x + i * p);
      ++count[a];
      for (std::size_t q = 0; q < p; ++q) acc[a * p + q] += x[i * p + q];
    }
    for (std::size_t j = 0; j < v; ++j)
      if (count[j] > 0)
        for (std::size_t q = 0; q < p; ++q) c[j * p + q] = static_cast<float>(acc[j * p + q] / count[j]);
  }
  return cb;
}

}  // namespace conmim::obj
