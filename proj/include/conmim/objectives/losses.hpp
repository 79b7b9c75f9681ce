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
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/numerics/ops.hpp"

namespace conmim::obj {

enum class NegativePool { per_image, cross_image, filtered };

inline const char* pool_name(NegativePool p) {
  switch (p) {
    case NegativePool::per_image: return "per_image";
    case NegativePool::cross_image: return "cross_image";
    default: return "filtered";
  }
}

inline NegativePool parse_pool(const std::string& s) {
  if (s == "per_image") return NegativePool::per_image;
  if (s == "cross_image") return NegativePool::cross_image;
  if (s == "filtered") return NegativePool::filtered;
  throw std::invalid_argument("unknown negative pool '" + s + "'");
}

struct LossConfig {
  double temperature = 0.1;
  NegativePool negative_pool = NegativePool::per_image;
  double filter_threshold = 0.8;  // cosine cutoff, filtered pool only

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("loss: temperature must be positive");
    if (!(filter_threshold > 0.0 && filter_threshold <= 1.0))
      throw std::invalid_argument("loss: filter_threshold must be in (0, 1]");
  }
};

/// Scalar loss (on the tape when one is active) plus per-anchor diagnostics.
template <class T>
struct LossReport {
  nd::Tensor<T> loss;
  double value = 0.0;
  std::vector<std::size_t> per_anchor_rank;  // 1 = positive scored highest
  double mean_rank = 0.0;
  double mean_softmax_entropy = 0.0;
  std::size_t n_anchors = 0;
};

/// Fills the diagnostics from final logits [M, C]; entries equal to `excluded`
/// are outside the pool.
template <class T>
void fill_diagnostics(LossReport<T>& r, const nd::Tensor<T>& logits, std::span<const std::size_t> labels,
                      T excluded = -std::numeric_limits<T>::infinity()) {
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  r.n_anchors = m;
  r.per_anchor_rank.assign(m, 1);
  double rank_sum = 0, entropy_sum = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = logits.data() + i * c;
    const T pos = row[labels[i]];
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t rank = 1;
    for (std::size_t j = 0; j < c; ++j) {
      if (row[j] == excluded) continue;
      if (j != labels[i] && row[j] > pos) ++rank;
      mx = std::max(mx, static_cast<double>(row[j]));
    }
    double z = 0, ez = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (row[j] == excluded) continue;
      const double d = static_cast<double>(row[j]) - mx, e = std::exp(d);
      z += e;
      ez += e * d;
    }
    entropy_sum += std::log(z) - ez / z;
    r.per_anchor_rank[i] = rank;
    rank_sum += static_cast<double>(rank);
  }
  r.mean_rank = rank_sum / static_cast<double>(m);
  r.mean_softmax_entropy = entropy_sum / static_cast<double>(m);
}

/// Keys may be off the tape or come straight out of a stop_gradient node.
template <class T>
void require_gradient_free(const nd::Tensor<T>& keys) {
  if (!keys.on_tape()) return;
  const nd::Tape<T>* tape = nd::active_tape<T>();
  if (tape != nullptr && tape->owns(keys) &&
      tape->nodes()[static_cast<std::size_t>(keys.tape_ref().node)].kind == nd::OpKind::stop_gradient)
    return;
  throw std::invalid_argument("key branch must be gradient-free");
}

/// Denoising patch-level contrast. queries/keys are [N, K, D]; anchors holds
/// N*K flags selecting the anchor positions (the masked patches). Each anchor
/// (n, j) must pick key (n, j) out of its pool.
template <class T>
LossReport<T> conmim_loss(const nd::Tensor<T>& queries, const nd::Tensor<T>& keys,
                          std::span<const std::uint8_t> anchors, const LossConfig& cfg) {
  cfg.validate();
  require_gradient_free(keys);
  if (queries.rank() != 3 || queries.shape() != keys.shape())
    throw nd::ShapeError("conmim_loss", queries.shape(), keys.shape());
  const std::size_t n = queries.dim(0), k = queries.dim(1), d = queries.dim(2);
  if (anchors.size() != n * k)
    throw std::invalid_argument("conmim_loss: " + std::to_string(anchors.size()) + " mask flags for " +
                                std::to_string(n * k) + " patches");
  std::vector<std::size_t> rows, labels;
  for (std::size_t i = 0; i < n * k; ++i)
    if (anchors[i]) {
      rows.push_back(i);
      labels.push_back(cfg.negative_pool == NegativePool::cross_image ? i : i % k);
    }
  if (rows.empty()) throw std::invalid_argument("conmim_loss: empty mask across batch");

  const nd::Tensor<T> q = nd::l2_normalize(queries);
  const nd::Tensor<T> key = nd::l2_normalize(keys);
  const T inv_tau = static_cast<T>(1.0 / cfg.temperature);
  nd::Tensor<T> sim;
  if (cfg.negative_pool == NegativePool::cross_image) {
    nd::Tensor<T> qa = nd::gather_rows(nd::reshape(q, {n * k, d}), rows);
    sim = nd::reshape(nd::bmm(nd::reshape(qa, {1, rows.size(), d}), nd::reshape(key, {1, n * k, d}), true),
                      {rows.size(), n * k});
  } else {
    sim = nd::gather_rows(nd::reshape(nd::bmm(q, key, true), {n * k, k}), rows);
  }

  LossReport<T> r;
  nd::Tensor<T> logits = nd::scale(sim, inv_tau);
  T excluded = -std::numeric_limits<T>::infinity();
  if (cfg.negative_pool == NegativePool::filtered) {
    // Negatives that look too much like the anchor are dropped; the
    // positive always stays.
    excluded = static_cast<T>(-1e30);
    std::vector<std::uint8_t> keep(sim.size(), 1);
    const T cut = static_cast<T>(cfg.filter_threshold);
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t j = 0; j < k; ++j)
        if (j != labels[a] && sim[a * k + j] > cut) keep[a * k + j] = 0;
    logits = nd::mask_fill(logits, keep, excluded);
  }
  r.loss = nd::cross_entropy(logits, labels);
  r.value = static_cast<double>(r.loss.item());
  fill_diagnostics(r, logits, labels, excluded);
  return r;
}

/// Symmetric in-batch InfoNCE over pooled features a, b [N, D]; pair i is
/// the positive, every other row of the opposite side a negative.
template <class T>
LossReport<T> instance_infonce_loss(const nd::Tensor<T>& a, const nd::Tensor<T>& b, double temperature) {
  if (a.rank() != 2 || a.shape() != b.shape()) throw nd::ShapeError("instance_infonce_loss", a.shape(), b.shape());
  if (!(temperature > 0.0)) throw std::invalid_argument("instance_infonce_loss: temperature must be positive");
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (n < 2) throw std::invalid_argument("instance_infonce_loss: need N >= 2 for negatives");
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i;
  const T inv_tau = static_cast<T>(1.0 / temperature);
  const nd::Tensor<T> an = nd::reshape(nd::l2_normalize(a), {1, n, d});
  const nd::Tensor<T> bn = nd::reshape(nd::l2_normalize(b), {1, n, d});
  const nd::Tensor<T> ab = nd::scale(nd::reshape(nd::bmm(an, bn, true), {n, n}), inv_tau);
  const nd::Tensor<T> ba = nd::scale(nd::reshape(nd::bmm(bn, an, true), {n, n}), inv_tau);
  LossReport<T> r;
  r.loss = nd::scale(nd::add(nd::cross_entropy(ab, labels), nd::cross_entropy(ba, labels)), T(0.5));
  r.value = static_cast<double>(r.loss.item());
  fill_diagnostics(r, ab, labels);
  return r;
}

/// Masked-token classification: logits [M, V] against token ids.
template <class T>
LossReport<T> beit_style_loss(const nd::Tensor<T>& logits, std::span<const std::size_t> token_ids) {
  if (logits.rank() != 2 || logits.dim(0) != token_ids.size())
    throw nd::ShapeError("beit_style_loss: logits " + nd::shape_str(logits.shape()) + " vs " +
                         std::to_string(token_ids.size()) + " ids");
  for (auto id : token_ids)
    if (id >= logits.dim(1))
      throw std::out_of_range("beit_style_loss: token id " + std::to_string(id) + " outside [0," +
                              std::to_string(logits.dim(1)) + ")");
  LossReport<T> r;
  r.loss = nd::cross_entropy(logits, token_ids);
  r.value = static_cast<double>(r.loss.item());
  fill_diagnostics(r, logits, token_ids);
  return r;
}

}  // namespace conmim::obj
