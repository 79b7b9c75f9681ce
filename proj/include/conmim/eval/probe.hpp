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
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "conmim/data/image.hpp"
#include "conmim/numerics/ops.hpp"
#include "conmim/trainer/optim.hpp"
#include "conmim/trainer/step.hpp"
#include "conmim/vit/encoder.hpp"

namespace conmim::eval {

enum class ProbeMode { linear, partial };
enum class FeatureSource { cls, mean_patch };

inline FeatureSource parse_feature_source(const std::string& s) {
  if (s == "cls") return FeatureSource::cls;
  if (s == "mean_patch") return FeatureSource::mean_patch;
  throw std::invalid_argument("unknown feature source '" + s + "'");
}

inline ProbeMode parse_probe_mode(const std::string& s) {
  if (s == "linear") return ProbeMode::linear;
  if (s == "partial") return ProbeMode::partial;
  throw std::invalid_argument("unknown probe mode '" + s + "'");
}

struct ProbeConfig {
  ProbeMode mode = ProbeMode::linear;
  std::size_t unfrozen_blocks = 0;
  std::size_t epochs = 30;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::size_t batch_size = 64;
  FeatureSource feature_source = FeatureSource::mean_patch;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double accuracy = 0;        // top-1 on the validation split
  double train_accuracy = 0;  // top-1 on the training split after the last epoch
};

/// Worker count from CONMIM_THREADS (default 1).
inline std::size_t worker_count() {
  const char* env = std::getenv("CONMIM_THREADS");
  if (env == nullptr) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v > 0 ? static_cast<std::size_t>(v) : 1;
}

/// Runs fn(begin, end) over [0, n) in chunks of `chunk`, spread over the
/// workers. Each chunk writes a disjoint output range, so results do not
/// depend on the worker count.
template <class Fn>
void for_chunks(std::size_t n, std::size_t chunk, Fn&& fn) {
  const std::size_t chunks = (n + chunk - 1) / chunk, workers = std::min(worker_count(), chunks);
  auto run = [&](std::size_t w) {
    for (std::size_t c = w; c < chunks; c += workers) fn(c * chunk, std::min(n, (c + 1) * chunk));
  };
  if (workers <= 1) {
    run(0);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
}

template <class T>
nd::Tensor<T> pool_features(const vit::EncodeResult<T>& enc, FeatureSource src) {
  return src == FeatureSource::cls ? enc.cls : nd::mean_axis(enc.patch_features, 1);
}

/// Frozen encoder features [N, D]; no tape, projection head bypassed.
template <class T>
nd::Tensor<T> extract_features(const vit::ParamSet<T>& theta, const std::vector<data::ImageRecord>& images,
                               const vit::ViTConfig& vcfg, FeatureSource src, std::size_t batch = 64) {
  if (images.empty()) throw std::invalid_argument("probe: empty split");
  const std::size_t d = vcfg.dim;
  nd::Tensor<T> out({images.size(), d});
  for_chunks(images.size(), batch, [&](std::size_t b, std::size_t e) {
    nd::NoTapeScope<T> off;
    std::vector<const data::ImageRecord*> chunk;
    for (std::size_t i = b; i < e; ++i) chunk.push_back(&images[i]);
    const auto f = pool_features(vit::encode(theta, train::stack_patches<T>(chunk, vcfg), {}, vcfg), src);
    std::copy_n(f.data(), (e - b) * d, out.mutable_data() + b * d);
  });
  return out;
}

inline std::vector<std::size_t> labels_of(const std::vector<data::ImageRecord>& images) {
  std::vector<std::size_t> y;
  for (const auto& im : images) {
    if (!im.label || *im.label < 0) throw std::invalid_argument("probe: record " + im.source_id + " has no label");
    y.push_back(static_cast<std::size_t>(*im.label));
  }
  return y;
}

namespace detail {

template <class T>
struct Standardizer {
  nd::Tensor<T> shift, gain;  // x' = (x + shift) * gain

  static Standardizer fit(const nd::Tensor<T>& f) {
    const std::size_t n = f.dim(0), d = f.dim(1);
    Standardizer s{nd::Tensor<T>({d}), nd::Tensor<T>({d})};
    for (std::size_t j = 0; j < d; ++j) {
      double m = 0, v = 0;
      for (std::size_t i = 0; i < n; ++i) m += f[i * d + j];
      m /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) v += (f[i * d + j] - m) * (f[i * d + j] - m);
      v /= static_cast<double>(n);
      s.shift.mutable_data()[j] = static_cast<T>(-m);
      s.gain.mutable_data()[j] = static_cast<T>(1.0 / (std::sqrt(v) + 1e-6));
    }
    return s;
  }

  nd::Tensor<T> apply(const nd::Tensor<T>& x) const { return nd::mul(nd::add(x, shift), gain); }
};

template <class T>
std::size_t argmax_row(const nd::Tensor<T>& logits, std::size_t r) {
  const std::size_t c = logits.dim(1);
  const T* row = logits.data() + r * c;
  return static_cast<std::size_t>(std::max_element(row, row + c) - row);
}

inline train::TrainConfig probe_optimizer(const ProbeConfig& cfg) {
  train::TrainConfig t;
  t.weight_decay = cfg.weight_decay;
  t.grad_clip = 0;
  return t;
}

}  // namespace detail

/// Trainable tail of a partial fine-tune: the last unfrozen blocks (the rest
/// of the encoder is read from `frozen`) plus a linear classifier.
template <class T>
struct ProbeModel {
  const vit::ParamSet<T>* frozen = nullptr;
  vit::ParamSet<T> trainable;
  std::size_t first_block = 0;
  detail::Standardizer<T> standardize;

  /// Cached prefix activations -> logits.
  nd::Tensor<T> logits(const vit::ParamSet<T>& live, const nd::Tensor<T>& prefix, const vit::ViTConfig& vcfg,
                       FeatureSource src) const {
    nd::Tensor<T> f = prefix;
    if (prefix.rank() == 3) {
      // Block parameters come from `live`; everything else stays frozen.
      vit::ParamSet<T> view;
      for (const auto& [name, t] : *frozen) view.add(name, live.contains(name) ? live.at(name) : t.detached());
      nd::Tensor<T> x = prefix;
      for (std::size_t b = first_block; b < vcfg.depth; ++b) x = vit::block_forward(view, x, b, vcfg);
      f = pool_features(vit::finish(view, x), src);
    }
    return nd::linear(standardize.apply(f), live.at("classifier.weight"), live.at("classifier.bias"));
  }
};

/// Prefix activations for every image: pooled features when nothing is
/// unfrozen, else the token stream entering the first trainable block.
template <class T>
nd::Tensor<T> prefix_activations(const vit::ParamSet<T>& theta, const std::vector<data::ImageRecord>& images,
                                 const vit::ViTConfig& vcfg, const ProbeConfig& cfg, std::size_t first_block) {
  if (first_block == vcfg.depth) return extract_features(theta, images, vcfg, cfg.feature_source);
  if (images.empty()) throw std::invalid_argument("probe: empty split");
  const std::size_t t = vcfg.num_tokens(), d = vcfg.dim;
  nd::Tensor<T> out({images.size(), t, d});
  for_chunks(images.size(), std::size_t{64}, [&](std::size_t b, std::size_t e) {
    nd::NoTapeScope<T> off;
    std::vector<const data::ImageRecord*> chunk;
    for (std::size_t i = b; i < e; ++i) chunk.push_back(&images[i]);
    nd::Tensor<T> x = vit::embed(theta, train::stack_patches<T>(chunk, vcfg), {}, vcfg);
    for (std::size_t k = 0; k < first_block; ++k) x = vit::block_forward(theta, x, k, vcfg);
    std::copy_n(x.data(), (e - b) * t * d, out.mutable_data() + b * t * d);
  });
  return out;
}

template <class T>
nd::Tensor<T> rows_of(const nd::Tensor<T>& x, std::span<const std::size_t> idx) {
  nd::Shape shape = x.shape();
  const std::size_t row = x.size() / shape[0];
  shape[0] = idx.size();
  nd::Tensor<T> out = nd::Tensor<T>::uninitialized(shape);
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(x.data() + idx[i] * row, row, out.mutable_data() + i * row);
  return out;
}

template <class T>
void fit_probe(ProbeModel<T>& model, const nd::Tensor<T>& prefix, std::span<const std::size_t> labels,
               const vit::ViTConfig& vcfg, const ProbeConfig& cfg) {
  const train::TrainConfig opt = detail::probe_optimizer(cfg);
  auto adam = train::AdamState<T>::zeros_like(model.trainable);
  const std::size_t n = labels.size(), bs = std::min(cfg.batch_size, n);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::stream(cfg.seed, "probe", epoch);
    for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
    for (std::size_t s = 0; s + bs <= n; s += bs) {
      const std::span<const std::size_t> idx(order.data() + s, bs);
      std::vector<std::size_t> y(bs);
      for (std::size_t i = 0; i < bs; ++i) y[i] = labels[idx[i]];
      nd::Tape<T> tape;
      vit::ParamSet<T> grads;
      {
        nd::TapeScope<T> scope(tape);
        const auto live = model.trainable.bind(tape);
        tape.backward(nd::cross_entropy(model.logits(live, rows_of(prefix, idx), vcfg, cfg.feature_source), y));
        for (const auto& [name, p] : live) grads.add(name, tape.grad(p));
      }
      train::adamw_step(model.trainable, grads, adam, cfg.lr, opt);
    }
  }
}

template <class T>
double probe_accuracy(const ProbeModel<T>& model, const nd::Tensor<T>& prefix, std::span<const std::size_t> labels,
                      const vit::ViTConfig& vcfg, FeatureSource src) {
  nd::NoTapeScope<T> off;
  std::size_t correct = 0;
  for (std::size_t s = 0; s < labels.size(); s += 256) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(labels.size(), s + 256); ++i) idx.push_back(i);
    const auto logits = model.logits(model.trainable, rows_of(prefix, idx), vcfg, src);
    for (std::size_t i = 0; i < idx.size(); ++i) correct += detail::argmax_row(logits, i) == labels[idx[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

inline std::size_t class_count(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::size_t classes = 0;
  for (auto y : a) classes = std::max(classes, y + 1);
  for (auto y : b) classes = std::max(classes, y + 1);
  return classes;
}

template <class T>
void add_classifier(ProbeModel<T>& model, std::size_t dim, std::size_t classes) {
  model.trainable.add("classifier.weight", nd::Tensor<T>({dim, classes}));
  model.trainable.add("classifier.bias", nd::Tensor<T>({classes}));
}

/// Trains the last `unfrozen_blocks` blocks plus a linear classifier on frozen
/// prefix activations. The encoder passed in is never modified.
template <class T>
ProbeResult partial_finetune(const vit::ParamSet<T>& theta, const std::vector<data::ImageRecord>& train_set,
                             const std::vector<data::ImageRecord>& val_set, const vit::ViTConfig& vcfg,
                             const ProbeConfig& cfg) {
  if (train_set.empty() || val_set.empty()) throw std::invalid_argument("probe: empty split");
  if (cfg.unfrozen_blocks > vcfg.depth)
    throw std::invalid_argument("probe: unfrozen_blocks " + std::to_string(cfg.unfrozen_blocks) + " > depth " +
                                std::to_string(vcfg.depth));
  const auto y_train = labels_of(train_set), y_val = labels_of(val_set);

  ProbeModel<T> model;
  model.frozen = &theta;
  model.first_block = vcfg.depth - cfg.unfrozen_blocks;
  const nd::Tensor<T> train_prefix = prefix_activations(theta, train_set, vcfg, cfg, model.first_block);
  const nd::Tensor<T> val_prefix = prefix_activations(theta, val_set, vcfg, cfg, model.first_block);

  for (const auto& [name, t] : theta)
    if (name.starts_with("blocks.") && std::stoul(name.substr(7)) >= model.first_block)
      model.trainable.add(name, t.clone());
  {
    // Standardization statistics come from the initial training features.
    nd::NoTapeScope<T> off;
    nd::Tensor<T> f = train_prefix;
    if (train_prefix.rank() == 3) {
      nd::Tensor<T> x = train_prefix;
      for (std::size_t b = model.first_block; b < vcfg.depth; ++b) x = vit::block_forward(theta, x, b, vcfg);
      f = pool_features(vit::finish(theta, x), cfg.feature_source);
    }
    model.standardize = detail::Standardizer<T>::fit(f);
  }
  add_classifier(model, vcfg.dim, class_count(y_train, y_val));
  fit_probe(model, train_prefix, y_train, vcfg, cfg);
  return {probe_accuracy(model, val_prefix, y_val, vcfg, cfg.feature_source),
          probe_accuracy(model, train_prefix, y_train, vcfg, cfg.feature_source)};
}

/// Linear classifier on frozen features (partial fine-tune with nothing unfrozen).
template <class T>
ProbeResult linear_probe(const vit::ParamSet<T>& theta, const std::vector<data::ImageRecord>& train_set,
                         const std::vector<data::ImageRecord>& val_set, const vit::ViTConfig& vcfg, ProbeConfig cfg) {
  cfg.unfrozen_blocks = 0;
  return partial_finetune(theta, train_set, val_set, vcfg, cfg);
}

/// Linear classifier trained directly on given features [N, D]; used to
/// check the probe machinery independently of any encoder.
template <class T>
ProbeResult probe_features(const nd::Tensor<T>& train_f, std::span<const std::size_t> y_train, const nd::Tensor<T>& val_f,
                           std::span<const std::size_t> y_val, const ProbeConfig& cfg) {
  vit::ViTConfig vcfg;
  vcfg.dim = train_f.dim(1);
  vit::ParamSet<T> none;
  ProbeModel<T> model;
  model.frozen = &none;
  model.first_block = vcfg.depth;
  model.standardize = detail::Standardizer<T>::fit(train_f);
  add_classifier(model, vcfg.dim, class_count(y_train, y_val));
  fit_probe(model, train_f, y_train, vcfg, cfg);
  return {probe_accuracy(model, val_f, y_val, vcfg, cfg.feature_source),
          probe_accuracy(model, train_f, y_train, vcfg, cfg.feature_source)};
}

}  // namespace conmim::eval
