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

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

#include "conmim/numerics/tape.hpp"
#include "conmim/numerics/tensor.hpp"

namespace conmim::vit {

/// Named tensors, iterated in lexicographic name order.
template <class T>
class ParamSet {
 public:
  using Map = std::map<std::string, nd::Tensor<T>, std::less<>>;

  void add(std::string name, nd::Tensor<T> t) {
    if (!map_.emplace(name, std::move(t)).second) throw std::invalid_argument("params: duplicate " + name);
  }

  const nd::Tensor<T>& at(std::string_view name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("params: no tensor named " + std::string(name));
    return it->second;
  }

  nd::Tensor<T>& at(std::string_view name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("params: no tensor named " + std::string(name));
    return it->second;
  }

  bool contains(std::string_view name) const { return map_.find(name) != map_.end(); }
  std::size_t size() const noexcept { return map_.size(); }

  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }
  auto begin() { return map_.begin(); }
  auto end() { return map_.end(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : map_) n += t.size();
    return n;
  }

  ParamSet clone() const {
    ParamSet out;
    for (const auto& [name, t] : map_) out.map_.emplace(name, t.clone());
    return out;
  }

  /// Same names and shapes, key by key.
  bool congruent(const ParamSet& other) const {
    if (map_.size() != other.map_.size()) return false;
    for (auto a = map_.begin(), b = other.map_.begin(); a != map_.end(); ++a, ++b)
      if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
    return true;
  }

  /// Copy whose selected entries are tape leaves aliasing this set's storage.
  template <class Pred>
  ParamSet bind(nd::Tape<T>& tape, Pred&& trainable) const {
    ParamSet out;
    for (const auto& [name, t] : map_)
      out.map_.emplace(name, trainable(std::string_view(name)) ? tape.watch(t, name) : t.detached());
    return out;
  }

  ParamSet bind(nd::Tape<T>& tape) const {
    return bind(tape, [](std::string_view) { return true; });
  }

 private:
  Map map_;
};

/// Bitwise equality of every tensor.
template <class T>
bool bit_equal(const ParamSet<T>& a, const ParamSet<T>& b) {
  if (!a.congruent(b)) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib)
    if (!nd::bit_equal(ia->second, ib->second)) return false;
  return true;
}

/// In-training parameters and their momentum twin.
template <class T>
struct EncoderPair {
  ParamSet<T> theta;
  ParamSet<T> theta_tilde;

  static EncoderPair synced(ParamSet<T> theta) {
    EncoderPair p;
    p.theta_tilde = theta.clone();
    p.theta = std::move(theta);
    return p;
  }

  /// theta_tilde <- theta (used by the no-momentum-asymmetry ablation).
  void sync() { theta_tilde = theta.clone(); }

  bool congruent() const { return theta.congruent(theta_tilde); }
};

}  // namespace conmim::vit
