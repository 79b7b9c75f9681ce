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

#include <atomic>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "conmim/numerics/tensor.hpp"

namespace conmim::nd {

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  linear,
  bmm,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  exp,
  log,
  softmax,
  log_softmax,
  l2_normalize,
  layer_norm,
  gelu,
  gather_rows,
  scatter_rows,
  select_rows,
  reshape,
  permute,
  concat,
  slice,
  expand,
  sum,
  mean,
  mean_axis,
  cross_entropy,
  mask_fill,
  stop_gradient,
};

constexpr std::string_view op_name(OpKind k) noexcept {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::linear: return "linear";
    case OpKind::bmm: return "bmm";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::l2_normalize: return "l2_normalize";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::gelu: return "gelu";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::scatter_rows: return "scatter_rows";
    case OpKind::select_rows: return "select_rows";
    case OpKind::reshape: return "reshape";
    case OpKind::permute: return "permute";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::expand: return "expand";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::mean_axis: return "mean_axis";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::mask_fill: return "mask_fill";
    case OpKind::stop_gradient: return "stop_gradient";
  }
  return "?";
}

template <class T>
class Tape;

/// Handed to a node's backward closure; routes input gradients to the tape.
template <class T>
class GradSink {
 public:
  GradSink(Tape<T>& tape, std::span<const std::int64_t> inputs) : tape_(tape), inputs_(inputs) {}

  bool needs(std::size_t i) const noexcept { return inputs_[i] >= 0; }

  void add(std::size_t i, Buffer<T>&& g) {
    if (needs(i)) tape_.accumulate(inputs_[i], std::move(g));
  }

 private:
  Tape<T>& tape_;
  std::span<const std::int64_t> inputs_;
};

/// Append-only record of differentiable ops. Nodes are stored in creation
/// order, which is a topological order because inputs must exist first.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(std::span<const T> grad_out, GradSink<T>& sink)>;

  struct Node {
    OpKind kind;
    std::vector<std::int64_t> inputs;  // node ids, -1 for constants
    Shape shape;
    Backward backward;                 // empty for leaves and barriers
    const T* storage = nullptr;        // leaves only
    std::string label;                 // leaves only
  };

  Tape() : serial_(next_serial()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t serial() const noexcept { return serial_; }
  bool owns(const Tensor<T>& t) const noexcept { return t.tape_ref().tape == serial_; }

  /// Registers t as a differentiable leaf. The returned tensor shares t's
  /// storage; t itself stays off the tape.
  Tensor<T> watch(const Tensor<T>& t, std::string label = {}) {
    Tensor<T> out = t.detached();
    Node n{OpKind::leaf, {}, t.shape(), {}, t.data(), std::move(label)};
    nodes_.push_back(std::move(n));
    out.set_tape_ref({serial_, static_cast<std::int64_t>(nodes_.size() - 1)});
    return out;
  }

  std::int64_t record(OpKind kind, std::vector<std::int64_t> inputs, Shape shape, Backward fn) {
    for (auto id : inputs) {
      if (id >= static_cast<std::int64_t>(nodes_.size()))
        throw std::logic_error("tape: input node recorded after its consumer");
    }
    nodes_.push_back(Node{kind, std::move(inputs), std::move(shape), std::move(fn), nullptr, {}});
    return static_cast<std::int64_t>(nodes_.size() - 1);
  }

  /// Reverse sweep from a scalar root. Previous gradients are discarded.
  void backward(const Tensor<T>& root) {
    if (root.size() != 1 || root.rank() > 1)
      throw ShapeError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
    if (!owns(root)) throw std::invalid_argument("backward: root is not on this tape");
    grads_.assign(nodes_.size(), {});
    const auto root_id = static_cast<std::size_t>(root.tape_ref().node);
    grads_[root_id] = Buffer<T>{T(1)};
    for (std::size_t i = root_id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (grads_[i].empty() || !n.backward) continue;
      GradSink<T> sink(*this, n.inputs);
      n.backward(std::span<const T>(grads_[i]), sink);
    }
    ran_backward_ = true;
  }

  /// Gradient of the last backward root w.r.t. t; zeros if t received none.
  Tensor<T> grad(const Tensor<T>& t) const {
    if (!owns(t)) throw std::invalid_argument("grad: tensor is not on this tape");
    if (!ran_backward_) throw std::logic_error("grad: backward has not run");
    const auto& g = grads_[static_cast<std::size_t>(t.tape_ref().node)];
    if (g.empty()) return Tensor<T>(t.shape());
    return Tensor<T>(t.shape(), std::span<const T>(g));
  }

  bool has_grad(std::int64_t node) const noexcept {
    return ran_backward_ && node >= 0 && static_cast<std::size_t>(node) < grads_.size() &&
           !grads_[static_cast<std::size_t>(node)].empty();
  }

  std::span<const Node> nodes() const noexcept { return nodes_; }
  std::span<const T> node_grad(std::int64_t node) const { return grads_.at(static_cast<std::size_t>(node)); }

  /// True when some leaf aliases the given storage.
  bool references_storage(const T* p) const noexcept {
    for (const auto& n : nodes_)
      if (n.kind == OpKind::leaf && n.storage == p) return true;
    return false;
  }

  std::size_t count(OpKind kind) const noexcept {
    std::size_t c = 0;
    for (const auto& n : nodes_) c += n.kind == kind;
    return c;
  }

  void accumulate(std::int64_t node, Buffer<T>&& g) {
    auto& slot = grads_[static_cast<std::size_t>(node)];
    if (slot.empty()) {
      slot = std::move(g);
      return;
    }
    if (slot.size() != g.size()) throw std::logic_error("tape: gradient size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

 private:
  static std::uint64_t next_serial() noexcept {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  std::uint64_t serial_;
  std::vector<Node> nodes_;
  std::vector<Buffer<T>> grads_;
  bool ran_backward_ = false;
};

namespace detail {
template <class T>
Tape<T>*& active_tape_slot() noexcept {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}
inline bool& strict_slot() noexcept {
  thread_local bool strict = false;
  return strict;
}
}  // namespace detail

template <class T>
Tape<T>* active_tape() noexcept {
  return detail::active_tape_slot<T>();
}

inline bool strict_mode() noexcept { return detail::strict_slot(); }

/// Makes `tape` the recording target for ops on this thread.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) noexcept : prev_(detail::active_tape_slot<T>()) {
    detail::active_tape_slot<T>() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Suspends recording (the `no_grad` region used for the key branch).
template <class T>
class NoTapeScope {
 public:
  NoTapeScope() noexcept : prev_(detail::active_tape_slot<T>()) { detail::active_tape_slot<T>() = nullptr; }
  ~NoTapeScope() { detail::active_tape_slot<T>() = prev_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Ops reject non-finite inputs while a StrictScope is alive.
class StrictScope {
 public:
  explicit StrictScope(bool on = true) noexcept : prev_(detail::strict_slot()) { detail::strict_slot() = on; }
  ~StrictScope() { detail::strict_slot() = prev_; }
  StrictScope(const StrictScope&) = delete;
  StrictScope& operator=(const StrictScope&) = delete;

 private:
  bool prev_;
};

}  // namespace conmim::nd
