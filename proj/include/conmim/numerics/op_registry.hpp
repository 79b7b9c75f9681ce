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
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "conmim/numerics/grad_check.hpp"
#include "conmim/numerics/ops.hpp"
#include "conmim/rng.hpp"

namespace conmim::nd {

/// A random instance of one op: its inputs and how to apply the op to them.
struct OpInstance {
  std::vector<Tensor<double>> inputs;
  std::function<Tensor<double>(std::span<const Tensor<double>>)> apply;
};

struct RegisteredOp {
  std::string name;
  OpKind kind;
  std::function<OpInstance(Rng&)> make;
};

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.mutable_values()) v = rng.uniform(lo, hi);
  return t;
}

inline std::size_t extent(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

}  // namespace detail

/// Every differentiable op with a generator of small random instances.
/// stop_gradient is deliberately absent: its backward is zero by contract.
inline const std::vector<RegisteredOp>& op_registry() {
  using detail::extent;
  using detail::random_tensor;
  using Args = std::span<const Tensor<double>>;
  static const std::vector<RegisteredOp> ops = {
      {"matmul", OpKind::matmul,
       [](Rng& r) {
         const auto b = extent(r, 1, 3), m = extent(r, 1, 4), k = extent(r, 1, 4), n = extent(r, 1, 4);
         return OpInstance{{random_tensor(r, {b, m, k}), random_tensor(r, {k, n})},
                           [](Args a) { return matmul(a[0], a[1]); }};
       }},
      {"linear", OpKind::linear,
       [](Rng& r) {
         const auto b = extent(r, 1, 3), k = extent(r, 1, 4), n = extent(r, 1, 4);
         return OpInstance{{random_tensor(r, {b, k}), random_tensor(r, {k, n}), random_tensor(r, {n})},
                           [](Args a) { return linear(a[0], a[1], a[2]); }};
       }},
      {"bmm", OpKind::bmm,
       [](Rng& r) {
         const auto b = extent(r, 1, 3), m = extent(r, 1, 4), k = extent(r, 1, 4), n = extent(r, 1, 4);
         return OpInstance{{random_tensor(r, {b, m, k}), random_tensor(r, {b, k, n})},
                           [](Args a) { return bmm(a[0], a[1], false); }};
       }},
      {"bmm_transposed", OpKind::bmm,
       [](Rng& r) {
         const auto b = extent(r, 1, 3), m = extent(r, 1, 4), k = extent(r, 1, 4), n = extent(r, 1, 4);
         return OpInstance{{random_tensor(r, {b, m, k}), random_tensor(r, {b, n, k})},
                           [](Args a) { return bmm(a[0], a[1], true); }};
       }},
      {"add_broadcast", OpKind::add,
       [](Rng& r) {
         const auto m = extent(r, 1, 4), n = extent(r, 1, 5);
         return OpInstance{{random_tensor(r, {m, n}), random_tensor(r, {n})},
                           [](Args a) { return add(a[0], a[1]); }};
       }},
      {"sub", OpKind::sub,
       [](Rng& r) {
         const auto m = extent(r, 1, 4), n = extent(r, 1, 5);
         return OpInstance{{random_tensor(r, {m, n}), random_tensor(r, {m, n})},
                           [](Args a) { return sub(a[0], a[1]); }};
       }},
      {"mul_broadcast", OpKind::mul,
       [](Rng& r) {
         const auto m = extent(r, 1, 4), n = extent(r, 1, 5);
         return OpInstance{{random_tensor(r, {m, n}), random_tensor(r, {n})},
                           [](Args a) { return mul(a[0], a[1]); }};
       }},
      {"scale", OpKind::scale,
       [](Rng& r) {
         const double f = r.uniform(-2.0, 2.0);
         return OpInstance{{random_tensor(r, {extent(r, 1, 6)})}, [f](Args a) { return scale(a[0], f); }};
       }},
      {"add_scalar", OpKind::add_scalar,
       [](Rng& r) {
         const double v = r.uniform(-2.0, 2.0);
         return OpInstance{{random_tensor(r, {extent(r, 1, 6)})}, [v](Args a) { return add_scalar(a[0], v); }};
       }},
      {"exp", OpKind::exp,
       [](Rng& r) {
         return OpInstance{{random_tensor(r, {extent(r, 1, 6)})}, [](Args a) { return exp(a[0]); }};
       }},
      {"log", OpKind::log,
       [](Rng& r) {
         return OpInstance{{random_tensor(r, {extent(r, 1, 6)}, 0.5, 2.0)}, [](Args a) { return log(a[0]); }};
       }},
      {"softmax", OpKind::softmax,
       [](Rng& r) {
         return OpInstance{{random_tensor(r, {extent(r, 1, 3), extent(r, 2, 5)}, -2.0, 2.0)},
                           [](Args a) { return softmax(a[0]); }};
       }},
      {"log_softmax", OpKind::log_softmax,
       [](Rng& r) {
         return OpInstance{{random_tensor(r, {extent(r, 1, 3), extent(r, 2, 5)}, -2.0, 2.0)},
                           [](Args a) { return log_softmax(a[0]); }};
       }},
      {"l2_normalize", OpKind::l2_normalize,
       [](Rng& r) {
         return OpInstance{{random_tensor(r, {extent(r, 1, 3), extent(r, 2, 5)})},
                           [](Args a) { return l2_normalize(a[0]); }};
       }},
      {"layer_norm", OpKind::layer_norm,
       [](Rng& r) {
         const auto m = extent(r, 1, 3), n = extent(r, 2, 6);
         return OpInstance{{random_tensor(r, {m, n}), random_tensor(r, {n}, 0.5, 1.5), random_tensor(r, {n})},
                           [](Args a) { return layer_norm(a[0], a[1], a[2]); }};
       }},
      {"gelu", OpKind::gelu,
       [](Rng& r) {
         return OpInstance{{random_tensor(r, {extent(r, 1, 8)}, -3.0, 3.0)}, [](Args a) { return gelu(a[0]); }};
       }},
      {"gather_rows", OpKind::gather_rows,
       [](Rng& r) {
         const auto rows = extent(r, 2, 5), cols = extent(r, 1, 4), picks = extent(r, 1, 6);
         std::vector<std::size_t> idx(picks);
         for (auto& i : idx) i = r.below(rows);
         return OpInstance{{random_tensor(r, {rows, cols})},
                           [idx](Args a) { return gather_rows(a[0], std::span<const std::size_t>(idx)); }};
       }},
      {"scatter_rows", OpKind::scatter_rows,
       [](Rng& r) {
         const auto rows = extent(r, 2, 5), cols = extent(r, 1, 4), picks = extent(r, 1, 6);
         std::vector<std::size_t> idx(picks);
         for (auto& i : idx) i = r.below(rows);
         return OpInstance{{random_tensor(r, {picks, cols})}, [idx, rows](Args a) {
                             return scatter_rows(a[0], std::span<const std::size_t>(idx), rows);
                           }};
       }},
      {"select_rows", OpKind::select_rows,
       [](Rng& r) {
         const auto n = extent(r, 1, 2), k = extent(r, 2, 4), d = extent(r, 1, 4);
         std::vector<std::uint8_t> flags(n * k);
         for (auto& f : flags) f = r.bernoulli(0.5);
         return OpInstance{{random_tensor(r, {n, k, d}), random_tensor(r, {d})}, [flags](Args a) {
                             return select_rows(a[0], a[1], std::span<const std::uint8_t>(flags));
                           }};
       }},
      {"mask_fill", OpKind::mask_fill,
       [](Rng& r) {
         const auto m = extent(r, 1, 3), n = extent(r, 2, 4);
         std::vector<std::uint8_t> keep(m * n);
         for (auto& k : keep) k = r.bernoulli(0.7);
         return OpInstance{{random_tensor(r, {m, n})}, [keep](Args a) {
                             return mask_fill(a[0], std::span<const std::uint8_t>(keep), -3.0);
                           }};
       }},
      {"reshape", OpKind::reshape,
       [](Rng& r) {
         const auto m = extent(r, 1, 3), n = extent(r, 1, 4);
         return OpInstance{{random_tensor(r, {m, n})}, [m, n](Args a) { return reshape(a[0], {n * m}); }};
       }},
      {"permute", OpKind::permute,
       [](Rng& r) {
         const auto a0 = extent(r, 1, 3), a1 = extent(r, 1, 3), a2 = extent(r, 1, 3), a3 = extent(r, 1, 3);
         std::vector<std::size_t> axes{0, 1, 2, 3};
         for (std::size_t i = 3; i > 0; --i) std::swap(axes[i], axes[r.below(i + 1)]);
         return OpInstance{{random_tensor(r, {a0, a1, a2, a3})}, [axes](Args a) { return permute(a[0], axes); }};
       }},
      {"concat", OpKind::concat,
       [](Rng& r) {
         const auto m = extent(r, 1, 3), n1 = extent(r, 1, 3), n2 = extent(r, 1, 3), d = extent(r, 1, 3);
         return OpInstance{{random_tensor(r, {m, n1, d}), random_tensor(r, {m, n2, d})},
                           [](Args a) { return concat(a[0], a[1], 1); }};
       }},
      {"slice", OpKind::slice,
       [](Rng& r) {
         const auto m = extent(r, 1, 3), n = extent(r, 2, 5), d = extent(r, 1, 3);
         const auto b = r.below(n - 1);
         const auto e = b + 1 + r.below(n - b - 1 + 1);
         return OpInstance{{random_tensor(r, {m, n, d})},
                           [b, e](Args a) { return slice(a[0], 1, b, std::max(e, b + 1)); }};
       }},
      {"expand", OpKind::expand,
       [](Rng& r) {
         const auto n = extent(r, 1, 4);
         return OpInstance{{random_tensor(r, {extent(r, 1, 4)})}, [n](Args a) { return expand(a[0], n); }};
       }},
      {"sum", OpKind::sum,
       [](Rng& r) {
         return OpInstance{{random_tensor(r, {extent(r, 1, 3), extent(r, 1, 4)})}, [](Args a) { return sum(a[0]); }};
       }},
      {"mean", OpKind::mean,
       [](Rng& r) {
         return OpInstance{{random_tensor(r, {extent(r, 1, 3), extent(r, 1, 4)})}, [](Args a) { return mean(a[0]); }};
       }},
      {"mean_axis", OpKind::mean_axis,
       [](Rng& r) {
         const auto axis = r.below(3);
         return OpInstance{{random_tensor(r, {extent(r, 1, 3), extent(r, 1, 3), extent(r, 1, 3)})},
                           [axis](Args a) { return mean_axis(a[0], axis); }};
       }},
      {"cross_entropy", OpKind::cross_entropy,
       [](Rng& r) {
         const auto m = extent(r, 1, 4), c = extent(r, 2, 5);
         std::vector<std::size_t> labels(m);
         for (auto& l : labels) l = r.below(c);
         return OpInstance{{random_tensor(r, {m, c}, -2.0, 2.0)}, [labels](Args a) {
                             return cross_entropy(a[0], std::span<const std::size_t>(labels));
                           }};
       }},
  };
  return ops;
}

/// Grad-checks every input of one random instance; the scalar objective is
/// sum(op(inputs) * W) for a fixed random W so no output direction is trivial.
inline GradCheckResult check_op_instance(const RegisteredOp& op, Rng& rng, double h = 1e-5) {
  OpInstance inst = op.make(rng);
  Tensor<double> probe_out;
  {
    NoTapeScope<double> none;
    probe_out = inst.apply(inst.inputs);
  }
  const Tensor<double> weights = detail::random_tensor(rng, probe_out.shape(), 0.5, 1.5);
  GradCheckResult worst;
  for (std::size_t i = 0; i < inst.inputs.size(); ++i) {
    auto f = [&](const Tensor<double>& x) {
      std::vector<Tensor<double>> args = inst.inputs;
      args[i] = x;
      return sum(mul(inst.apply(args), weights));
    };
    auto r = grad_check_detailed(f, inst.inputs[i], h);
    if (r.max_rel_error >= worst.max_rel_error) worst = r;
  }
  return worst;
}

}  // namespace conmim::nd
