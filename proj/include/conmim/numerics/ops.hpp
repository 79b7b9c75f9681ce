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

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "conmim/numerics/tape.hpp"
#include "conmim/numerics/tensor.hpp"

namespace conmim::nd {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <class T>
struct Capture {
  Tape<T>* tape = nullptr;
  std::vector<std::int64_t> inputs;

  explicit operator bool() const noexcept { return tape != nullptr; }

  void finish(Tensor<T>& out, OpKind kind, typename Tape<T>::Backward fn) {
    const auto id = tape->record(kind, std::move(inputs), out.shape(), std::move(fn));
    out.set_tape_ref({tape->serial(), id});
  }
};

template <class T>
void check_finite(OpKind kind, std::initializer_list<const Tensor<T>*> inputs) {
  if (!strict_mode()) return;
  std::size_t arg = 0;
  for (const auto* t : inputs) {
    const auto v = t->values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i])) {
        throw NonFiniteError(std::string(op_name(kind)) + ": non-finite value in input " +
                             std::to_string(arg) + " at flat index " + std::to_string(i));
      }
    }
    ++arg;
  }
}

/// Returns a live capture when recording is on and some input is on the
/// active tape; inputs from elsewhere are treated as constants.
template <class T>
Capture<T> capture(OpKind kind, std::initializer_list<const Tensor<T>*> inputs) {
  check_finite<T>(kind, inputs);
  Capture<T> c;
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return c;
  bool any = false;
  c.inputs.reserve(inputs.size());
  for (const auto* t : inputs) {
    if (tape->owns(*t)) {
      c.inputs.push_back(t->tape_ref().node);
      any = true;
    } else {
      c.inputs.push_back(-1);
    }
  }
  if (any) {
    c.tape = tape;
  } else {
    c.inputs.clear();
  }
  return c;
}

inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline std::size_t last_extent(const Shape& s) { return s.empty() ? 1 : s.back(); }

inline std::size_t check_axis(OpKind kind, const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError(std::string(op_name(kind)) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  return axis;
}

template <class T>
Buffer<T> to_vec(std::span<const T> s) {
  return {s.begin(), s.end()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., k] x b[k, n] -> [..., n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || b.rank() != 2 || detail::last_extent(a.shape()) != b.dim(0))
    throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<T> out = Tensor<T>::uninitialized(out_shape);
  detail::MatMap<T>(out.mutable_data(), m, n).noalias() =
      detail::CMatMap<T>(a.data(), m, k) * detail::CMatMap<T>(b.data(), k, n);
  if (auto c = detail::capture<T>(OpKind::matmul, {&a, &b})) {
    c.finish(out, OpKind::matmul, [a, b, m, k, n](std::span<const T> g, GradSink<T>& sink) {
      detail::CMatMap<T> G(g.data(), m, n);
      if (sink.needs(0)) {
        Buffer<T> ga(m * k);
        detail::MatMap<T>(ga.data(), m, k).noalias() = G * detail::CMatMap<T>(b.data(), k, n).transpose();
        sink.add(0, std::move(ga));
      }
      if (sink.needs(1)) {
        Buffer<T> gb(k * n);
        detail::MatMap<T>(gb.data(), k, n).noalias() = detail::CMatMap<T>(a.data(), m, k).transpose() * G;
        sink.add(1, std::move(gb));
      }
    });
  }
  return out;
}

/// Fused x[..., in] W[in, out] + b[out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || bias.rank() != 1 || detail::last_extent(x.shape()) != weight.dim(0) ||
      bias.dim(0) != weight.dim(1))
    throw ShapeError("linear", x.shape(), weight.shape());
  const std::size_t k = weight.dim(0), n = weight.dim(1), m = x.size() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T> out = Tensor<T>::uninitialized(out_shape);
  {
    detail::MatMap<T> C(out.mutable_data(), m, n);
    C.noalias() = detail::CMatMap<T>(x.data(), m, k) * detail::CMatMap<T>(weight.data(), k, n);
    C.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data(), n);
  }
  if (auto c = detail::capture<T>(OpKind::linear, {&x, &weight, &bias})) {
    c.finish(out, OpKind::linear, [x, weight, m, k, n](std::span<const T> g, GradSink<T>& sink) {
      detail::CMatMap<T> G(g.data(), m, n);
      if (sink.needs(0)) {
        Buffer<T> gx(m * k);
        detail::MatMap<T>(gx.data(), m, k).noalias() = G * detail::CMatMap<T>(weight.data(), k, n).transpose();
        sink.add(0, std::move(gx));
      }
      if (sink.needs(1)) {
        Buffer<T> gw(k * n);
        detail::MatMap<T>(gw.data(), k, n).noalias() = detail::CMatMap<T>(x.data(), m, k).transpose() * G;
        sink.add(1, std::move(gw));
      }
      if (sink.needs(2)) {
        // Plain loop: the summation order must not depend on buffer alignment.
        Buffer<T> gb(n, T(0));
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        sink.add(2, std::move(gb));
      }
    });
  }
  return out;
}

/// Batched product: a[B, m, k] x b[B, k, n], or x b[B, n, k]^T when transpose_b.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1)))
    throw ShapeError("bmm", a.shape(), b.shape());
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  Tensor<T> out = Tensor<T>::uninitialized({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    detail::CMatMap<T> A(a.data() + i * m * k, m, k);
    detail::MatMap<T> C(out.mutable_data() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * detail::CMatMap<T>(b.data() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * detail::CMatMap<T>(b.data() + i * k * n, k, n);
    }
  }
  if (auto c = detail::capture<T>(OpKind::bmm, {&a, &b})) {
    c.finish(out, OpKind::bmm, [a, b, batch, m, k, n, transpose_b](std::span<const T> g, GradSink<T>& sink) {
      Buffer<T> ga, gb;
      if (sink.needs(0)) ga.resize(batch * m * k);
      if (sink.needs(1)) gb.resize(batch * k * n);
      for (std::size_t i = 0; i < batch; ++i) {
        detail::CMatMap<T> G(g.data() + i * m * n, m, n);
        detail::CMatMap<T> A(a.data() + i * m * k, m, k);
        if (transpose_b) {
          detail::CMatMap<T> B(b.data() + i * n * k, n, k);
          if (!ga.empty()) detail::MatMap<T>(ga.data() + i * m * k, m, k).noalias() = G * B;
          if (!gb.empty()) detail::MatMap<T>(gb.data() + i * n * k, n, k).noalias() = G.transpose() * A;
        } else {
          detail::CMatMap<T> B(b.data() + i * k * n, k, n);
          if (!ga.empty()) detail::MatMap<T>(ga.data() + i * m * k, m, k).noalias() = G * B.transpose();
          if (!gb.empty()) detail::MatMap<T>(gb.data() + i * k * n, k, n).noalias() = A.transpose() * G;
        }
      }
      if (!ga.empty()) sink.add(0, std::move(ga));
      if (!gb.empty()) sink.add(1, std::move(gb));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise with suffix broadcasting: b's shape must be a suffix of a's.

namespace detail {

template <class T>
Buffer<T> reduce_leading(std::span<const T> g, std::size_t inner) {
  Buffer<T> r(inner, T(0));
  for (std::size_t o = 0; o < g.size(); o += inner)
    for (std::size_t i = 0; i < inner; ++i) r[i] += g[o + i];
  return r;
}

template <class T>
Tensor<T> add_sub(const Tensor<T>& a, const Tensor<T>& b, bool subtract) {
  const OpKind kind = subtract ? OpKind::sub : OpKind::add;
  if (!is_suffix(a.shape(), b.shape())) throw ShapeError(op_name(kind), a.shape(), b.shape());
  const std::size_t inner = b.size();
  Tensor<T> out = Tensor<T>::uninitialized(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.mutable_data();
  const T sign = subtract ? T(-1) : T(1);
  for (std::size_t o = 0; o < a.size(); o += inner)
    for (std::size_t i = 0; i < inner; ++i) po[o + i] = pa[o + i] + sign * pb[i];
  if (auto c = capture<T>(kind, {&a, &b})) {
    const bool broadcast = inner != a.size();
    c.finish(out, kind, [inner, broadcast, sign](std::span<const T> g, GradSink<T>& sink) {
      if (sink.needs(0)) sink.add(0, to_vec(g));
      if (sink.needs(1)) {
        Buffer<T> gb = broadcast ? reduce_leading(g, inner) : to_vec(g);
        if (sign < 0)
          for (auto& v : gb) v = -v;
        sink.add(1, std::move(gb));
      }
    });
  }
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::add_sub(a, b, false);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::add_sub(a, b, true);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) throw ShapeError("mul", a.shape(), b.shape());
  const std::size_t inner = b.size();
  Tensor<T> out = Tensor<T>::uninitialized(a.shape());
  for (std::size_t o = 0; o < a.size(); o += inner)
    for (std::size_t i = 0; i < inner; ++i) out.mutable_data()[o + i] = a[o + i] * b[i];
  if (auto c = detail::capture<T>(OpKind::mul, {&a, &b})) {
    c.finish(out, OpKind::mul, [a, b, inner](std::span<const T> g, GradSink<T>& sink) {
      if (sink.needs(0)) {
        Buffer<T> ga(g.size());
        for (std::size_t o = 0; o < g.size(); o += inner)
          for (std::size_t i = 0; i < inner; ++i) ga[o + i] = g[o + i] * b[i];
        sink.add(0, std::move(ga));
      }
      if (sink.needs(1)) {
        Buffer<T> gb(inner, T(0));
        for (std::size_t o = 0; o < g.size(); o += inner)
          for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o + i] * a[o + i];
        sink.add(1, std::move(gb));
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.mutable_data()[i] = x[i] * factor;
  if (auto c = detail::capture<T>(OpKind::scale, {&x})) {
    c.finish(out, OpKind::scale, [factor](std::span<const T> g, GradSink<T>& sink) {
      Buffer<T> gx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * factor;
      sink.add(0, std::move(gx));
    });
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T v) {
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.mutable_data()[i] = x[i] + v;
  if (auto c = detail::capture<T>(OpKind::add_scalar, {&x})) {
    c.finish(out, OpKind::add_scalar,
             [](std::span<const T> g, GradSink<T>& sink) { sink.add(0, detail::to_vec(g)); });
  }
  return out;
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  const auto n = static_cast<Eigen::Index>(x.size());
  detail::ArrMap<T>(out.mutable_data(), n) = detail::CArrMap<T>(x.data(), n).exp();
  if (auto c = detail::capture<T>(OpKind::exp, {&x})) {
    c.finish(out, OpKind::exp, [y = out.detached()](std::span<const T> g, GradSink<T>& sink) {
      Buffer<T> gx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i];
      sink.add(0, std::move(gx));
    });
  }
  return out;
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.mutable_data()[i] = std::log(x[i]);
  if (auto c = detail::capture<T>(OpKind::log, {&x})) {
    c.finish(out, OpKind::log, [x](std::span<const T> g, GradSink<T>& sink) {
      Buffer<T> gx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] / x[i];
      sink.add(0, std::move(gx));
    });
  }
  return out;
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const auto n = static_cast<Eigen::Index>(x.size());
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  {
    detail::CArrMap<T> v(x.data(), n);
    detail::ArrMap<T>(out.mutable_data(), n) = T(0.5) * v * (T(1) + (v * inv_sqrt2).erf());
  }
  if (auto c = detail::capture<T>(OpKind::gelu, {&x})) {
    c.finish(out, OpKind::gelu, [x, n](std::span<const T> g, GradSink<T>& sink) {
      constexpr T inv_sqrt2pi = T(0.5) * std::numbers::inv_sqrtpi_v<T> * std::numbers::sqrt2_v<T>;
      constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
      Buffer<T> gx(g.size());
      detail::CArrMap<T> v(x.data(), n);
      detail::ArrMap<T>(gx.data(), n) =
          detail::CArrMap<T>(g.data(), n) *
          (T(0.5) * (T(1) + (v * inv_sqrt2).erf()) + v * inv_sqrt2pi * (T(-0.5) * v * v).exp());
      sink.add(0, std::move(gx));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise ops over the last axis

/// Max-subtracted softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax: rank-0 input");
  const std::size_t cols = x.shape().back(), rows = x.size() / cols;
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* y = out.mutable_data() + r * cols;
    const auto c = static_cast<Eigen::Index>(cols);
    const T mx = detail::CArrMap<T>(in, c).maxCoeff();
    detail::ArrMap<T> row(y, c);
    row = (detail::CArrMap<T>(in, c) - mx).exp();
    row *= T(1) / row.sum();
  }
  if (auto c = detail::capture<T>(OpKind::softmax, {&x})) {
    c.finish(out, OpKind::softmax, [y = out.detached(), rows, cols](std::span<const T> g, GradSink<T>& sink) {
      Buffer<T> gx(g.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * cols;
        T dot = 0;
        for (std::size_t j = 0; j < cols; ++j) dot += g[o + j] * y[o + j];
        for (std::size_t j = 0; j < cols; ++j) gx[o + j] = y[o + j] * (g[o + j] - dot);
      }
      sink.add(0, std::move(gx));
    });
  }
  return out;
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax: rank-0 input");
  const std::size_t cols = x.shape().back(), rows = x.size() / cols;
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* y = out.mutable_data() + r * cols;
    const auto c = static_cast<Eigen::Index>(cols);
    const T mx = detail::CArrMap<T>(in, c).maxCoeff();
    const T lse = mx + std::log((detail::CArrMap<T>(in, c) - mx).exp().sum());
    for (std::size_t j = 0; j < cols; ++j) y[j] = in[j] - lse;
  }
  if (auto c = detail::capture<T>(OpKind::log_softmax, {&x})) {
    c.finish(out, OpKind::log_softmax, [y = out.detached(), rows, cols](std::span<const T> g, GradSink<T>& sink) {
      Buffer<T> gx(g.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * cols;
        T total = 0;
        for (std::size_t j = 0; j < cols; ++j) total += g[o + j];
        const auto c = static_cast<Eigen::Index>(cols);
        detail::ArrMap<T>(gx.data() + o, c) =
            detail::CArrMap<T>(g.data() + o, c) - detail::CArrMap<T>(y.data() + o, c).exp() * total;
      }
      sink.add(0, std::move(gx));
    });
  }
  return out;
}

/// x / max(||x||, eps) along the last axis.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12)) {
  if (x.rank() == 0) throw ShapeError("l2_normalize: rank-0 input");
  const std::size_t cols = x.shape().back(), rows = x.size() / cols;
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  Buffer<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T ss = 0;
    for (std::size_t j = 0; j < cols; ++j) ss += in[j] * in[j];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < cols; ++j) out.mutable_data()[r * cols + j] = in[j] / norms[r];
  }
  if (auto c = detail::capture<T>(OpKind::l2_normalize, {&x})) {
    c.finish(out, OpKind::l2_normalize,
             [y = out.detached(), norms = std::move(norms), rows, cols, eps](std::span<const T> g,
                                                                             GradSink<T>& sink) {
               Buffer<T> gx(g.size());
               for (std::size_t r = 0; r < rows; ++r) {
                 const std::size_t o = r * cols;
                 if (norms[r] <= eps) {
                   // clamped branch: y = x / eps is linear in x
                   for (std::size_t j = 0; j < cols; ++j) gx[o + j] = g[o + j] / eps;
                   continue;
                 }
                 T dot = 0;
                 for (std::size_t j = 0; j < cols; ++j) dot += g[o + j] * y[o + j];
                 for (std::size_t j = 0; j < cols; ++j) gx[o + j] = (g[o + j] - y[o + j] * dot) / norms[r];
               }
               sink.add(0, std::move(gx));
             });
  }
  return out;
}

/// Layer normalization over the last axis with affine gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-6)) {
  if (x.rank() == 0 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != x.shape().back() ||
      bias.dim(0) != x.shape().back())
    throw ShapeError("layer_norm", x.shape(), gain.shape());
  const std::size_t cols = x.shape().back(), rows = x.size() / cols;
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  Buffer<T> xhat(x.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T mean = 0;
    for (std::size_t j = 0; j < cols; ++j) mean += in[j];
    mean /= T(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      const T h = (in[j] - mean) * rstd[r];
      xhat[r * cols + j] = h;
      out.mutable_data()[r * cols + j] = h * gain[j] + bias[j];
    }
  }
  if (auto c = detail::capture<T>(OpKind::layer_norm, {&x, &gain, &bias})) {
    c.finish(out, OpKind::layer_norm,
             [gain, xhat = std::move(xhat), rstd = std::move(rstd), rows, cols](std::span<const T> g,
                                                                                 GradSink<T>& sink) {
               if (sink.needs(0)) {
                 Buffer<T> gx(g.size());
                 for (std::size_t r = 0; r < rows; ++r) {
                   const std::size_t o = r * cols;
                   T m1 = 0, m2 = 0;
                   for (std::size_t j = 0; j < cols; ++j) {
                     const T d = g[o + j] * gain[j];
                     m1 += d;
                     m2 += d * xhat[o + j];
                   }
                   m1 /= T(cols);
                   m2 /= T(cols);
                   for (std::size_t j = 0; j < cols; ++j)
                     gx[o + j] = rstd[r] * (g[o + j] * gain[j] - m1 - xhat[o + j] * m2);
                 }
                 sink.add(0, std::move(gx));
               }
               if (sink.needs(1) || sink.needs(2)) {
                 Buffer<T> gg(cols, T(0)), gb(cols, T(0));
                 for (std::size_t r = 0; r < rows; ++r)
                   for (std::size_t j = 0; j < cols; ++j) {
                     gg[j] += g[r * cols + j] * xhat[r * cols + j];
                     gb[j] += g[r * cols + j];
                   }
                 sink.add(1, std::move(gg));
                 sink.add(2, std::move(gb));
               }
             });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Indexing. "Rows" are the flattened leading axes; a row is the last axis.

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  if (x.rank() < 2 || index.empty()) throw ShapeError("gather_rows: need rank >= 2 and a nonempty index");
  const std::size_t cols = x.shape().back(), rows = x.size() / cols;
  for (auto r : index)
    if (r >= rows) throw std::out_of_range("gather_rows: row " + std::to_string(r) + " >= " + std::to_string(rows));
  Tensor<T> out = Tensor<T>::uninitialized({index.size(), cols});
  for (std::size_t i = 0; i < index.size(); ++i)
    std::copy_n(x.data() + index[i] * cols, cols, out.mutable_data() + i * cols);
  if (auto c = detail::capture<T>(OpKind::gather_rows, {&x})) {
    c.finish(out, OpKind::gather_rows,
             [idx = std::vector<std::size_t>(index.begin(), index.end()), rows, cols](std::span<const T> g,
                                                                                      GradSink<T>& sink) {
               Buffer<T> gx(rows * cols, T(0));
               for (std::size_t i = 0; i < idx.size(); ++i)
                 for (std::size_t j = 0; j < cols; ++j) gx[idx[i] * cols + j] += g[i * cols + j];
               sink.add(0, std::move(gx));
             });
  }
  return out;
}

/// Inverse of gather_rows: places row i of x at row index[i] of a zero
/// [rows, cols] result, summing duplicates.
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& x, std::span<const std::size_t> index, std::size_t rows) {
  if (x.rank() != 2 || x.dim(0) != index.size())
    throw ShapeError("scatter_rows: x must be [len(index), cols], got " + shape_str(x.shape()));
  const std::size_t cols = x.dim(1);
  Tensor<T> out({rows, cols});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw std::out_of_range("scatter_rows: row index out of range");
    for (std::size_t j = 0; j < cols; ++j) out.mutable_data()[index[i] * cols + j] += x[i * cols + j];
  }
  if (auto c = detail::capture<T>(OpKind::scatter_rows, {&x})) {
    c.finish(out, OpKind::scatter_rows,
             [idx = std::vector<std::size_t>(index.begin(), index.end()), cols](std::span<const T> g,
                                                                                GradSink<T>& sink) {
               Buffer<T> gx(idx.size() * cols);
               for (std::size_t i = 0; i < idx.size(); ++i)
                 std::copy_n(g.data() + idx[i] * cols, cols, gx.data() + i * cols);
               sink.add(0, std::move(gx));
             });
  }
  return out;
}

/// Row r of the result is `token` where flags[r] is set, else row r of x.
template <class T>
Tensor<T> select_rows(const Tensor<T>& x, const Tensor<T>& token, std::span<const std::uint8_t> flags) {
  if (x.rank() < 2 || token.rank() != 1 || token.dim(0) != x.shape().back())
    throw ShapeError("select_rows", x.shape(), token.shape());
  const std::size_t cols = x.shape().back(), rows = x.size() / cols;
  if (flags.size() != rows)
    throw ShapeError("select_rows: " + std::to_string(flags.size()) + " flags for " + std::to_string(rows) + " rows");
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(flags[r] ? token.data() : x.data() + r * cols, cols, out.mutable_data() + r * cols);
  if (auto c = detail::capture<T>(OpKind::select_rows, {&x, &token})) {
    c.finish(out, OpKind::select_rows,
             [f = std::vector<std::uint8_t>(flags.begin(), flags.end()), rows, cols](std::span<const T> g,
                                                                                     GradSink<T>& sink) {
               if (sink.needs(0)) {
                 Buffer<T> gx(g.begin(), g.end());
                 for (std::size_t r = 0; r < rows; ++r)
                   if (f[r]) std::fill_n(gx.data() + r * cols, cols, T(0));
                 sink.add(0, std::move(gx));
               }
               if (sink.needs(1)) {
                 Buffer<T> gt(cols, T(0));
                 for (std::size_t r = 0; r < rows; ++r)
                   if (f[r])
                     for (std::size_t j = 0; j < cols; ++j) gt[j] += g[r * cols + j];
                 sink.add(1, std::move(gt));
               }
             });
  }
  return out;
}

/// Elements with keep[i] == 0 are replaced by `fill` and receive no gradient.
template <class T>
Tensor<T> mask_fill(const Tensor<T>& x, std::span<const std::uint8_t> keep, T fill) {
  if (keep.size() != x.size()) throw ShapeError("mask_fill: keep mask size differs from tensor size");
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.mutable_data()[i] = keep[i] ? x[i] : fill;
  if (auto c = detail::capture<T>(OpKind::mask_fill, {&x})) {
    c.finish(out, OpKind::mask_fill,
             [k = std::vector<std::uint8_t>(keep.begin(), keep.end())](std::span<const T> g, GradSink<T>& sink) {
               Buffer<T> gx(g.size());
               for (std::size_t i = 0; i < g.size(); ++i) gx[i] = k[i] ? g[i] : T(0);
               sink.add(0, std::move(gx));
             });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) throw ShapeError("reshape", x.shape(), shape);
  Tensor<T> out = x.view_as(std::move(shape));
  if (auto c = detail::capture<T>(OpKind::reshape, {&x})) {
    c.finish(out, OpKind::reshape,
             [](std::span<const T> g, GradSink<T>& sink) { sink.add(0, detail::to_vec(g)); });
  }
  return out;
}

namespace detail {

/// out[i_0..i_{n-1}] = in[j] with in-axis axes[d] mapped to out-axis d.
template <class T>
void permute_copy(const T* in, const Shape& in_shape, std::span<const std::size_t> axes, T* out) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank - 1; d-- > 0;) in_stride[d] = in_stride[d + 1] * in_shape[d + 1];
  std::vector<std::size_t> out_shape(rank), stride(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = in_shape[axes[d]];
    stride[d] = in_stride[axes[d]];
  }
  const std::size_t total = shape_numel(in_shape);
  const std::size_t inner = out_shape[rank - 1], inner_stride = stride[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[o + j] = in[src + j * inner_stride];
    for (std::size_t d = rank - 1; d-- > 0;) {
      src += stride[d];
      if (++idx[d] < out_shape[d]) break;
      src -= stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> axes) {
  const std::size_t rank = x.rank();
  std::vector<std::size_t> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  bool valid = axes.size() == rank && rank > 0;
  for (std::size_t d = 0; valid && d < rank; ++d) valid = sorted[d] == d;
  if (!valid) throw ShapeError("permute: axes are not a permutation of the rank of " + shape_str(x.shape()));
  Shape out_shape(rank);
  for (std::size_t d = 0; d < rank; ++d) out_shape[d] = x.dim(axes[d]);
  Tensor<T> out = Tensor<T>::uninitialized(out_shape);
  detail::permute_copy(x.data(), x.shape(), axes, out.mutable_data());
  if (auto c = detail::capture<T>(OpKind::permute, {&x})) {
    std::vector<std::size_t> inverse(rank);
    for (std::size_t d = 0; d < rank; ++d) inverse[axes[d]] = d;
    c.finish(out, OpKind::permute,
             [inverse = std::move(inverse), out_shape](std::span<const T> g, GradSink<T>& sink) {
               Buffer<T> gx(g.size());
               detail::permute_copy(g.data(), out_shape, inverse, gx.data());
               sink.add(0, std::move(gx));
             });
  }
  return out;
}

template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  detail::check_axis(OpKind::concat, a.shape(), axis);
  bool ok = a.rank() == b.rank();
  for (std::size_t d = 0; ok && d < a.rank(); ++d) ok = d == axis || a.dim(d) == b.dim(d);
  if (!ok) throw ShapeError("concat", a.shape(), b.shape());
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t ca = a.dim(axis) * inner, cb = b.dim(axis) * inner;
  Shape out_shape = a.shape();
  out_shape[axis] += b.dim(axis);
  Tensor<T> out = Tensor<T>::uninitialized(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data() + o * ca, ca, out.mutable_data() + o * (ca + cb));
    std::copy_n(b.data() + o * cb, cb, out.mutable_data() + o * (ca + cb) + ca);
  }
  if (auto c = detail::capture<T>(OpKind::concat, {&a, &b})) {
    c.finish(out, OpKind::concat, [outer, ca, cb](std::span<const T> g, GradSink<T>& sink) {
      Buffer<T> ga(outer * ca), gb(outer * cb);
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(g.data() + o * (ca + cb), ca, ga.data() + o * ca);
        std::copy_n(g.data() + o * (ca + cb) + ca, cb, gb.data() + o * cb);
      }
      sink.add(0, std::move(ga));
      sink.add(1, std::move(gb));
    });
  }
  return out;
}

/// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::check_axis(OpKind::slice, x.shape(), axis);
  if (begin >= end || end > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for axis of extent " + std::to_string(x.dim(axis)));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t full = x.dim(axis) * inner, part = (end - begin) * inner, offset = begin * inner;
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  Tensor<T> out = Tensor<T>::uninitialized(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + o * full + offset, part, out.mutable_data() + o * part);
  if (auto c = detail::capture<T>(OpKind::slice, {&x})) {
    c.finish(out, OpKind::slice, [outer, full, part, offset](std::span<const T> g, GradSink<T>& sink) {
      Buffer<T> gx(outer * full, T(0));
      for (std::size_t o = 0; o < outer; ++o) std::copy_n(g.data() + o * part, part, gx.data() + o * full + offset);
      sink.add(0, std::move(gx));
    });
  }
  return out;
}

/// Prepends a leading axis of extent n, repeating x.
template <class T>
Tensor<T> expand(const Tensor<T>& x, std::size_t n) {
  if (n == 0) throw ShapeError("expand: zero copies");
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin(), n);
  Tensor<T> out = Tensor<T>::uninitialized(out_shape);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data(), x.size(), out.mutable_data() + i * x.size());
  if (auto c = detail::capture<T>(OpKind::expand, {&x})) {
    c.finish(out, OpKind::expand, [inner = x.size()](std::span<const T> g, GradSink<T>& sink) {
      sink.add(0, detail::reduce_leading(g, inner));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (auto c = detail::capture<T>(OpKind::sum, {&x})) {
    c.finish(out, OpKind::sum,
             [n = x.size()](std::span<const T> g, GradSink<T>& sink) { sink.add(0, Buffer<T>(n, g[0])); });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s / T(x.size()));
  if (auto c = detail::capture<T>(OpKind::mean, {&x})) {
    c.finish(out, OpKind::mean, [n = x.size()](std::span<const T> g, GradSink<T>& sink) {
      sink.add(0, Buffer<T>(n, g[0] / T(n)));
    });
  }
  return out;
}

/// Mean over one axis; the axis is removed from the result.
template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  detail::check_axis(OpKind::mean_axis, x.shape(), axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t len = x.dim(axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(out_shape);
  const T inv = T(1) / T(len);
  for (std::size_t o = 0; o < outer; ++o) {
    T* dst = out.mutable_data() + o * inner;
    for (std::size_t l = 0; l < len; ++l) {
      const T* src = x.data() + (o * len + l) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
    for (std::size_t i = 0; i < inner; ++i) dst[i] *= inv;
  }
  if (auto c = detail::capture<T>(OpKind::mean_axis, {&x})) {
    c.finish(out, OpKind::mean_axis, [outer, inner, len, inv](std::span<const T> g, GradSink<T>& sink) {
      Buffer<T> gx(outer * len * inner);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t i = 0; i < inner; ++i) gx[(o * len + l) * inner + i] = g[o * inner + i] * inv;
      sink.add(0, std::move(gx));
    });
  }
  return out;
}

/// Mean softmax cross-entropy of logits [M, C] against integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  for (auto l : labels)
    if (l >= cols)
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(cols) + ")");
  Buffer<T> prob(rows * cols);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = logits.data() + r * cols;
    const auto c = static_cast<Eigen::Index>(cols);
    const T mx = detail::CArrMap<T>(in, c).maxCoeff();
    detail::ArrMap<T> row(prob.data() + r * cols, c);
    row = (detail::CArrMap<T>(in, c) - mx).exp();
    const T total = row.sum();
    row /= total;
    loss += mx + std::log(total) - in[labels[r]];
  }
  Tensor<T> out = Tensor<T>::scalar(loss / T(rows));
  if (auto c = detail::capture<T>(OpKind::cross_entropy, {&logits})) {
    c.finish(out, OpKind::cross_entropy,
             [prob = std::move(prob), lab = std::vector<std::size_t>(labels.begin(), labels.end()), rows,
              cols](std::span<const T> g, GradSink<T>& sink) {
               Buffer<T> gx(prob);
               const T s = g[0] / T(rows);
               for (std::size_t r = 0; r < rows; ++r) gx[r * cols + lab[r]] -= T(1);
               for (auto& v : gx) v *= s;
               sink.add(0, std::move(gx));
             });
  }
  return out;
}

/// Identity in value; a barrier in the backward sweep.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  Tensor<T> out = x.detached();
  if (auto c = detail::capture<T>(OpKind::stop_gradient, {&x})) c.finish(out, OpKind::stop_gradient, {});
  return out;
}

// ---------------------------------------------------------------------------
// Convenience compositions


}  // namespace conmim::nd
