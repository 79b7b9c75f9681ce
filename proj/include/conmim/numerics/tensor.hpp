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
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace conmim::nd {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() noexcept {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::size_t shape_numel(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Thrown when an op receives operands whose shapes do not fit its signature.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view op, const Shape& a, const Shape& b)
      : std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b)) {}
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Thrown in strict mode when an op sees NaN or infinity.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Handle linking a tensor value to a node of a live tape.
struct TapeRef {
  std::uint64_t tape = 0;  // serial of the owning tape, 0 = none
  std::int64_t node = -1;

  explicit operator bool() const noexcept { return tape != 0 && node >= 0; }
};

/// All numeric buffers start on a 64-byte boundary. Vectorized reductions
/// peel a scalar prefix up to the first aligned element, so a varying base
/// address would change the summation order from run to run.
inline constexpr std::align_val_t kBufferAlign{64};

template <class T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(std::max<std::size_t>(n, 1) * sizeof(T), kBufferAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kBufferAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major n-d array. The payload is shared between copies so that a
/// parameter and its tape-bound view alias the same storage; use clone() for a
/// deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  /// Zero-filled tensor.
  explicit Tensor(Shape shape) : Tensor(uninitialized(std::move(shape))) {
    std::fill_n(data_.get(), size_, T(0));
  }

  Tensor(Shape shape, std::span<const T> values) : Tensor(uninitialized(std::move(shape))) {
    if (values.size() != size_) {
      throw ShapeError("tensor: payload of " + std::to_string(values.size()) + " values does not fill shape " +
                       shape_str(shape_));
    }
    std::copy(values.begin(), values.end(), data_.get());
  }

  Tensor(Shape shape, const std::vector<T>& values) : Tensor(std::move(shape), std::span<const T>(values)) {}
  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  /// Tensor whose payload is left uninitialized; the caller must overwrite it.
  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.check_extents();
    t.size_ = shape_numel(t.shape_);
    T* raw = AlignedAllocator<T>{}.allocate(t.size_);
    t.data_ = std::shared_ptr<T[]>(raw, [n = t.size_](T* p) { AlignedAllocator<T>{}.deallocate(p, n); });
    return t;
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor full(Shape shape, T v) {
    Tensor t = uninitialized(std::move(shape));
    std::fill_n(t.data_.get(), t.size_, v);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return size_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<const T> values() const noexcept { return {data_.get(), size_}; }

  /// Mutable access to the shared payload. Must not be used while a tape that
  /// saved this tensor is still going to run backward.
  std::span<T> mutable_values() noexcept { return {data_.get(), size_}; }

  const T* data() const noexcept { return data_.get(); }
  T* mutable_data() noexcept { return data_.get(); }

  T operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (size_ != 1) throw ShapeError("item: tensor is not a scalar, shape " + shape_str(shape_));
    return data_[0];
  }

  const TapeRef& tape_ref() const noexcept { return ref_; }
  bool on_tape() const noexcept { return static_cast<bool>(ref_); }

  /// Same storage, no tape participation.
  Tensor detached() const {
    Tensor t = *this;
    t.ref_ = {};
    return t;
  }

  /// Deep copy without tape participation.
  Tensor clone() const {
    Tensor t = uninitialized(shape_);
    std::copy_n(data_.get(), size_, t.data_.get());
    return t;
  }

  /// Shares storage with a new shape of equal element count (no tape link).
  Tensor view_as(Shape shape) const {
    if (shape_numel(shape) != size()) throw ShapeError("view_as", shape_, shape);
    Tensor t = *this;
    t.shape_ = std::move(shape);
    t.ref_ = {};
    return t;
  }

  bool same_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

  bool all_finite() const noexcept {
    for (T v : values())
      if (!std::isfinite(v)) return false;
    return true;
  }

  void set_tape_ref(TapeRef ref) noexcept { ref_ = ref; }

 private:
  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape_));
  }

  Shape shape_{0};
  std::size_t size_ = 0;
  std::shared_ptr<T[]> data_;
  TapeRef ref_;
};

/// Bitwise equality of shape and payload.
template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace conmim::nd
