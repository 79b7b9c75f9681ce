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
#include <stdexcept>
#include <string>

#include "conmim/numerics/ops.hpp"
#include "conmim/numerics/tape.hpp"
#include "conmim/numerics/tensor.hpp"

namespace conmim::nd {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;   // at worst_index
};

/// Compares the tape gradient of a scalar function with central differences.
/// Per-coordinate error is |a - n| / (|a| + |n| + 1e-12).
template <class F>
GradCheckResult grad_check_detailed(F&& f, const Tensor<double>& point, double h = 1e-5) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> x = tape.watch(point.clone(), "point");
    Tensor<double> y = f(x);
    if (!tape.owns(y)) {
      analytic = Tensor<double>(point.shape());
    } else {
      tape.backward(y);
      analytic = tape.grad(x);
    }
  }

  NoTapeScope<double> no_tape;
  auto eval = [&](const Tensor<double>& x, std::size_t i) {
    const double v = f(x).item();
    if (!std::isfinite(v))
      throw NonFiniteError("grad_check: non-finite evaluation at coordinate " + std::to_string(i));
    return v;
  };

  GradCheckResult result;
  Tensor<double> probe = point.clone();
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x0 = point[i];
    probe.mutable_data()[i] = x0 + h;
    const double up = eval(probe, i);
    probe.mutable_data()[i] = x0 - h;
    const double down = eval(probe, i);
    probe.mutable_data()[i] = x0;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
    if (err > result.max_rel_error || i == 0) {
      result = {err, i, a, numeric};
    }
  }
  return result;
}

template <class F>
double grad_check(F&& f, const Tensor<double>& point, double h = 1e-5) {
  return grad_check_detailed(std::forward<F>(f), point, h).max_rel_error;
}

}  // namespace conmim::nd
