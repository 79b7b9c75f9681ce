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

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "conmim/numerics/grad_check.hpp"
#include "conmim/numerics/op_registry.hpp"
#include "conmim/numerics/ops.hpp"

namespace {

using namespace conmim;
using nd::Tensor;

Tensor<double> random(Rng& rng, nd::Shape s) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.mutable_values()) v = rng.uniform(-2, 2);
  return t;
}

TEST(Tensor, ShapeAndPayloadAgree) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(nd::shape_numel(t.shape()), t.values().size());
  EXPECT_THROW(Tensor<float>({2, 0}), nd::ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), nd::ShapeError);
}

TEST(Tensor, CloneIsDeepDetachedIsShallow) {
  Tensor<float> a({3}, {1, 2, 3});
  Tensor<float> c = a.clone(), d = a.detached();
  a.mutable_data()[0] = 9;
  EXPECT_EQ(c[0], 1.f);
  EXPECT_EQ(d[0], 9.f);
}

TEST(Ops, SoftmaxOfUniformLogits) {
  const auto s = nd::softmax(Tensor<double>({4}, {0, 0, 0, 0}));
  for (double v : s.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Ops, L2NormalizeThreeFourFive) {
  const auto s = nd::l2_normalize(Tensor<double>({2}, {3, 4}));
  EXPECT_NEAR(s[0], 0.6, 1e-15);
  EXPECT_NEAR(s[1], 0.8, 1e-15);
}

TEST(Ops, IdentityMatmul) {
  Rng rng(3);
  const auto a = random(rng, {3, 5});
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.mutable_data()[i * 4] = 1;
  EXPECT_TRUE(nd::bit_equal(nd::matmul(eye, a), a));
}

TEST(Ops, ShapeErrorNamesOpAndShapes) {
  try {
    nd::matmul(Tensor<double>({2, 3}), Tensor<double>({4, 5}));
    FAIL();
  } catch (const nd::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,5]"), std::string::npos);
  }
}

TEST(Ops, StrictModeRejectsNonFinite) {
  Tensor<double> x({2}, {1, std::nan("")});
  EXPECT_NO_THROW(nd::exp(x));
  nd::StrictScope strict;
  EXPECT_THROW(nd::exp(x), nd::NonFiniteError);
}

TEST(Ops, SoftmaxRowsAreDistributions) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random(rng, {7, 11});
    for (auto& v : x.mutable_values()) v *= 30;  // large logits stress max-subtraction
    const auto s = nd::softmax(x);
    for (std::size_t r = 0; r < 7; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 11; ++c) {
        EXPECT_GE(s[r * 11 + c], 0.0);
        total += s[r * 11 + c];
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Ops, LayerNormNormalizesEachGroup) {
  Rng rng(6);
  const auto x = random(rng, {5, 16});
  const auto y = nd::layer_norm(x, Tensor<double>::full({16}, 1.0), Tensor<double>({16}));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
    v /= 16;
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Ops, CrossEntropyRejectsBadLabel) {
  const std::vector<std::size_t> labels = {3};
  EXPECT_THROW(nd::cross_entropy(Tensor<double>({1, 3}), labels), std::out_of_range);
}

TEST(Backward, ProductRule) {
  nd::Tape<double> tape;
  nd::TapeScope<double> scope(tape);
  const auto x = tape.watch(Tensor<double>::scalar(2));
  const auto y = tape.watch(Tensor<double>::scalar(3));
  tape.backward(nd::mul(x, y));
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 3.0);
  EXPECT_DOUBLE_EQ(tape.grad(y).item(), 2.0);
}

TEST(Backward, StopGradientIsABarrier) {
  nd::Tape<double> tape;
  nd::TapeScope<double> scope(tape);
  const auto x = tape.watch(Tensor<double>::scalar(2));
  const auto y = tape.watch(Tensor<double>::scalar(3));
  tape.backward(nd::mul(nd::stop_gradient(x), y));
  EXPECT_EQ(tape.grad(x).item(), 0.0);
  EXPECT_DOUBLE_EQ(tape.grad(y).item(), 2.0);
  EXPECT_EQ(tape.count(nd::OpKind::stop_gradient), 1u);
}

TEST(Backward, RootMustBeScalarOnTape) {
  nd::Tape<double> tape;
  nd::TapeScope<double> scope(tape);
  const auto x = tape.watch(Tensor<double>({3}, {1, 2, 3}));
  EXPECT_THROW(tape.backward(nd::exp(x)), nd::ShapeError);
  EXPECT_THROW(tape.backward(Tensor<double>::scalar(1)), std::invalid_argument);
}

TEST(Backward, OffTapeTensorsReceiveNoGradient) {
  nd::Tape<double> tape;
  nd::TapeScope<double> scope(tape);
  const auto x = tape.watch(Tensor<double>({2}, {1, 2}));
  const Tensor<double> c({2}, {5, 7});
  const auto y = nd::sum(nd::mul(x, c));
  EXPECT_FALSE(c.on_tape());
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 5.0);
  EXPECT_THROW(tape.grad(c), std::invalid_argument);
}

TEST(Backward, TopologicalOrder) {
  nd::Tape<double> tape;
  nd::TapeScope<double> scope(tape);
  Rng rng(9);
  const auto x = tape.watch(random(rng, {3, 4}));
  const auto y = nd::sum(nd::softmax(nd::matmul(x, nd::permute(x, {1, 0}))));
  const auto nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (auto in : nodes[i].inputs) EXPECT_LT(in, static_cast<std::int64_t>(i));
  tape.backward(y);
  EXPECT_EQ(tape.grad(x).shape(), x.shape());
}

TEST(Backward, SoftmaxCrossEntropyMatchesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 16; ++trial) {
    const std::size_t m = 1 + rng.below(4), c = 2 + rng.below(6);
    std::vector<std::size_t> labels(m);
    for (auto& l : labels) l = rng.below(c);
    const double err = nd::grad_check([&](const Tensor<double>& x) { return nd::cross_entropy(x, labels); },
                                      random(rng, {m, c}));
    EXPECT_LT(err, 1e-4) << "trial " << trial;
  }
}

TEST(GradCheck, SumOfSquares) {
  const auto r = nd::grad_check_detailed([](const Tensor<double>& x) { return nd::sum(nd::mul(x, x)); },
                                         Tensor<double>({2}, {1, 2}));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, LinearFunctionIsExact) {
  Rng rng(12);
  EXPECT_LT(nd::grad_check([](const Tensor<double>& x) { return nd::sum(x); }, random(rng, {6})), 1e-9);
}

TEST(GradCheck, NonFiniteEvaluationNamesCoordinate) {
  try {
    nd::grad_check([](const Tensor<double>& x) { return nd::sum(nd::log(x)); }, Tensor<double>({2}, {1.0, 1e-6}));
    FAIL();
  } catch (const nd::NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
}

class Registry : public ::testing::TestWithParam<std::size_t> {};

TEST_P(Registry, EightRandomInstancesPass) {
  const auto& op = nd::op_registry()[GetParam()];
  Rng rng = Rng::stream(2026, op.name);
  for (int i = 0; i < 8; ++i) {
    const auto r = nd::check_op_instance(op, rng);
    EXPECT_LT(r.max_rel_error, 1e-4) << op.name << " instance " << i << " coord " << r.worst_index << " analytic "
                                     << r.analytic << " numeric " << r.numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, Registry, ::testing::Range<std::size_t>(0, nd::op_registry().size()),
                         [](const auto& info) { return nd::op_registry()[info.param].name; });

TEST(Determinism, ReplayIsBitIdentical) {
  auto run = [] {
    Rng rng(77);
    const auto a = random(rng, {8, 16}), w = random(rng, {16, 16});
    return nd::softmax(nd::gelu(nd::matmul(a, w)));
  };
  EXPECT_TRUE(nd::bit_equal(run(), run()));
}

}  // namespace
