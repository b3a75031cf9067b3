// Copyright (c) 2026 The CatSeg Authors. All Rights Reserved.
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

#include "support.hpp"

namespace catseg {
namespace {

using test::random;

TEST(Backward, Square) {
  ag::Tape<double> tape;
  auto x = tape.parameter("x", Tensor<double>::scalar(3), true);
  const auto g = tape.backward(ag::mul(x, x));
  EXPECT_EQ(g.at("x")[0], 6.0);
}

TEST(Backward, SumOfSoftmaxIsConstant) {
  Rng rng(1);
  ag::Tape<double> tape;
  auto x = tape.parameter("x", random(rng, {1, 5}, -3, 3), true);
  const auto g = tape.backward(ag::sum(ag::softmax(x)));
  for (double v : g.at("x").values()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Backward, LinearMap) {
  ag::Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 2}, {1, 2}));
  auto w = tape.parameter("w", Tensor<double>({2, 3}), true);
  const auto g = tape.backward(ag::sum(ag::matmul(x, w)));
  EXPECT_EQ(g.at("w"), Tensor<double>({2, 3}, {1, 1, 1, 2, 2, 2}));
}

TEST(Backward, FrozenParameterAbsent) {
  ag::Tape<double> tape;
  auto a = tape.parameter("a", Tensor<double>::scalar(2), true);
  auto b = tape.parameter("b", Tensor<double>::scalar(5), false);
  const auto g = tape.backward(ag::mul(a, b));
  EXPECT_EQ(g.count("a"), 1u);
  EXPECT_EQ(g.count("b"), 0u);
  EXPECT_EQ(g.at("a")[0], 5.0);
}

TEST(Backward, FanOutAccumulates) {
  ag::Tape<double> tape;
  auto x = tape.parameter("x", Tensor<double>::scalar(1.5), true);
  auto y = ag::add(ag::scale(x, 3.0), ag::mul(x, x));
  EXPECT_EQ(tape.backward(y).at("x")[0], 3.0 + 2 * 1.5);
}

TEST(Backward, NonScalarLossRejected) {
  ag::Tape<double> tape;
  auto x = tape.parameter("x", Tensor<double>({2}), true);
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Backward, Linearity) {
  Rng rng(2);
  const auto x0 = random(rng, {3, 4}), w0 = random(rng, {4, 2});
  auto grads = [&](double a) {
    ag::Tape<double> tape;
    auto x = tape.constant(x0);
    auto w = tape.parameter("w", w0, true);
    auto l = ag::sum(ag::gelu(ag::matmul(x, w)));
    return tape.backward(ag::scale(l, a)).at("w");
  };
  const auto g1 = grads(1.0), g3 = grads(-2.5);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g3[i], -2.5 * g1[i], 1e-12);
}

TEST(GradCheck, QuadraticIsExact) {
  Rng rng(3);
  const double err = ag::grad_check(
      [](ag::Tape<double>&, std::span<const ag::Var<double>> v) {
        return ag::sum(ag::mul(v[0], v[0]));
      },
      {random(rng, {3, 3})}, 1e-5);
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
  const double err = ag::grad_check(
      [](ag::Tape<double>& tape, std::span<const ag::Var<double>> v) {
        auto out = v[0].value();
        out[0] = out[0] * out[0] * out[0];
        return tape.record("cube", {v[0].id}, Tensor<double>::scalar(out[0]),
                           [](const Tensor<double>& g, std::span<Tensor<double>* const> gi) {
                             if (gi[0]) (*gi[0])[0] += g[0];
                           });
      },
      {Tensor<double>::scalar(2.0)});
  EXPECT_GT(err, 0.5);
}

TEST(Backward, MissingRuleIsInternalError) {
  ag::Tape<double> tape;
  auto x = tape.parameter("x", Tensor<double>::scalar(1), true);
  auto y = tape.record("opaque", {x.id}, Tensor<double>::scalar(1), {});
  EXPECT_THROW(tape.backward(y), InternalError);
}

class EveryOp : public ::testing::TestWithParam<std::string> {};

TEST_P(EveryOp, PassesGradCheck) {
  const auto r = check_op(GetParam(), 10);
  EXPECT_EQ(r.cases, 10u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
}

std::vector<std::string> op_names() {
  return {std::begin(ag::kDifferentiableOps), std::end(ag::kDifferentiableOps)};
}

INSTANTIATE_TEST_SUITE_P(Ops, EveryOp, ::testing::ValuesIn(op_names()),
                         [](const auto& info) { return info.param; });

TEST(GradCheck, Composites) {
  for (const auto& r : check_composites()) EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
}

}  // namespace
}  // namespace catseg
