#include <gtest/gtest.h>

#include "kdmt/autodiff.hpp"
#include "kdmt/error.hpp"
#include "support/oracles.hpp"

namespace kdmt {
namespace {

using ad::Tape;
using ad::Var;

class PrimitiveGradient : public ::testing::TestWithParam<oracle::GradCase> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferencesAcrossSeeds) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto r = oracle::run_grad_case(GetParam(), seed);
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllPrimitives, PrimitiveGradient,
    ::testing::ValuesIn(oracle::primitive_grad_cases()),
    [](const auto& info) { return info.param.name; });

TEST(Tape, BackwardRequiresScalarLoss) {
  Tape tape;
  Var x = tape.variable(Tensor({2, 2}, 1.0));
  EXPECT_THROW(tape.backward(ad::scale(x, 2.0)), ContractError);
}

TEST(Tape, ParameterGradientsAccumulateAcrossPasses) {
  ad::Parameter p(Tensor({3}, {1.0, 2.0, 3.0}));
  p.zero_grad();
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    tape.backward(ad::sum(ad::multiply(tape.parameter(p), tape.parameter(p))));
  }
  EXPECT_EQ(p.grad, Tensor({3}, {4.0, 8.0, 12.0}));
}

TEST(Tape, FrozenParameterReceivesNothing) {
  ad::Parameter p(Tensor({2}, {1.0, -1.0}));
  p.zero_grad();
  Tape tape;
  Var w = tape.parameter(p, false);
  Var x = tape.variable(Tensor({2}, {3.0, 4.0}));
  tape.backward(ad::sum(ad::multiply(w, x)));
  EXPECT_EQ(p.grad, Tensor({2}, 0.0));
  EXPECT_EQ(x.grad(), Tensor({2}, {1.0, -1.0}));
}

TEST(Tape, RepeatedBackwardGivesSameGradient) {
  Tape tape;
  Var x = tape.variable(Tensor({2}, {0.5, -2.0}));
  Var loss = ad::sum(ad::multiply(x, x));
  tape.backward(loss);
  const Tensor first = x.grad();
  tape.backward(loss);
  EXPECT_EQ(x.grad(), first);
}

TEST(Ops, MatmulShapeMismatchIsRejected) {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({2, 3}));
  EXPECT_THROW(ad::matmul(a, b), DimensionError);
}

TEST(Ops, DropoutWithZeroRateIsIdentity) {
  Tape tape;
  std::mt19937_64 rng(3);
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(ad::dropout(tape.constant(x), 0.0, rng).value(), x);
}

TEST(Ops, SoftmaxIgnoresMaskedEntriesExactly) {
  Tape tape;
  Var x = tape.constant(Tensor::matrix(1, 3, {0.3, 50.0, -0.2}));
  Var y = ad::softmax(ad::mask_fill(x, {false, true, false}), 1);
  EXPECT_EQ(y.value()(0, 1), 0.0);
  EXPECT_NEAR(y.value()(0, 0) + y.value()(0, 2), 1.0, 1e-15);
}

TEST(Ops, CrossEntropySkipsPadRows) {
  Tape tape;
  Var logits = tape.constant(Tensor::matrix(2, 2, {0.0, 0.0, 5.0, -5.0}));
  const std::vector<int> gold = {1, 0};
  EXPECT_NEAR(ad::cross_entropy(logits, gold, 0).value().item(), std::log(2.0),
              1e-15);
}

}  // namespace
}  // namespace kdmt
