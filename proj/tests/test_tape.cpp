#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ctxdet/grad_check.hpp"
#include "ctxdet/grad_suite.hpp"
#include "ctxdet/tape.hpp"

using namespace ctxdet;

TEST(Tape, ForwardValuesMatchEagerOps) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  Tape t;
  Var va = t.leaf(a), vb = t.leaf(b);
  EXPECT_EQ(t.value(t.matmul(va, vb)), matmul(a, b));
  EXPECT_EQ(t.value(t.row_softmax(va)), row_softmax(a));
  LayerNormParams ln(4);
  EXPECT_EQ(t.value(t.layer_norm(va, ln)), layer_norm(a, ln));
  EXPECT_EQ(t.value(t.max_pool_rows(va)).storage(), max_pool_set(a).values.storage());
  // Different gemm kernels; agreement to rounding is all that is promised.
  const Tensor nt = t.value(t.matmul_nt(va, va)), ref = matmul(a, transpose(a));
  for (std::size_t i = 0; i < nt.size(); ++i) EXPECT_NEAR(nt[i], ref[i], 1e-12);
}

TEST(Tape, MatmulGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  auto f = [](Tape& t, const std::vector<Var>& x) {
    std::mt19937_64 proj(7);
    return project_to_scalar(t, t.matmul(x[0], x[1]), proj);
  };
  auto rep = grad_check(f, {random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)}, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(Tape, LayerNormGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto f = [](Tape& t, const std::vector<Var>& x) {
    std::mt19937_64 proj(8);
    return project_to_scalar(t, t.layer_norm(x[0], x[1], x[2], 1e-5), proj);
  };
  auto rep = grad_check(f, {random_tensor({4, 8}, rng), random_tensor({8}, rng), random_tensor({8}, rng)}, 1e-5);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(Tape, SoftmaxSumLossGradientIsZero) {
  // Each softmax row sums to one, so d(sum)/dx vanishes; the FD check runs on
  // the absolute scale set by the denominator floor.
  std::mt19937_64 rng(4);
  auto f = [](Tape& t, const std::vector<Var>& x) { return t.sum(t.row_softmax(x[0])); };
  auto rep = grad_check(f, {random_tensor({3, 5}, rng)}, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  Tape t;
  Var x = t.leaf(random_tensor({3, 5}, rng));
  t.backward(t.sum(t.row_softmax(x)));
  for (double g : t.grad(x)) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Tape, MaxPoolTieSendsGradientToFirstRow) {
  Tape t;
  Var x = t.leaf(Tensor::from_rows({{3}, {3}}));
  t.backward(t.sum(t.max_pool_rows(x)));
  EXPECT_EQ(t.grad(x), (std::vector<double>{1.0, 0.0}));
}

TEST(Tape, SegmentMaxPoolRoutesGradientPerSegment) {
  Tape t;
  Var x = t.leaf(Tensor::from_rows({{1, 5}, {2, 0}, {7, -1}, {3, 4}}));
  Var p = t.segment_max_pool(x, {0, 2, 4});
  EXPECT_EQ(t.value(p), Tensor::from_rows({{2, 5}, {7, 4}}));
  t.backward(t.sum(p));
  EXPECT_EQ(t.grad(x), (std::vector<double>{0, 1, 1, 0, 1, 0, 0, 1}));
}

TEST(Tape, ParameterGradientsAccumulateAcrossTapes) {
  LinearParams lin(2, 1);
  lin.weight = Tensor::from_rows({{1}, {2}});
  for (int rep = 0; rep < 2; ++rep) {
    Tape t;
    Var y = t.linear(t.constant(Tensor::from_rows({{3, 4}})), lin);
    t.backward(t.sum(y));
    t.accumulate_param_grads();
  }
  EXPECT_EQ(lin.weight.grad(), (std::vector<double>{6, 8}));
  EXPECT_EQ(lin.bias.grad(), (std::vector<double>{2}));
}

TEST(Tape, BackwardNeedsScalarTarget) {
  Tape t;
  Var x = t.leaf(Tensor::matrix(2, 2, 1.0));
  EXPECT_THROW(t.backward(x), DimensionError);
}

TEST(Losses, SmoothL1BranchesMatchFormula) {
  Tape t;
  Var p = t.leaf(Tensor::from_rows({{0.05, 2.0}}));
  const double beta = 0.1;
  Var l = t.smooth_l1(p, Tensor::from_rows({{0.0, 0.0}}), {1.0}, beta);
  EXPECT_NEAR(t.value(l)[0], 0.5 * 0.05 * 0.05 / beta + (2.0 - 0.5 * beta), 1e-15);
}

TEST(Losses, BceIsStableForLargeLogits) {
  Tape t;
  Var z = t.leaf(Tensor({2, 1}, std::vector<double>{800.0, -800.0}));
  Var l = t.bce_with_logits(z, {0.0, 1.0}, {1.0, 1.0});
  EXPECT_NEAR(t.value(l)[0], 1600.0, 1e-9);
  t.backward(l);
  EXPECT_NEAR(t.grad(z)[0], 1.0, 1e-15);
  EXPECT_NEAR(t.grad(z)[1], -1.0, 1e-15);
}

TEST(Losses, CrossEntropyOfUniformLogitsIsLogC) {
  Tape t;
  Var z = t.leaf(Tensor::matrix(3, 4, 0.5));
  Var l = t.softmax_cross_entropy(z, {0, 1, 3}, {1.0, 1.0, 0.0});
  EXPECT_NEAR(t.value(l)[0], 2.0 * std::log(4.0), 1e-14);
}

TEST(GradSuite, EveryCasePassesAShortRun) {
  GradSuiteOptions opt;
  opt.trials = 10;
  for (const auto& row : run_grad_suite(opt)) EXPECT_TRUE(row.passed()) << row.op << ": " << row.first_failure;
}

TEST(GradSuite, RelativeErrorUsesDenominatorFloor) {
  EXPECT_DOUBLE_EQ(grad_rel_error(0.0, 1e-6), 1e-3);
  EXPECT_DOUBLE_EQ(grad_rel_error(2.0, 1.0), 0.5);
}
