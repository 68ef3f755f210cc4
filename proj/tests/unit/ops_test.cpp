#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "m2i2/error.hpp"
#include "m2i2/gradcheck.hpp"
#include "m2i2/ops.hpp"

using namespace m2i2;
using m2i2::testing::random_tensor;

TEST(Ops, MatmulAgainstLoops) {
  Rng rng(1);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 5}, rng);
  const Tensor c = ops::matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 5}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-12);
    }
  EXPECT_THROW(ops::matmul(a, a), DimensionError);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(2);
  const Tensor x = random_tensor({6, 9}, rng, -50, 50);
  const Tensor p = ops::softmax(x);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GE(p.at(i, j), 0.0);
      s += p.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, SoftmaxIsStableForLargeLogits) {
  const Tensor x({1, 2}, {1000.0, 1000.0});
  const Tensor p = ops::softmax(x);
  EXPECT_NEAR(p.at(0, 0), 0.5, 1e-15);
}

TEST(Ops, MaskedSoftmaxGivesExactZeros) {
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  const std::vector<std::uint8_t> keep{1, 0, 1, 1, 1, 0};
  const Tensor p = ops::masked_softmax(x, keep);
  EXPECT_EQ(p.at(0, 1), 0.0);
  EXPECT_EQ(p.at(1, 2), 0.0);
  EXPECT_NEAR(p.at(0, 0) + p.at(0, 2), 1.0, 1e-12);
  const std::vector<std::uint8_t> none{0, 0, 0, 1, 1, 1};
  EXPECT_THROW(ops::masked_softmax(x, none), ContractError);
}

TEST(Ops, UniformLogitCrossEntropyIsLogClassCount) {
  for (std::size_t v : {2u, 7u, 512u}) {
    const Tensor logits = Tensor::full({3, v}, 0.25);
    const std::vector<std::size_t> t{0, v - 1, v / 2};
    EXPECT_NEAR(ops::cross_entropy(logits, t).item(), std::log(static_cast<double>(v)), 1e-9);
  }
}

TEST(Ops, CrossEntropyTargetOutOfRange) {
  const Tensor logits = Tensor::zeros({1, 3});
  const std::vector<std::size_t> t{3};
  EXPECT_THROW(ops::cross_entropy(logits, t), IndexError);
}

TEST(Ops, GeluTanhForm) {
  for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    const double c = std::sqrt(2.0 / std::numbers::pi);
    const double ref = 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
    EXPECT_DOUBLE_EQ(ops::gelu_value(x), ref);
  }
}

TEST(Ops, LayerNormZeroMeanUnitVariance) {
  Rng rng(3);
  const Tensor x = random_tensor({4, 16}, rng, -5, 5);
  const Tensor y = ops::layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
  for (std::size_t i = 0; i < 4; ++i) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < 16; ++j) m += y.at(i, j);
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-4);
  }
}

TEST(Ops, MseOfEqualInputsIsZero) {
  Rng rng(4);
  const Tensor x = random_tensor({5, 7}, rng);
  EXPECT_EQ(ops::mse(x, x.clone()).item(), 0.0);
}

TEST(Ops, L2NormalizedRowsHaveUnitNorm) {
  Rng rng(5);
  const Tensor y = ops::l2_normalize_rows(random_tensor({4, 8}, rng));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 8; ++j) s += y.at(i, j) * y.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, ScatterThenGatherRoundTrips) {
  Rng rng(6);
  const Tensor base = random_tensor({6, 3}, rng);
  const Tensor rows = random_tensor({2, 3}, rng);
  const std::vector<std::size_t> idx{4, 1};
  const Tensor back = ops::gather_rows(ops::scatter_rows(base, rows, idx), idx);
  EXPECT_EQ(back.values(), rows.values());
  const std::vector<std::size_t> dup{1, 1};
  EXPECT_THROW(ops::scatter_rows(base, rows, dup), ContractError);
}

TEST(Ops, DropoutZeroRateIsIdentity) {
  Rng rng(7);
  const Tensor x = random_tensor({3, 3}, rng);
  EXPECT_EQ(ops::dropout(x, 0.0, rng).values(), x.values());
  EXPECT_THROW(ops::dropout(x, 1.0, rng), ContractError);
}

TEST(GradCheck, EveryOpPassesFiniteDifferences) {
  for (const auto& r : op_gradcheck_suite(11)) {
    EXPECT_TRUE(r.passed) << r.name << " rel err " << r.max_rel_error;
    EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
  }
}

TEST(GradCheck, SumOfProductGradient) {
  Rng rng(12);
  Tensor a = random_tensor({3, 4}, rng, -2, 2, true);
  const Tensor b = random_tensor({4, 2}, rng);
  const auto r = check_gradient("sum(AB)", [&] { return ops::sum(ops::matmul(a, b)); }, a, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}
