#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "bilevel/autograd.hpp"
#include "bilevel/ops.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/tensor.hpp"

using namespace bilevel;

namespace {

Tensor iota(Shape s, double start = 0.0) {
  std::vector<double> v(numel(s));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = start + static_cast<double>(i);
  return Tensor::constant(std::move(s), std::move(v));
}

}  // namespace

TEST(Tensor, ConstantRejectsSizeMismatch) {
  EXPECT_THROW(Tensor::constant({2, 3}, {1, 2, 3}), ShapeError);
  EXPECT_NO_THROW(Tensor::constant({2, 0}, {}));
}

TEST(Tensor, ItemOnlyForSingleElement) {
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.5).item(), 4.5);
  EXPECT_THROW(Tensor::zeros({2}).item(), ShapeError);
}

TEST(Tensor, BroadcastingAdd) {
  const Tensor a = iota({2, 3});
  const Tensor b = Tensor::constant({3}, {10, 20, 30});
  const Tensor c = add(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(c.values(), (std::vector<double>{10, 21, 32, 13, 24, 35}));
  const Tensor col = Tensor::constant({2, 1}, {1, 2});
  EXPECT_EQ(mul(col, b).shape(), (Shape{2, 3}));
}

TEST(Tensor, IncompatibleBroadcastThrows) {
  EXPECT_THROW(add(iota({2, 3}), iota({2})), ShapeError);
  EXPECT_THROW(matmul(iota({2, 3}), iota({2, 3})), ShapeError);
}

TEST(Tensor, MatmulAndTranspose) {
  const Tensor a = iota({2, 3}, 1.0);
  const Tensor b = transpose(a);
  EXPECT_EQ(b.shape(), (Shape{3, 2}));
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.values(), (std::vector<double>{14, 32, 32, 77}));
}

TEST(Tensor, ConvWithCenterKernelIsIdentity) {
  const Tensor x = iota({2, 1, 4, 5});
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  const Tensor y = conv2d(x, Tensor::constant({1, 1, 3, 3}, k));
  EXPECT_EQ(y.values(), x.values());
}

TEST(Tensor, ConvZeroPadding) {
  const Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor y = conv2d(x, Tensor::full({1, 1, 3, 3}, 1.0));
  EXPECT_EQ(y.values(), (std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Tensor, KernelFlipIsInvolution) {
  const Tensor w = iota({2, 3, 3, 3});
  const Tensor f = kernel_flip(w);
  EXPECT_EQ(f.shape(), (Shape{3, 2, 3, 3}));
  EXPECT_EQ(kernel_flip(f).values(), w.values());
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  const Tensor p = softmax(Tensor::constant({2, 3}, {1000, 1001, 1002, -5, 0, 5}));
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += p[r * 3 + c];
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Tensor, CrossEntropyOfUniformLogitsIsLogC) {
  const Tensor l = softmax_cross_entropy(Tensor::zeros({3, 4}), {0, 1, 3});
  EXPECT_EQ(l.rank(), 0u);
  EXPECT_NEAR(l.item(), std::log(4.0), 1e-15);
  EXPECT_THROW(softmax_cross_entropy(Tensor::zeros({2, 4}), {0, 4}), Error);
}

TEST(Tensor, SliceConcatRoundTrip) {
  const Tensor x = iota({3, 5});
  const Tensor y = concat({slice(x, 1, 0, 2), slice(x, 1, 2, 5)}, 1);
  EXPECT_EQ(y.values(), x.values());
  EXPECT_THROW(slice(x, 1, 3, 6), ShapeError);
}

TEST(Tensor, PadSliceInvertsSlice) {
  const Tensor x = iota({2, 4});
  const Tensor p = pad_slice(slice(x, 1, 1, 3), 1, 1, 3, {2, 4});
  EXPECT_EQ(p.values(), (std::vector<double>{0, 1, 2, 0, 0, 5, 6, 0}));
}

TEST(Tensor, SumToAndBroadcastTo) {
  const Tensor x = iota({2, 3});
  EXPECT_EQ(sum_to(x, {3}).values(), (std::vector<double>{3, 5, 7}));
  EXPECT_EQ(sum_to(x, {2, 1}).values(), (std::vector<double>{3, 12}));
  EXPECT_DOUBLE_EQ(sum(x).item(), 15.0);
  EXPECT_DOUBLE_EQ(mean(x).item(), 2.5);
  EXPECT_EQ(broadcast_to(Tensor::constant({2, 1}, {1, 2}), {2, 2}).values(), (std::vector<double>{1, 1, 2, 2}));
}

TEST(Tensor, ClampAndActivations) {
  const Tensor x = Tensor::constant({4}, {-2, -0.5, 0.5, 2});
  EXPECT_EQ(clamp(x, -1, 1).values(), (std::vector<double>{-1, -0.5, 0.5, 1}));
  EXPECT_EQ(relu(x).values(), (std::vector<double>{0, 0, 0.5, 2}));
  EXPECT_EQ(leaky_relu(x, 0.2).values(), (std::vector<double>{-0.4, -0.1, 0.5, 2}));
  EXPECT_NEAR(sigmoid(Tensor::scalar(0.0)).item(), 0.5, 0.0);
}

// <gather(x), y> == <x, scatter_add(y)> for any index map.
TEST(Tensor, GatherScatterAreAdjoint) {
  Rng rng(3, 0);
  for (int trial = 0; trial < 20; ++trial) {
    auto idx = std::make_shared<std::vector<std::int64_t>>(7);
    for (auto& i : *idx) i = rng.integer(-1, 5);
    std::vector<double> xv(6), yv(7);
    for (double& v : xv) v = rng.uniform(-1, 1);
    for (double& v : yv) v = rng.uniform(-1, 1);
    const Tensor x = Tensor::constant({6}, xv), y = Tensor::constant({7}, yv);
    const double lhs = sum(mul(gather(x, idx, {7}), y)).item();
    const double rhs = sum(mul(x, scatter_add(y, idx, {6}))).item();
    EXPECT_NEAR(lhs, rhs, 1e-14);
  }
}

TEST(Tensor, OpsOnConstantsAreNotRecorded) {
  Tape tape;
  const Tensor w = tape.parameter({2}, {1, 2});
  const Tensor c = Tensor::constant({2}, {3, 4});
  EXPECT_FALSE(mul(c, c).requires_grad());
  EXPECT_TRUE(mul(w, c).requires_grad());
  {
    NoGradGuard ng;
    EXPECT_FALSE(mul(w, c).requires_grad());
  }
  EXPECT_TRUE(mul(w, c).requires_grad());
}

TEST(Tensor, MixingTapesThrows) {
  Tape t1, t2;
  const Tensor a = t1.parameter({1}, {1}), b = t2.parameter({1}, {2});
  EXPECT_THROW(add(a, b), Error);
}

TEST(Tensor, CheckedModeCatchesNonFinite) {
  const Tensor x = Tensor::constant({2}, {1.0, -1.0});
  {
    CheckedModeGuard on(true);
    EXPECT_THROW(log(x), NumericError);
    EXPECT_THROW(add(x, Tensor::scalar(std::numeric_limits<double>::quiet_NaN())), NumericError);
  }
  CheckedModeGuard off(false);
  EXPECT_TRUE(std::isnan(log(x)[1]));
}

TEST(Tensor, CutLineageMakesLeaf) {
  Tape tape;
  const Tensor w = tape.parameter({1}, {2});
  const Tensor y = mul(w, w);
  EXPECT_FALSE(y.is_leaf());
  y.cut_lineage();
  EXPECT_TRUE(y.is_leaf());
  EXPECT_EQ(y.values(), (std::vector<double>{4}));
  const GradMap g = backward(sum(mul(y, Tensor::scalar(3.0))), {w});
  EXPECT_EQ(g[w].values(), (std::vector<double>{0}));
}

TEST(Rng, StreamsAreIndependentAndReproducible) {
  Rng a(7, 1), b(7, 1), c(7, 2);
  const double x = a.uniform(0, 1);
  EXPECT_EQ(x, b.uniform(0, 1));
  EXPECT_NE(x, c.uniform(0, 1));
  for (int i = 0; i < 100; ++i) {
    const auto k = a.integer(-2, 3);
    EXPECT_GE(k, -2);
    EXPECT_LE(k, 3);
  }
}
