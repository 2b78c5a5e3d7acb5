#include <gtest/gtest.h>

#include "darkvrai/ops.hpp"
#include "darkvrai/tensor.hpp"

using namespace darkvrai;

namespace {

Tensor<double> leaf(Shape s, std::vector<double> v) {
  Tensor<double> t(std::move(s), std::move(v));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST(Tensor, ConstructionValidatesElementCount) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<float> t({2, 3}, std::vector<float>(6, 1.5f));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(), 2u);
  EXPECT_EQ(t.size(1), 3u);
  EXPECT_FALSE(t.requires_grad());
  EXPECT_TRUE(t.is_leaf());
}

TEST(Tensor, ItemRequiresSingleElement) {
  EXPECT_DOUBLE_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor<double>::zeros({2}).item(), ShapeError);
}

TEST(Autodiff, ProductRule) {
  auto x = leaf({3}, {1.0, 2.0, 3.0});
  auto y = leaf({3}, {4.0, 5.0, 6.0});
  backward(sum(mul(x, y)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{4, 5, 6}));
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{1, 2, 3}));
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  auto x = leaf({1}, {3.0});
  auto y = mul(x, x);
  backward(sum(add(y, y)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, LeafGradientsAccumulateAcrossCalls) {
  auto x = leaf({2}, {1.0, -1.0});
  backward(sum(mul_scalar(x, 2.0)));
  backward(sum(mul_scalar(x, 3.0)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Autodiff, BackwardOnNonScalarThrows) {
  auto x = leaf({2}, {1.0, 2.0});
  EXPECT_THROW(backward(mul_scalar(x, 2.0)), ShapeError);
}

TEST(Autodiff, DetachedLossThrows) {
  auto x = leaf({2}, {1.0, 2.0});
  EXPECT_THROW(backward(sum(x.detach())), GraphError);
}

TEST(Autodiff, FreedGraphThrowsUnlessRetained) {
  auto x = leaf({2}, {1.0, 2.0});
  auto loss = sum(square(x));
  backward(loss, true);
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Autodiff, NoGradGuardStopsRecording) {
  auto x = leaf({2}, {1.0, 2.0});
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = mul_scalar(x, 2.0);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
  auto z = mul_scalar(x, 2.0);
  EXPECT_TRUE(z.requires_grad());
}

TEST(Autodiff, OnlyLeavesAreMutable) {
  auto x = leaf({2}, {1.0, 2.0});
  auto y = mul_scalar(x, 2.0);
  EXPECT_THROW(y.mutable_data(), GraphError);
  EXPECT_THROW(y.set_requires_grad(false), GraphError);
  EXPECT_NO_THROW(x.mutable_data()[0] = 5.0);
}

TEST(Autodiff, InputsWithoutGradReceiveNone) {
  auto x = leaf({2}, {1.0, 2.0});
  Tensor<double> c({2}, {3.0, 4.0});
  backward(sum(mul(x, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Tensor, CastPreservesShapeAndValues) {
  Tensor<double> d({2}, {0.25, -1.5});
  auto f = d.cast<float>();
  EXPECT_EQ(f.shape(), d.shape());
  EXPECT_EQ(f[0], 0.25f);
  EXPECT_EQ(f[1], -1.5f);
}
