#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "darkvrai/gradcheck.hpp"
#include "darkvrai/ops.hpp"

using namespace darkvrai;

namespace {

using In = std::vector<Tensor<double>>;

constexpr double kTol = 1e-4;

void expect_gradcheck(const std::function<Tensor<double>(const In&)>& f, const std::vector<Shape>& shapes,
                      std::uint64_t seed, int instances = 3, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  for (int i = 0; i < instances; ++i) {
    In inputs;
    for (const auto& s : shapes) inputs.push_back(random_tensor(s, rng, lo, hi));
    auto r = gradcheck(f, inputs, rng);
    EXPECT_TRUE(r.passed(kTol)) << "instance " << i << " max rel err " << r.max_rel_error << " at " << r.worst;
  }
}

// Loop oracle: cross-correlation with zero padding, stride and groups.
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t B = x.size(0), Cin = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Cout = w.size(0), cpg = w.size(1), K = w.size(2), L = w.size(3);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - L) / stride + 1;
  const std::size_t opg = Cout / groups;
  std::vector<double> out(B * Cout * Ho * Wo);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Cout; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double s = b.defined() ? b[o] : 0.0;
          const std::size_t g = o / opg;
          for (std::size_t c = 0; c < cpg; ++c)
            for (std::size_t p = 0; p < K; ++p)
              for (std::size_t q = 0; q < L; ++q) {
                const long r = static_cast<long>(i * stride + p) - static_cast<long>(pad);
                const long k = static_cast<long>(j * stride + q) - static_cast<long>(pad);
                if (r < 0 || k < 0 || r >= static_cast<long>(H) || k >= static_cast<long>(W)) continue;
                s += x[((n * Cin + g * cpg + c) * H + r) * W + k] * w[((o * cpg + c) * K + p) * L + q];
              }
          out[((n * Cout + o) * Ho + i) * Wo + j] = s;
        }
  return out;
}

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST(Ops, ElementwiseForward) {
  Tensor<double> x({4}, {-2.0, -0.5, 0.0, 3.0});
  auto s = silu(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s[i], x[i] / (1.0 + std::exp(-x[i])), 1e-15);
  auto sp = softplus(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(sp[i], std::log(1.0 + std::exp(x[i])), 1e-15);
  EXPECT_EQ(values(relu(x)), (std::vector<double>{0, 0, 0, 3}));
  EXPECT_EQ(values(abs(x)), (std::vector<double>{2, 0.5, 0, 3}));
  EXPECT_EQ(values(clamp_min(x, -1.0)), (std::vector<double>{-1, -0.5, 0, 3}));
}

TEST(Ops, ShapeMismatchThrows) {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({3, 2});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(reshape(a, {4}), ShapeError);
  EXPECT_THROW(chunk(a, 1, 2), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Ops, ConcatSplitRoundTrip) {
  Rng rng(1);
  auto x = random_tensor({2, 5, 3}, rng);
  auto parts = split(x, 1, {2, 3});
  EXPECT_EQ(parts[0].shape(), (Shape{2, 2, 3}));
  EXPECT_EQ(values(concat<double>(parts, 1)), values(x));
}

TEST(Ops, Conv2dMatchesLoopOracle) {
  Rng rng(2);
  struct Case {
    std::size_t cin, cout, k, stride, pad, groups, h, w;
  };
  for (const Case& c : {Case{3, 4, 3, 1, 1, 1, 6, 5}, Case{4, 4, 3, 1, 1, 4, 5, 5}, Case{2, 6, 2, 2, 0, 2, 6, 8},
                        Case{3, 2, 1, 1, 0, 1, 4, 4}}) {
    auto x = random_tensor({2, c.cin, c.h, c.w}, rng);
    auto w = random_tensor({c.cout, c.cin / c.groups, c.k, c.k}, rng);
    auto b = random_tensor({c.cout}, rng);
    auto y = conv2d(x, w, b, {c.stride, c.pad, c.groups});
    auto oracle = conv_oracle(x, w, b, c.stride, c.pad, c.groups);
    ASSERT_EQ(y.numel(), oracle.size());
    for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(y[i], oracle[i], 1e-12);
  }
}

TEST(Ops, Conv2dRejectsBadGeometry) {
  auto x = Tensor<double>::zeros({1, 3, 4, 4});
  EXPECT_THROW(conv2d(x, Tensor<double>::zeros({4, 2, 3, 3})), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>::zeros({4, 1, 3, 3}), {}, {1, 0, 2}), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>::zeros({2, 3, 5, 5})), ShapeError);
}

TEST(Ops, MatmulAndLinearMatchOracle) {
  Rng rng(3);
  auto a = random_tensor({3, 4}, rng);
  auto w = random_tensor({5, 4}, rng);
  auto bias = random_tensor({5}, rng);
  auto y = linear(a, w, bias);
  ASSERT_EQ(y.shape(), (Shape{3, 5}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t o = 0; o < 5; ++o) {
      double s = bias[o];
      for (std::size_t k = 0; k < 4; ++k) s += a[i * 4 + k] * w[o * 4 + k];
      EXPECT_NEAR(y[i * 5 + o], s, 1e-12);
    }
}

TEST(Ops, PixelUnshuffleLayout) {
  Tensor<double> x({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  auto p = pixel_unshuffle2(x);
  EXPECT_EQ(p.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(values(p), (std::vector<double>{1, 2, 3, 4}));
  Rng rng(4);
  auto y = random_tensor({2, 3, 6, 4}, rng);
  EXPECT_EQ(values(pixel_shuffle2(pixel_unshuffle2(y))), values(y));
}

TEST(Ops, TokensRoundTrip) {
  Rng rng(5);
  auto x = random_tensor({3, 2, 4, 5}, rng);
  auto t = to_tokens(x);
  EXPECT_EQ(t.shape(), (Shape{60, 2}));
  // token index t*H*W + h*W + w, channel c
  EXPECT_EQ(t[(1 * 20 + 2 * 5 + 3) * 2 + 1], x[((1 * 2 + 1) * 4 + 2) * 5 + 3]);
  EXPECT_EQ(values(from_tokens(t, 3, 4, 5)), values(x));
}

TEST(Ops, WarpZeroFlowIsIdentity) {
  Rng rng(6);
  auto x = random_tensor({2, 3, 5, 6}, rng);
  auto y = warp(x, Tensor<double>::zeros({2, 2, 5, 6}));
  EXPECT_EQ(values(y), values(x));
}

TEST(Ops, WarpConstantShiftMatchesShiftedInterior) {
  // Linear ramp f(r, c) = 0.3 r + 0.7 c is reproduced exactly by bilinear sampling.
  const std::size_t H = 8, W = 9;
  const double dx = 0.4, dy = -0.7;
  std::vector<double> v(H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) v[r * W + c] = 0.3 * r + 0.7 * c;
  Tensor<double> x({1, 1, H, W}, v);
  std::vector<double> flow(2 * H * W);
  std::fill(flow.begin(), flow.begin() + H * W, dx);
  std::fill(flow.begin() + H * W, flow.end(), dy);
  auto y = warp(x, Tensor<double>({1, 2, H, W}, flow));
  for (std::size_t r = 1; r + 1 < H; ++r)
    for (std::size_t c = 1; c + 1 < W; ++c) EXPECT_NEAR(y[r * W + c], 0.3 * (r + dy) + 0.7 * (c + dx), 1e-12);
}

TEST(Ops, AdaLnNormalizesPerSample) {
  Rng rng(7);
  auto x = random_tensor({3, 4, 5, 5}, rng, -3.0, 5.0);
  const double eps = 1e-5;
  auto y = ada_ln(x, Tensor<double>::ones({1, 4}), Tensor<double>::zeros({1, 4}), eps);
  const std::size_t n = 100;
  for (std::size_t b = 0; b < 3; ++b) {
    double m = 0, m2 = 0, xm = 0, xv = 0;
    for (std::size_t i = 0; i < n; ++i) xm += x[b * n + i];
    xm /= n;
    for (std::size_t i = 0; i < n; ++i) xv += (x[b * n + i] - xm) * (x[b * n + i] - xm);
    xv /= n;
    for (std::size_t i = 0; i < n; ++i) m += y[b * n + i];
    m /= n;
    for (std::size_t i = 0; i < n; ++i) m2 += (y[b * n + i] - m) * (y[b * n + i] - m);
    m2 /= n;
    EXPECT_LE(std::fabs(m), 1e-6);
    EXPECT_NEAR(m2, xv / (xv + eps), 1e-6);
  }
}

TEST(Ops, AdaLnConstantInputReturnsBeta) {
  auto x = Tensor<double>::full({2, 3, 4, 4}, 0.75);
  Tensor<double> gamma({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> beta({2, 3}, {0.1, -0.2, 0.3, -0.4, 0.5, -0.6});
  auto y = ada_ln(x, gamma, beta, 1e-5);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t s = 0; s < 16; ++s) EXPECT_EQ(y[(b * 3 + c) * 16 + s], beta[b * 3 + c]);
  EXPECT_THROW(ada_ln(x, gamma, beta, 0.0), ConfigError);
}

TEST(Gradcheck, Elementwise) {
  expect_gradcheck([](const In& v) { return mul(add(v[0], v[1]), sub(v[0], v[1])); }, {{2, 3}, {2, 3}}, 11);
  expect_gradcheck([](const In& v) { return div(v[0], v[1]); }, {{4}, {4}}, 12, 3, 0.5, 2.0);
  expect_gradcheck([](const In& v) { return silu(v[0]); }, {{10}}, 13, 3, -4.0, 4.0);
  expect_gradcheck([](const In& v) { return sigmoid(v[0]); }, {{10}}, 14, 3, -4.0, 4.0);
  expect_gradcheck([](const In& v) { return softplus(v[0]); }, {{10}}, 15, 3, -4.0, 4.0);
  expect_gradcheck([](const In& v) { return exp(v[0]); }, {{6}}, 16);
  expect_gradcheck([](const In& v) { return pow_scalar(v[0], 1.7); }, {{6}}, 17, 3, 0.2, 2.0);
  expect_gradcheck([](const In& v) { return square(abs(v[0])); }, {{6}}, 18);
  expect_gradcheck([](const In& v) { return mean(mul_scalar(v[0], 3.0)); }, {{7}}, 19);
}

TEST(Gradcheck, ShapeOps) {
  expect_gradcheck([](const In& v) { return concat<double>({v[0], v[1]}, 1); }, {{2, 2, 3}, {2, 1, 3}}, 21);
  expect_gradcheck([](const In& v) { return split(v[0], 2, {1, 3})[1]; }, {{2, 2, 4}}, 22);
  expect_gradcheck([](const In& v) { return pixel_unshuffle2(v[0]); }, {{1, 2, 4, 4}}, 23);
  expect_gradcheck([](const In& v) { return pixel_shuffle2(v[0]); }, {{1, 8, 2, 2}}, 24);
  expect_gradcheck([](const In& v) { return to_tokens(v[0]); }, {{2, 3, 2, 2}}, 25);
  expect_gradcheck([](const In& v) { return repeat_batch(v[0], 3); }, {{1, 2, 2, 2}}, 26);
  expect_gradcheck([](const In& v) { return simple_gate(v[0]); }, {{2, 4, 3, 3}}, 27);
}

TEST(Gradcheck, ChannelBroadcastAndPooling) {
  expect_gradcheck([](const In& v) { return add_channel(v[0], v[1]); }, {{2, 3, 2, 2}, {3}}, 31);
  expect_gradcheck([](const In& v) { return mul_channel(v[0], v[1]); }, {{2, 3, 2, 2}, {2, 3}}, 32);
  expect_gradcheck([](const In& v) { return global_avg_pool(v[0]); }, {{2, 3, 3, 3}}, 33);
  expect_gradcheck([](const In& v) { return global_max_pool(v[0]); }, {{2, 3, 3, 3}}, 34);
  expect_gradcheck([](const In& v) { return avg_pool2x2(v[0]); }, {{1, 2, 5, 4}}, 35);
  expect_gradcheck([](const In& v) { return bilinear_resize(v[0], 5, 3); }, {{1, 2, 4, 4}}, 36);
}

TEST(Gradcheck, LinearAndConv) {
  expect_gradcheck([](const In& v) { return matmul(v[0], v[1]); }, {{3, 4}, {4, 2}}, 41);
  expect_gradcheck([](const In& v) { return linear(v[0], v[1], v[2]); }, {{5, 4}, {3, 4}, {3}}, 42);
  expect_gradcheck([](const In& v) { return conv2d(v[0], v[1], v[2], {1, 1, 1}); },
                   {{2, 3, 5, 4}, {4, 3, 3, 3}, {4}}, 43);
  expect_gradcheck([](const In& v) { return conv2d(v[0], v[1], v[2], {1, 1, 4}); },
                   {{1, 4, 4, 4}, {4, 1, 3, 3}, {4}}, 44);
  expect_gradcheck([](const In& v) { return conv2d(v[0], v[1], v[2], {2, 0, 1}); },
                   {{1, 2, 4, 6}, {3, 2, 2, 2}, {3}}, 45);
}

TEST(Gradcheck, NormsAndWarp) {
  expect_gradcheck([](const In& v) { return layer_norm_last(v[0], v[1], v[2], 1e-5); }, {{4, 6}, {6}, {6}}, 51);
  expect_gradcheck([](const In& v) { return ada_ln(v[0], v[1], v[2], 1e-5); }, {{2, 3, 3, 3}, {2, 3}, {1, 3}}, 52);
  // Flows in (0.1, 0.4) keep samples away from integer grid lines where bilinear weights kink.
  expect_gradcheck([](const In& v) { return warp(v[0], v[1]); }, {{1, 2, 5, 5}, {1, 2, 5, 5}}, 53, 3, 0.1, 0.4);
}

namespace {

// Mutation fixture: y = 2x with a backward rule of the wrong sign.
Tensor<double> bad_double(const Tensor<double>& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0 * x[i];
  return detail::record<double>(x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    auto gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= 2.0 * g[i];
  });
}

}  // namespace

TEST(Gradcheck, DetectsWrongBackwardSign) {
  Rng rng(61);
  auto r = gradcheck([](const In& v) { return silu(bad_double(v[0])); }, {random_tensor({5}, rng)}, rng);
  EXPECT_FALSE(r.passed(kTol));
  EXPECT_GT(r.max_rel_error, 1.0);
}
