#include <gtest/gtest.h>

#include <cmath>

#include "darkvrai/blocks.hpp"
#include "darkvrai/gradcheck.hpp"

using namespace darkvrai;

namespace {

using In = std::vector<Tensor<double>>;

std::vector<double> vals(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

void fill(Tensor<double> t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu_s(double x) { return x * sig(x); }

// Checks gradients w.r.t. the listed inputs plus every parameter of `ps`,
// probing a random subset of coordinates per tensor.
template <typename F>
GradCheckResult check_with_params(F f, In inputs, const ParameterSet<double>& ps, Rng& rng) {
  const std::size_t n_inputs = inputs.size();
  for (const auto& [name, t] : ps) inputs.push_back(t);
  GradCheckOptions opt;
  opt.max_coords_per_input = 6;
  return gradcheck([&](const In& v) { return f(In(v.begin(), v.begin() + n_inputs)); }, inputs, rng, opt);
}

}  // namespace

TEST(ChannelAttention, ZeroMlpHalvesInput) {
  ParameterSet<double> ps(1);
  ChannelAttention<double> ca(ps, "ca", 4, 2);
  for (const auto& [name, t] : ps) fill(t, 0.0);
  Rng rng(1);
  auto x = random_tensor({2, 4, 3, 3}, rng);
  auto y = ca.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i] * 0.5);
}

TEST(ChannelAttention, MatchesPooledMlpOracle) {
  ParameterSet<double> ps(2);
  ChannelAttention<double> ca(ps, "ca", 4, 2);
  Rng rng(2);
  auto x = random_tensor({2, 4, 3, 2}, rng, -3.0, 3.0);
  auto y = ca.forward(x);
  const std::size_t C = 4, Hd = 2, S = 6;
  auto mlp = [&](const std::vector<double>& p) {
    std::vector<double> h(Hd), o(C);
    for (std::size_t j = 0; j < Hd; ++j) {
      double s = ca.b1[j];
      for (std::size_t c = 0; c < C; ++c) s += ca.w1[j * C + c] * p[c];
      h[j] = std::max(0.0, s);
    }
    for (std::size_t c = 0; c < C; ++c) {
      double s = ca.b2[c];
      for (std::size_t j = 0; j < Hd; ++j) s += ca.w2[c * Hd + j] * h[j];
      o[c] = s;
    }
    return o;
  };
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> avg(C, 0.0), mx(C, -1e300);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const double v = x[(b * C + c) * S + s];
        avg[c] += v / S;
        mx[c] = std::max(mx[c], v);
      }
    auto ma = mlp(avg), mm = mlp(mx);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = (b * C + c) * S + s;
        EXPECT_NEAR(y[i], x[i] * sig(ma[c] + mm[c]), 1e-12);
        EXPECT_LE(std::fabs(y[i]), std::fabs(x[i]));
      }
  }
}

TEST(BossModule, SingleTokenMatchesComposedOracle) {
  const std::size_t C = 2, N = 3;
  ParameterSet<double> ps(3, InitMode::kRandom);
  BossModule<double> m(ps, "boss", C, N);
  Rng rng(3);
  auto x = random_tensor({1, C, 1, 1}, rng);
  auto y = m.forward(x, {});

  std::vector<double> xz(2 * C);
  for (std::size_t o = 0; o < 2 * C; ++o) {
    xz[o] = m.in_bias[o];
    for (std::size_t c = 0; c < C; ++c) xz[o] += m.in_weight[o * C + c] * x[c];
  }
  // 3x3 depthwise conv on a 1x1 map only sees the centre tap.
  std::vector<double> u(C);
  for (std::size_t c = 0; c < C; ++c) u[c] = silu_s(m.conv_weight[c * 9 + 4] * xz[c] + m.conv_bias[c]);
  std::vector<double> s(C);
  const auto& p = m.scan;
  for (std::size_t d = 0; d < C; ++d) {
    double pre = p.delta_bias[d];
    for (std::size_t k = 0; k < C; ++k) pre += p.delta_weight[d * C + k] * u[k];
    const double dt = std::log1p(std::exp(pre));
    double acc = p.d_skip[d] * u[d];
    for (std::size_t n = 0; n < N; ++n) {
      double bn = 0.0, cn = 0.0;
      for (std::size_t k = 0; k < C; ++k) {
        bn += p.b_weight[n * C + k] * u[k];
        cn += p.c_weight[n * C + k] * u[k];
      }
      acc += cn * dt * bn * u[d];  // h_0 = 0, so h_1 = Bbar x
    }
    s[d] = acc;
  }
  const double mu = (s[0] + s[1]) / 2.0;
  const double var = ((s[0] - mu) * (s[0] - mu) + (s[1] - mu) * (s[1] - mu)) / 2.0;
  std::vector<double> g(C);
  for (std::size_t d = 0; d < C; ++d) {
    const double ln = (s[d] - mu) / std::sqrt(var + 1e-5) * m.ln_weight[d] + m.ln_bias[d];
    g[d] = ln * silu_s(xz[C + d]);
  }
  for (std::size_t o = 0; o < C; ++o) {
    double out = m.out_bias[o];
    for (std::size_t k = 0; k < C; ++k) out += m.out_weight[o * C + k] * g[k];
    EXPECT_NEAR(y[o], out, 1e-6);
  }
}

TEST(BossModule, ClosedGateGivesOutputBias) {
  const std::size_t C = 4;
  ParameterSet<double> ps(4, InitMode::kRandom);
  BossModule<double> m(ps, "boss", C, 4);
  // z = -50 for every token: silu(z) ~ -1e-20.
  auto w = m.in_weight.mutable_data();
  auto b = m.in_bias.mutable_data();
  for (std::size_t o = C; o < 2 * C; ++o) {
    for (std::size_t c = 0; c < C; ++c) w[o * C + c] = 0.0;
    b[o] = -50.0;
  }
  Rng rng(4);
  auto y = m.forward(random_tensor({2, C, 3, 3}, rng), {});
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < 9; ++s) EXPECT_NEAR(y[(t * C + c) * 9 + s], m.out_bias[c], 1e-12);
}

TEST(BossModule, FrameOrderChangesOutput) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParameterSet<double> ps(seed, InitMode::kRandom);
    BossModule<double> m(ps, "boss", 4, 4);
    Rng rng(seed);
    auto x = random_tensor({3, 4, 2, 2}, rng);
    auto f = split(x, 0, {1, 1, 1});
    auto rev = concat<double>({f[2], f[1], f[0]}, 0);
    auto y = m.forward(x, {});
    auto yr = split(m.forward(rev, {}), 0, {1, 1, 1});
    auto yr_back = concat<double>({yr[2], yr[1], yr[0]}, 0);
    EXPECT_GT(max_abs_diff(y, yr_back), 0.0) << "seed " << seed;
  }
}

TEST(BossBlock, ZeroScalesGiveIdentity) {
  ParameterSet<double> ps(5);
  BossBlock<double> blk(ps, "bb", 4, 4, 2, 8, true);
  Rng rng(5);
  auto x = random_tensor({2, 4, 3, 3}, rng);
  auto v = random_tensor({1, 8}, rng);
  EXPECT_EQ(vals(blk.forward(x, v, {})), vals(x));
}

TEST(BossBlock, EqualsManualComposition) {
  ParameterSet<double> ps(6, InitMode::kRandom);
  BossBlock<double> blk(ps, "bb", 4, 4, 2, 8, true);
  Rng rng(6);
  auto x = random_tensor({2, 4, 2, 3}, rng);
  auto v = random_tensor({1, 8}, rng);
  auto y = blk.forward(x, v, {});
  auto h = add(x, mul_channel(blk.boss.forward(blk.norm1.forward(x, v), {}), blk.scale1));
  auto manual = add(h, mul_channel(blk.attention.forward(blk.norm2.forward(h, v)), blk.scale2));
  EXPECT_LE(max_abs_diff(y, manual), 1e-7);
}

TEST(BossBlock, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ParameterSet<double> ps(seed + 10, InitMode::kRandom);
    BossBlock<double> blk(ps, "bb", 4, 4, 2, 8, true);
    Rng rng(seed + 10);
    auto r = check_with_params([&](const In& v) { return blk.forward(v[0], v[1], {ScanKernel::kParallel, 3, 1}); },
                               {random_tensor({2, 4, 2, 2}, rng), random_tensor({1, 8}, rng)}, ps, rng);
    EXPECT_TRUE(r.passed(1e-4)) << r.max_rel_error << " " << r.worst;
  }
}

TEST(NafBlock, ZeroInitIsIdentity) {
  ParameterSet<double> ps(7);
  NafBlock<double> blk(ps, "nb", 4, 8, true);
  Rng rng(7);
  auto x = random_tensor({1, 4, 5, 5}, rng);
  EXPECT_EQ(vals(blk.forward(x, random_tensor({1, 8}, rng))), vals(x));
}

TEST(NafBlock, SimpleGateMultipliesHalves) {
  Tensor<double> x({1, 4, 1, 1}, {2.0, 3.0, 5.0, 7.0});
  EXPECT_EQ(vals(simple_gate(x)), (std::vector<double>{10.0, 21.0}));
}

TEST(NafBlock, GradientsMatchFiniteDifferences) {
  for (bool conditioned : {true, false}) {
    ParameterSet<double> ps(8, InitMode::kRandom);
    NafBlock<double> blk(ps, "nb", 4, 6, conditioned);
    Rng rng(8);
    In inputs{random_tensor({1, 4, 3, 3}, rng)};
    if (conditioned) inputs.push_back(random_tensor({1, 6}, rng));
    auto r = check_with_params(
        [&](const In& v) { return blk.forward(v[0], v.size() > 1 ? v[1] : Tensor<double>()); }, inputs, ps, rng);
    EXPECT_TRUE(r.passed(1e-4)) << r.max_rel_error << " " << r.worst;
  }
}

TEST(Blocks, ShapePreservingOverRandomSizes) {
  Rng rng(9);
  for (int i = 0; i < 5; ++i) {
    const std::size_t T = 1 + rng() % 3, C = 2 * (1 + rng() % 3), H = 1 + rng() % 4, W = 1 + rng() % 4;
    ParameterSet<float> ps(i, InitMode::kRandom);
    BossBlock<float> bb(ps, "bb", C, 4, 2, 8, true);
    NafBlock<float> nb(ps, "nb", C, 8, true);
    auto x = random_tensor({T, C, H, W}, rng).cast<float>();
    auto v = random_tensor({1, 8}, rng).cast<float>();
    EXPECT_EQ(bb.forward(x, v, {}).shape(), x.shape());
    EXPECT_EQ(nb.forward(x, v).shape(), x.shape());
  }
}
