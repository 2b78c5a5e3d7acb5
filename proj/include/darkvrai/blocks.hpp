#pragma once

#include <algorithm>
#include <cstddef>
#include <string>

#include "darkvrai/conditioning.hpp"
#include "darkvrai/ops.hpp"
#include "darkvrai/params.hpp"
#include "darkvrai/scan.hpp"

namespace darkvrai {

/// CBAM-style channel attention: y = x * sigmoid(mlp(avg(x)) + mlp(max(x))).
template <typename T>
struct ChannelAttention {
  ChannelAttention() = default;

  ChannelAttention(ParameterSet<T>& ps, const std::string& prefix, std::size_t channels, std::size_t reduction) {
    const std::size_t hidden = std::max<std::size_t>(1, channels / std::max<std::size_t>(reduction, 1));
    w1 = ps.uniform(prefix + ".fc1.weight", {hidden, channels}, channels);
    b1 = ps.uniform(prefix + ".fc1.bias", {hidden}, channels);
    w2 = ps.uniform(prefix + ".fc2.weight", {channels, hidden}, hidden);
    b2 = ps.uniform(prefix + ".fc2.bias", {channels}, hidden);
  }

  Tensor<T> gate(const Tensor<T>& x) const {
    auto mlp = [this](const Tensor<T>& v) { return linear(relu(linear(v, w1, b1)), w2, b2); };
    return sigmoid(add(mlp(global_avg_pool(x)), mlp(global_max_pool(x))));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return mul_channel(x, gate(x)); }

  Tensor<T> w1, b1, w2, b2;
};

/// xz = Linear(X) = [x || z]; x -> depthwise 3x3 conv -> SiLU -> burst-order
/// selective scan -> LayerNorm; output Linear(y * SiLU(z)).
template <typename T>
struct BossModule {
  BossModule() = default;

  BossModule(ParameterSet<T>& ps, const std::string& prefix, std::size_t channels, std::size_t state)
      : channels(channels) {
    if (channels == 0) throw ConfigError("BOSS module needs a positive channel count");
    in_weight = ps.uniform(prefix + ".in_proj.weight", {2 * channels, channels}, channels);
    in_bias = ps.uniform(prefix + ".in_proj.bias", {2 * channels}, channels);
    conv_weight = ps.uniform(prefix + ".conv.weight", {channels, 1, 3, 3}, 9);
    conv_bias = ps.uniform(prefix + ".conv.bias", {channels}, 9);
    scan = SelectiveScanParams<T>::create(ps, prefix + ".scan", channels, state);
    ln_weight = ps.constant(prefix + ".norm.weight", {channels}, 1.0);
    ln_bias = ps.constant(prefix + ".norm.bias", {channels}, 0.0);
    out_weight = ps.uniform(prefix + ".out_proj.weight", {channels, channels}, channels);
    out_bias = ps.uniform(prefix + ".out_proj.bias", {channels}, channels);
  }

  /// x [T,C,H,W] -> [T,C,H,W]; the scan runs over all T*H*W tokens in burst order.
  Tensor<T> forward(const Tensor<T>& x, const ScanOptions& opt) const {
    detail::require_rank(x, 4, "BossModule");
    const std::size_t F = x.size(0), H = x.size(2), W = x.size(3);
    auto xz = chunk(linear(to_tokens(x), in_weight, in_bias), 1, 2);
    auto local = from_tokens(xz[0], F, H, W);
    local = silu(conv2d(local, conv_weight, conv_bias, {1, 1, channels}));
    auto seq = burst_flatten(local);
    auto y = layer_norm_last(selective_scan(seq, scan, opt), ln_weight, ln_bias, 1e-5);
    auto out = linear(mul(y, silu(xz[1])), out_weight, out_bias);
    return from_tokens(out, F, H, W);
  }

  std::size_t channels = 0;
  Tensor<T> in_weight, in_bias, conv_weight, conv_bias, ln_weight, ln_bias, out_weight, out_bias;
  SelectiveScanParams<T> scan;
};

/// BOSS module then channel attention, each behind an AdaLN site and a
/// residual with a learnable per-channel scale (zero at init).
template <typename T>
struct BossBlock {
  BossBlock() = default;

  BossBlock(ParameterSet<T>& ps, const std::string& prefix, std::size_t channels, std::size_t state,
            std::size_t reduction, std::size_t d_cc, bool conditioned)
      : norm1(ps, prefix + ".norm1", channels, d_cc, conditioned),
        boss(ps, prefix + ".boss", channels, state),
        norm2(ps, prefix + ".norm2", channels, d_cc, conditioned),
        attention(ps, prefix + ".ca", channels, reduction) {
    scale1 = ps.residual_zero(prefix + ".scale1", {channels}, 1);
    scale2 = ps.residual_zero(prefix + ".scale2", {channels}, 1);
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& v_cc, const ScanOptions& opt) const {
    auto h = add(x, mul_channel(boss.forward(norm1.forward(x, v_cc), opt), scale1));
    return add(h, mul_channel(attention.forward(norm2.forward(h, v_cc)), scale2));
  }

  AdaLayerNorm<T> norm1;
  BossModule<T> boss;
  AdaLayerNorm<T> norm2;
  ChannelAttention<T> attention;
  Tensor<T> scale1, scale2;
};

/// NAFNet block with both normalizations replaced by AdaLN sites.
template <typename T>
struct NafBlock {
  NafBlock() = default;

  NafBlock(ParameterSet<T>& ps, const std::string& prefix, std::size_t channels, std::size_t d_cc, bool conditioned)
      : channels(channels),
        norm1(ps, prefix + ".norm1", channels, d_cc, conditioned),
        norm2(ps, prefix + ".norm2", channels, d_cc, conditioned) {
    if (channels == 0) throw ConfigError("NAFBlock needs a positive channel count");
    const std::size_t C = channels, E = 2 * channels;
    conv1_w = ps.uniform(prefix + ".conv1.weight", {E, C, 1, 1}, C);
    conv1_b = ps.uniform(prefix + ".conv1.bias", {E}, C);
    conv2_w = ps.uniform(prefix + ".conv2.weight", {E, 1, 3, 3}, 9);
    conv2_b = ps.uniform(prefix + ".conv2.bias", {E}, 9);
    sca_w = ps.uniform(prefix + ".sca.weight", {C, C}, C);
    sca_b = ps.uniform(prefix + ".sca.bias", {C}, C);
    conv3_w = ps.residual_zero(prefix + ".conv3.weight", {C, C, 1, 1}, C);
    conv3_b = ps.residual_zero(prefix + ".conv3.bias", {C}, C);
    conv4_w = ps.uniform(prefix + ".conv4.weight", {E, C, 1, 1}, C);
    conv4_b = ps.uniform(prefix + ".conv4.bias", {E}, C);
    conv5_w = ps.residual_zero(prefix + ".conv5.weight", {C, C, 1, 1}, C);
    conv5_b = ps.residual_zero(prefix + ".conv5.bias", {C}, C);
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& v_cc) const {
    const std::size_t E = 2 * channels;
    auto h = conv2d(norm1.forward(x, v_cc), conv1_w, conv1_b);
    h = conv2d(h, conv2_w, conv2_b, {1, 1, E});
    h = simple_gate(h);
    h = mul_channel(h, linear(global_avg_pool(h), sca_w, sca_b));
    auto y = add(x, conv2d(h, conv3_w, conv3_b));

    auto f = conv2d(norm2.forward(y, v_cc), conv4_w, conv4_b);
    f = simple_gate(f);
    return add(y, conv2d(f, conv5_w, conv5_b));
  }

  std::size_t channels = 0;
  AdaLayerNorm<T> norm1, norm2;
  Tensor<T> conv1_w, conv1_b, conv2_w, conv2_b, sca_w, sca_b, conv3_w, conv3_b, conv4_w, conv4_b, conv5_w,
      conv5_b;
};

}  // namespace darkvrai
