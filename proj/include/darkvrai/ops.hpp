#pragma once

// Differentiable operations on Tensor. Reductions and convolution sums use
// double accumulators regardless of the element type.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "darkvrai/tensor.hpp"

namespace darkvrai {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  if (a.dim() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_string(a.shape()));
  }
}

inline double sigmoid_d(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_d(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

/// y = f(x) elementwise with dy/dx = df(x).
template <typename T, typename F, typename D>
Tensor<T> map_unary(const Tensor<T>& x, F f, D df) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = static_cast<T>(f(static_cast<double>(xv[i])));
  return record<T>(x.shape(), std::move(out), {x}, [x, df](std::span<const T> g) {
    auto gx = grad_sink(x);
    const auto xv = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += static_cast<T>(g[i] * df(static_cast<double>(xv[i])));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::record<T>(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g) {
    if (auto ga = detail::grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = detail::grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::record<T>(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g) {
    if (auto ga = detail::grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = detail::grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::record<T>(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g) {
    const auto av = a.data();
    const auto bv = b.data();
    if (auto ga = detail::grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    if (auto gb = detail::grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "div");
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return detail::record<T>(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g) {
    const auto av = a.data();
    const auto bv = b.data();
    if (auto ga = detail::grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    if (auto gb = detail::grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double c) {
  return detail::map_unary(x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, double c) {
  return detail::map_unary(x, [c](double v) { return v * c; }, [c](double) { return c; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, -1.0);
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::map_unary(x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::map_unary(x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::map_unary(x, detail::sigmoid_d, [](double v) {
    const double s = detail::sigmoid_d(v);
    return s * (1.0 - s);
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::map_unary(
      x, [](double v) { return v * detail::sigmoid_d(v); },
      [](double v) {
        const double s = detail::sigmoid_d(v);
        return s + v * s * (1.0 - s);
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::map_unary(x, detail::softplus_d, detail::sigmoid_d);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::map_unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::map_unary(
      x, [](double v) { return std::fabs(v); },
      [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

/// max(x, lo); the gradient is passed only where x > lo.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, double lo) {
  return detail::map_unary(
      x, [lo](double v) { return v > lo ? v : lo; }, [lo](double v) { return v > lo ? 1.0 : 0.0; });
}

/// x^p for x > 0.
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& x, double p) {
  return detail::map_unary(
      x, [p](double v) { return std::pow(v, p); }, [p](double v) { return p * std::pow(v, p - 1.0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return detail::record<T>(Shape{1}, {static_cast<T>(acc)}, {x}, [x](std::span<const T> g) {
    auto gx = detail::grad_sink(x);
    for (auto& v : gx) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return detail::record<T>(Shape{1}, {static_cast<T>(acc / n)}, {x}, [x, n](std::span<const T> g) {
    auto gx = detail::grad_sink(x);
    const T step = static_cast<T>(g[0] / n);
    for (auto& v : gx) v += step;
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::record<T>(std::move(shape), std::move(out), {x}, [x](std::span<const T> g) {
    auto gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_string(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_string(ref) + " and " + shape_string(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];

  std::vector<T> out(shape_numel(out_shape));
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t row = p.shape()[axis] * inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * row, row, out.begin() + o * out_row + offset);
    offset += row;
  }
  return detail::record<T>(out_shape, std::move(out), parts, [parts, outer, inner, out_row, axis](std::span<const T> g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t row = p.shape()[axis] * inner;
      if (auto gp = detail::grad_sink(p); !gp.empty()) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < row; ++i) gp[o * row + i] += g[o * out_row + offset + i];
      }
      offset += row;
    }
  });
}

/// Splits along an axis into consecutive pieces of the given extents.
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("split: axis out of range for " + shape_string(s));
  std::size_t total = 0;
  for (auto n : sizes) total += n;
  if (total != s[axis]) {
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis has extent " +
                     std::to_string(s[axis]));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t in_row = s[axis] * inner;

  std::vector<Tensor<T>> result;
  std::size_t offset = 0;
  const auto xv = x.data();
  for (auto n : sizes) {
    Shape ps = s;
    ps[axis] = n;
    const std::size_t row = n * inner;
    std::vector<T> out(outer * row);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(xv.begin() + o * in_row + offset, row, out.begin() + o * row);
    result.push_back(detail::record<T>(ps, std::move(out), {x}, [x, outer, row, in_row, offset](std::span<const T> g) {
      auto gx = detail::grad_sink(x);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < row; ++i) gx[o * in_row + offset + i] += g[o * row + i];
    }));
    offset += row;
  }
  return result;
}

/// Equal split into `parts` pieces.
template <typename T>
std::vector<Tensor<T>> chunk(const Tensor<T>& x, std::size_t axis, std::size_t parts) {
  if (axis >= x.dim() || parts == 0 || x.size(axis) % parts != 0) {
    throw ShapeError("chunk: cannot split " + shape_string(x.shape()) + " into " + std::to_string(parts) +
                     " equal parts");
  }
  return split(x, axis, std::vector<std::size_t>(parts, x.size(axis) / parts));
}

// ---------------------------------------------------------------------------
// Channel broadcasting on [B,C,...]; v is [C], [1,C] or [B,C].

namespace detail {

struct ChannelLayout {
  std::size_t batch, channels, spatial;
  bool per_sample;
};

template <typename T>
ChannelLayout channel_layout(const Tensor<T>& x, const Tensor<T>& v, const char* op) {
  if (x.dim() < 2) throw ShapeError(std::string(op) + ": input must be at least [B,C], got " + shape_string(x.shape()));
  const std::size_t b = x.size(0);
  const std::size_t c = x.size(1);
  const std::size_t spatial = x.numel() / std::max<std::size_t>(b * c, 1);
  const Shape& vs = v.shape();
  if (vs == Shape{c} || vs == Shape{1, c}) return {b, c, spatial, false};
  if (vs == Shape{b, c}) return {b, c, spatial, true};
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(vs) + " over channels of " +
                   shape_string(x.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& v) {
  const auto L = detail::channel_layout(x, v, "add_channel");
  const auto xv = x.data();
  const auto vv = v.data();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t c = 0; c < L.channels; ++c) {
      const T add = vv[(L.per_sample ? b * L.channels : 0) + c];
      const std::size_t base = (b * L.channels + c) * L.spatial;
      for (std::size_t s = 0; s < L.spatial; ++s) out[base + s] = xv[base + s] + add;
    }
  return detail::record<T>(x.shape(), std::move(out), {x, v}, [x, v, L](std::span<const T> g) {
    if (auto gx = detail::grad_sink(x); !gx.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (auto gv = detail::grad_sink(v); !gv.empty()) {
      for (std::size_t b = 0; b < L.batch; ++b)
        for (std::size_t c = 0; c < L.channels; ++c) {
          double acc = 0.0;
          const std::size_t base = (b * L.channels + c) * L.spatial;
          for (std::size_t s = 0; s < L.spatial; ++s) acc += g[base + s];
          gv[(L.per_sample ? b * L.channels : 0) + c] += static_cast<T>(acc);
        }
    }
  });
}

template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& v) {
  const auto L = detail::channel_layout(x, v, "mul_channel");
  const auto xv = x.data();
  const auto vv = v.data();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t c = 0; c < L.channels; ++c) {
      const T m = vv[(L.per_sample ? b * L.channels : 0) + c];
      const std::size_t base = (b * L.channels + c) * L.spatial;
      for (std::size_t s = 0; s < L.spatial; ++s) out[base + s] = xv[base + s] * m;
    }
  return detail::record<T>(x.shape(), std::move(out), {x, v}, [x, v, L](std::span<const T> g) {
    const auto xv = x.data();
    const auto vv = v.data();
    auto gx = detail::grad_sink(x);
    auto gv = detail::grad_sink(v);
    for (std::size_t b = 0; b < L.batch; ++b)
      for (std::size_t c = 0; c < L.channels; ++c) {
        const std::size_t vi = (L.per_sample ? b * L.channels : 0) + c;
        const std::size_t base = (b * L.channels + c) * L.spatial;
        if (!gx.empty())
          for (std::size_t s = 0; s < L.spatial; ++s) gx[base + s] += g[base + s] * vv[vi];
        if (!gv.empty()) {
          double acc = 0.0;
          for (std::size_t s = 0; s < L.spatial; ++s) acc += static_cast<double>(g[base + s]) * xv[base + s];
          gv[vi] += static_cast<T>(acc);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Pooling

/// [B,C,H,W] -> [B,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const std::size_t bc = x.size(0) * x.size(1);
  const std::size_t hw = x.size(2) * x.size(3);
  const auto xv = x.data();
  std::vector<T> out(bc);
  for (std::size_t i = 0; i < bc; ++i) {
    double acc = 0.0;
    for (std::size_t s = 0; s < hw; ++s) acc += xv[i * hw + s];
    out[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return detail::record<T>(Shape{x.size(0), x.size(1)}, std::move(out), {x}, [x, bc, hw](std::span<const T> g) {
    auto gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < bc; ++i) {
      const T step = static_cast<T>(g[i] / static_cast<double>(hw));
      for (std::size_t s = 0; s < hw; ++s) gx[i * hw + s] += step;
    }
  });
}

/// [B,C,H,W] -> [B,C]; gradient goes to the first maximum.
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_max_pool");
  const std::size_t bc = x.size(0) * x.size(1);
  const std::size_t hw = x.size(2) * x.size(3);
  const auto xv = x.data();
  std::vector<T> out(bc);
  auto arg = std::make_shared<std::vector<std::size_t>>(bc);
  for (std::size_t i = 0; i < bc; ++i) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < hw; ++s)
      if (xv[i * hw + s] > xv[i * hw + best]) best = s;
    (*arg)[i] = best;
    out[i] = xv[i * hw + best];
  }
  return detail::record<T>(Shape{x.size(0), x.size(1)}, std::move(out), {x}, [x, arg, hw](std::span<const T> g) {
    auto gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i * hw + (*arg)[i]] += g[i];
  });
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  detail::require_rank(x, 4, "avg_pool2x2");
  const std::size_t bc = x.size(0) * x.size(1);
  const std::size_t H = x.size(2), W = x.size(3);
  const std::size_t OH = H / 2, OW = W / 2;
  if (OH == 0 || OW == 0) throw ShapeError("avg_pool2x2: input too small " + shape_string(x.shape()));
  const auto xv = x.data();
  std::vector<T> out(bc * OH * OW);
  for (std::size_t i = 0; i < bc; ++i)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const std::size_t p = i * H * W + 2 * oh * W + 2 * ow;
        const double s = static_cast<double>(xv[p]) + xv[p + 1] + xv[p + W] + xv[p + W + 1];
        out[(i * OH + oh) * OW + ow] = static_cast<T>(0.25 * s);
      }
  return detail::record<T>(Shape{x.size(0), x.size(1), OH, OW}, std::move(out), {x},
                           [x, bc, H, W, OH, OW](std::span<const T> g) {
                             auto gx = detail::grad_sink(x);
                             for (std::size_t i = 0; i < bc; ++i)
                               for (std::size_t oh = 0; oh < OH; ++oh)
                                 for (std::size_t ow = 0; ow < OW; ++ow) {
                                   const T q = static_cast<T>(0.25 * g[(i * OH + oh) * OW + ow]);
                                   const std::size_t p = i * H * W + 2 * oh * W + 2 * ow;
                                   gx[p] += q;
                                   gx[p + 1] += q;
                                   gx[p + W] += q;
                                   gx[p + W + 1] += q;
                                 }
                           });
}

// ---------------------------------------------------------------------------
// Dense layers

/// a[M,K] x b[K,N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t M = a.size(0), K = a.size(1), N = b.size(1);
  if (b.size(0) != K) {
    throw ShapeError("matmul: inner extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(M * N);
  std::vector<double> acc(N);
  for (std::size_t m = 0; m < M; ++m) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const double s = av[m * K + k];
      for (std::size_t n = 0; n < N; ++n) acc[n] += s * bv[k * N + n];
    }
    for (std::size_t n = 0; n < N; ++n) out[m * N + n] = static_cast<T>(acc[n]);
  }
  return detail::record<T>(Shape{M, N}, std::move(out), {a, b}, [a, b, M, K, N](std::span<const T> g) {
    const auto av = a.data();
    const auto bv = b.data();
    if (auto ga = detail::grad_sink(a); !ga.empty())
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (std::size_t n = 0; n < N; ++n) acc += static_cast<double>(g[m * N + n]) * bv[k * N + n];
          ga[m * K + k] += static_cast<T>(acc);
        }
    if (auto gb = detail::grad_sink(b); !gb.empty())
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t n = 0; n < N; ++n) {
          double acc = 0.0;
          for (std::size_t m = 0; m < M; ++m) acc += static_cast<double>(av[m * K + k]) * g[m * N + n];
          gb[k * N + n] += static_cast<T>(acc);
        }
  });
}

/// Affine map over the last axis: x[..., Din] -> [..., Dout] with weight [Dout, Din].
/// `bias` may be an undefined tensor.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank(weight, 2, "linear weight");
  if (x.dim() == 0) throw ShapeError("linear: input has no axes");
  const std::size_t Dout = weight.size(0), Din = weight.size(1);
  if (x.shape().back() != Din) {
    throw ShapeError("linear: input last extent " + std::to_string(x.shape().back()) +
                     " does not match weight in-features " + std::to_string(Din));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{Dout}) {
    throw ShapeError("linear: bias shape " + shape_string(bias.shape()) + " does not match out-features " +
                     std::to_string(Dout));
  }
  const std::size_t R = x.numel() / Din;
  const auto xv = x.data();
  const auto wv = weight.data();
  std::vector<T> out(R * Dout);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t o = 0; o < Dout; ++o) {
      double acc = has_bias ? static_cast<double>(bias[o]) : 0.0;
      for (std::size_t i = 0; i < Din; ++i) acc += static_cast<double>(xv[r * Din + i]) * wv[o * Din + i];
      out[r * Dout + o] = static_cast<T>(acc);
    }
  Shape out_shape = x.shape();
  out_shape.back() = Dout;
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::record<T>(std::move(out_shape), std::move(out), inputs,
                           [x, weight, bias, has_bias, R, Din, Dout](std::span<const T> g) {
                             const auto xv = x.data();
                             const auto wv = weight.data();
                             if (auto gx = detail::grad_sink(x); !gx.empty())
                               for (std::size_t r = 0; r < R; ++r)
                                 for (std::size_t i = 0; i < Din; ++i) {
                                   double acc = 0.0;
                                   for (std::size_t o = 0; o < Dout; ++o)
                                     acc += static_cast<double>(g[r * Dout + o]) * wv[o * Din + i];
                                   gx[r * Din + i] += static_cast<T>(acc);
                                 }
                             if (auto gw = detail::grad_sink(weight); !gw.empty())
                               for (std::size_t o = 0; o < Dout; ++o)
                                 for (std::size_t i = 0; i < Din; ++i) {
                                   double acc = 0.0;
                                   for (std::size_t r = 0; r < R; ++r)
                                     acc += static_cast<double>(g[r * Dout + o]) * xv[r * Din + i];
                                   gw[o * Din + i] += static_cast<T>(acc);
                                 }
                             if (has_bias)
                               if (auto gb = detail::grad_sink(bias); !gb.empty())
                                 for (std::size_t o = 0; o < Dout; ++o) {
                                   double acc = 0.0;
                                   for (std::size_t r = 0; r < R; ++r) acc += g[r * Dout + o];
                                   gb[o] += static_cast<T>(acc);
                                 }
                           });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Direct 2-D cross-correlation. input [B,Cin,H,W], weight [Cout,Cin/groups,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {},
                 Conv2dOptions opt = {}) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(weight, 4, "conv2d weight");
  const std::size_t B = input.size(0), Cin = input.size(1), H = input.size(2), W = input.size(3);
  const std::size_t Cout = weight.size(0), Cig = weight.size(1), KH = weight.size(2), KW = weight.size(3);
  const std::size_t G = opt.groups, S = opt.stride, P = opt.padding;
  if (G == 0 || S == 0) throw ShapeError("conv2d: stride and groups must be positive");
  if (Cin % G != 0 || Cout % G != 0) {
    throw ShapeError("conv2d: channels (in " + std::to_string(Cin) + ", out " + std::to_string(Cout) +
                     ") not divisible by groups " + std::to_string(G));
  }
  if (Cig != Cin / G) {
    throw ShapeError("conv2d: weight expects " + std::to_string(Cig) + " input channels per group, input provides " +
                     std::to_string(Cin / G));
  }
  if (H + 2 * P < KH || W + 2 * P < KW) {
    throw ShapeError("conv2d: kernel " + std::to_string(KH) + "x" + std::to_string(KW) + " does not fit padded input " +
                     shape_string(input.shape()));
  }
  const std::size_t OH = (H + 2 * P - KH) / S + 1;
  const std::size_t OW = (W + 2 * P - KW) / S + 1;
  if (OH == 0 || OW == 0) throw ShapeError("conv2d: zero-size output");
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{Cout}) throw ShapeError("conv2d: bias shape " + shape_string(bias.shape()));
  const std::size_t Cog = Cout / G;

  // Valid output range along one axis for kernel tap k.
  auto range = [S, P](std::size_t k, std::size_t in, std::size_t out_n) {
    const long lo_num = static_cast<long>(P) - static_cast<long>(k);
    long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(S) - 1) / static_cast<long>(S);
    const long hi_num = static_cast<long>(in) - 1 + static_cast<long>(P) - static_cast<long>(k);
    long hi = hi_num < 0 ? -1 : hi_num / static_cast<long>(S);
    hi = std::min<long>(hi, static_cast<long>(out_n) - 1);
    return std::pair<long, long>{lo, hi};
  };

  const auto xv = input.data();
  const auto wv = weight.data();
  std::vector<T> out(B * Cout * OH * OW);
  std::vector<double> acc(OH * OW);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co) {
      const std::size_t g = co / Cog;
      std::fill(acc.begin(), acc.end(), has_bias ? static_cast<double>(bias[co]) : 0.0);
      for (std::size_t ci = 0; ci < Cig; ++ci) {
        const T* plane = xv.data() + (b * Cin + g * Cig + ci) * H * W;
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const auto [oh0, oh1] = range(kh, H, OH);
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const auto [ow0, ow1] = range(kw, W, OW);
            const double w = wv[((co * Cig + ci) * KH + kh) * KW + kw];
            for (long oh = oh0; oh <= oh1; ++oh) {
              const std::size_t ih = oh * S + kh - P;
              const T* row = plane + ih * W;
              double* arow = acc.data() + oh * OW;
              for (long ow = ow0; ow <= ow1; ++ow) arow[ow] += w * row[ow * S + kw - P];
            }
          }
        }
      }
      T* dst = out.data() + (b * Cout + co) * OH * OW;
      for (std::size_t i = 0; i < OH * OW; ++i) dst[i] = static_cast<T>(acc[i]);
    }

  std::vector<Tensor<T>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::record<T>(
      Shape{B, Cout, OH, OW}, std::move(out), inputs,
      [=](std::span<const T> gout) {
        const auto xv = input.data();
        const auto wv = weight.data();
        auto gx = detail::grad_sink(input);
        auto gw = detail::grad_sink(weight);
        std::vector<double> gxd(gx.empty() ? 0 : gx.size(), 0.0);
        std::vector<double> gwd(gw.empty() ? 0 : gw.size(), 0.0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Cout; ++co) {
            const std::size_t g = co / Cog;
            const T* go = gout.data() + (b * Cout + co) * OH * OW;
            for (std::size_t ci = 0; ci < Cig; ++ci) {
              const std::size_t plane_off = (b * Cin + g * Cig + ci) * H * W;
              for (std::size_t kh = 0; kh < KH; ++kh) {
                const auto [oh0, oh1] = range(kh, H, OH);
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const auto [ow0, ow1] = range(kw, W, OW);
                  const std::size_t widx = ((co * Cig + ci) * KH + kh) * KW + kw;
                  const double w = wv[widx];
                  double wacc = 0.0;
                  for (long oh = oh0; oh <= oh1; ++oh) {
                    const std::size_t ih = oh * S + kh - P;
                    const std::size_t row_off = plane_off + ih * W;
                    for (long ow = ow0; ow <= ow1; ++ow) {
                      const double gval = go[oh * OW + ow];
                      const std::size_t iw = ow * S + kw - P;
                      if (!gxd.empty()) gxd[row_off + iw] += w * gval;
                      wacc += gval * xv[row_off + iw];
                    }
                  }
                  if (!gwd.empty()) gwd[widx] += wacc;
                }
              }
            }
          }
        for (std::size_t i = 0; i < gxd.size(); ++i) gx[i] += static_cast<T>(gxd[i]);
        for (std::size_t i = 0; i < gwd.size(); ++i) gw[i] += static_cast<T>(gwd[i]);
        if (has_bias)
          if (auto gb = detail::grad_sink(bias); !gb.empty())
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t co = 0; co < Cout; ++co) {
                double a = 0.0;
                const T* go = gout.data() + (b * Cout + co) * OH * OW;
                for (std::size_t i = 0; i < OH * OW; ++i) a += go[i];
                gb[co] += static_cast<T>(a);
              }
      });
}

// ---------------------------------------------------------------------------
// Resampling and rearrangement

/// Bilinear resize of [B,C,H,W] with half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 4, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: zero-size output");
  const std::size_t bc = x.size(0) * x.size(1);
  const std::size_t H = x.size(2), W = x.size(3);
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      if (src < 0) src = 0;
      std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
      std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(H, out_h));
  auto tx = std::make_shared<std::vector<Tap>>(taps(W, out_w));
  const auto xv = x.data();
  std::vector<T> out(bc * out_h * out_w);
  for (std::size_t i = 0; i < bc; ++i)
    for (std::size_t oh = 0; oh < out_h; ++oh) {
      const Tap& a = (*ty)[oh];
      for (std::size_t ow = 0; ow < out_w; ++ow) {
        const Tap& b = (*tx)[ow];
        const T* p = xv.data() + i * H * W;
        const double v = (1 - a.f) * ((1 - b.f) * p[a.i0 * W + b.i0] + b.f * p[a.i0 * W + b.i1]) +
                         a.f * ((1 - b.f) * p[a.i1 * W + b.i0] + b.f * p[a.i1 * W + b.i1]);
        out[(i * out_h + oh) * out_w + ow] = static_cast<T>(v);
      }
    }
  return detail::record<T>(Shape{x.size(0), x.size(1), out_h, out_w}, std::move(out), {x},
                           [x, ty, tx, bc, H, W, out_h, out_w](std::span<const T> g) {
                             auto gx = detail::grad_sink(x);
                             for (std::size_t i = 0; i < bc; ++i)
                               for (std::size_t oh = 0; oh < out_h; ++oh) {
                                 const Tap& a = (*ty)[oh];
                                 for (std::size_t ow = 0; ow < out_w; ++ow) {
                                   const Tap& b = (*tx)[ow];
                                   const double gv = g[(i * out_h + oh) * out_w + ow];
                                   T* p = gx.data() + i * H * W;
                                   p[a.i0 * W + b.i0] += static_cast<T>(gv * (1 - a.f) * (1 - b.f));
                                   p[a.i0 * W + b.i1] += static_cast<T>(gv * (1 - a.f) * b.f);
                                   p[a.i1 * W + b.i0] += static_cast<T>(gv * a.f * (1 - b.f));
                                   p[a.i1 * W + b.i1] += static_cast<T>(gv * a.f * b.f);
                                 }
                               }
                           });
}

/// [B,C,H,W] -> [B,4C,H/2,W/2]; output channel 4c + 2dy + dx holds input (2h+dy, 2w+dx).
template <typename T>
Tensor<T> pixel_unshuffle2(const Tensor<T>& x) {
  detail::require_rank(x, 4, "pixel_unshuffle2");
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (H % 2 || W % 2) throw ShapeError("pixel_unshuffle2: spatial extents must be even, got " + shape_string(x.shape()));
  const std::size_t h = H / 2, w = W / 2;
  auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t q = 0; q < 4; ++q)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t o = (((b * C + c) * 4 + q) * h + i) * w + j;
            (*index)[o] = ((b * C + c) * H + 2 * i + q / 2) * W + 2 * j + q % 2;
          }
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[(*index)[o]];
  return detail::record<T>(Shape{B, 4 * C, h, w}, std::move(out), {x}, [x, index](std::span<const T> g) {
    auto gx = detail::grad_sink(x);
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*index)[o]] += g[o];
  });
}

/// Inverse of pixel_unshuffle2: [B,4C,h,w] -> [B,C,2h,2w].
template <typename T>
Tensor<T> pixel_shuffle2(const Tensor<T>& x) {
  detail::require_rank(x, 4, "pixel_shuffle2");
  const std::size_t B = x.size(0), C4 = x.size(1), h = x.size(2), w = x.size(3);
  if (C4 % 4) throw ShapeError("pixel_shuffle2: channels must be a multiple of 4, got " + shape_string(x.shape()));
  const std::size_t C = C4 / 4, H = 2 * h, W = 2 * w;
  auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t q = 0; q < 4; ++q)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t src = (((b * C + c) * 4 + q) * h + i) * w + j;
            (*index)[((b * C + c) * H + 2 * i + q / 2) * W + 2 * j + q % 2] = src;
          }
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[(*index)[o]];
  return detail::record<T>(Shape{B, C, H, W}, std::move(out), {x}, [x, index](std::span<const T> g) {
    auto gx = detail::grad_sink(x);
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*index)[o]] += g[o];
  });
}

/// [T,C,H,W] -> [T*H*W, C]; token t*H*W + h*W + w is frame t, row h, column w.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  detail::require_rank(x, 4, "to_tokens");
  const std::size_t F = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < HW; ++s) out[(f * HW + s) * C + c] = xv[(f * C + c) * HW + s];
  return detail::record<T>(Shape{F * HW, C}, std::move(out), {x}, [x, F, C, HW](std::span<const T> g) {
    auto gx = detail::grad_sink(x);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < HW; ++s) gx[(f * C + c) * HW + s] += g[(f * HW + s) * C + c];
  });
}

/// Inverse of to_tokens.
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& x, std::size_t frames, std::size_t height, std::size_t width) {
  detail::require_rank(x, 2, "from_tokens");
  const std::size_t HW = height * width, C = x.size(1);
  if (x.size(0) != frames * HW) {
    throw ShapeError("from_tokens: " + std::to_string(x.size(0)) + " tokens do not match layout " +
                     std::to_string(frames) + "x" + std::to_string(height) + "x" + std::to_string(width));
  }
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < HW; ++s) out[(f * C + c) * HW + s] = xv[(f * HW + s) * C + c];
  return detail::record<T>(Shape{frames, C, height, width}, std::move(out), {x},
                           [x, frames, C, HW](std::span<const T> g) {
                             auto gx = detail::grad_sink(x);
                             for (std::size_t f = 0; f < frames; ++f)
                               for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t s = 0; s < HW; ++s)
                                   gx[(f * HW + s) * C + c] += g[(f * C + c) * HW + s];
                           });
}

/// Samples x[B,C,H,W] at (w + flow[b,0], h + flow[b,1]) bilinearly; coordinates
/// are clamped to the image border. A zero flow reproduces x exactly.
template <typename T>
Tensor<T> warp(const Tensor<T>& x, const Tensor<T>& flow) {
  detail::require_rank(x, 4, "warp");
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (flow.shape() != Shape{B, 2, H, W}) {
    throw ShapeError("warp: flow must be " + shape_string(Shape{B, 2, H, W}) + ", got " + shape_string(flow.shape()));
  }
  struct Sample {
    std::size_t x0, x1, y0, y1;
    double fx, fy;
    bool inside_x, inside_y;
  };
  const std::size_t HW = H * W;
  auto samples = std::make_shared<std::vector<Sample>>(B * HW);
  const auto fv = flow.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        const std::size_t p = h * W + w;
        const double sx_raw = static_cast<double>(w) + fv[(b * 2 + 0) * HW + p];
        const double sy_raw = static_cast<double>(h) + fv[(b * 2 + 1) * HW + p];
        const double sx = std::clamp(sx_raw, 0.0, static_cast<double>(W - 1));
        const double sy = std::clamp(sy_raw, 0.0, static_cast<double>(H - 1));
        Sample s;
        s.x0 = static_cast<std::size_t>(std::floor(sx));
        s.y0 = static_cast<std::size_t>(std::floor(sy));
        s.x1 = std::min(s.x0 + 1, W - 1);
        s.y1 = std::min(s.y0 + 1, H - 1);
        s.fx = sx - static_cast<double>(s.x0);
        s.fy = sy - static_cast<double>(s.y0);
        s.inside_x = sx_raw > 0.0 && sx_raw < static_cast<double>(W - 1);
        s.inside_y = sy_raw > 0.0 && sy_raw < static_cast<double>(H - 1);
        (*samples)[b * HW + p] = s;
      }
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.data() + (b * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) {
        const Sample& s = (*samples)[b * HW + p];
        const double v = (1 - s.fy) * ((1 - s.fx) * src[s.y0 * W + s.x0] + s.fx * src[s.y0 * W + s.x1]) +
                         s.fy * ((1 - s.fx) * src[s.y1 * W + s.x0] + s.fx * src[s.y1 * W + s.x1]);
        out[(b * C + c) * HW + p] = static_cast<T>(v);
      }
    }
  return detail::record<T>(x.shape(), std::move(out), {x, flow}, [x, flow, samples, B, C, W, HW](std::span<const T> g) {
    const auto xv = x.data();
    auto gx = detail::grad_sink(x);
    auto gf = detail::grad_sink(flow);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* src = xv.data() + (b * C + c) * HW;
        for (std::size_t p = 0; p < HW; ++p) {
          const Sample& s = (*samples)[b * HW + p];
          const double gv = g[(b * C + c) * HW + p];
          if (!gx.empty()) {
            T* dst = gx.data() + (b * C + c) * HW;
            dst[s.y0 * W + s.x0] += static_cast<T>(gv * (1 - s.fy) * (1 - s.fx));
            dst[s.y0 * W + s.x1] += static_cast<T>(gv * (1 - s.fy) * s.fx);
            dst[s.y1 * W + s.x0] += static_cast<T>(gv * s.fy * (1 - s.fx));
            dst[s.y1 * W + s.x1] += static_cast<T>(gv * s.fy * s.fx);
          }
          if (!gf.empty()) {
            const double v00 = src[s.y0 * W + s.x0], v01 = src[s.y0 * W + s.x1];
            const double v10 = src[s.y1 * W + s.x0], v11 = src[s.y1 * W + s.x1];
            if (s.inside_x) gf[(b * 2 + 0) * HW + p] += static_cast<T>(gv * ((1 - s.fy) * (v01 - v00) + s.fy * (v11 - v10)));
            if (s.inside_y) gf[(b * 2 + 1) * HW + p] += static_cast<T>(gv * ((1 - s.fx) * (v10 - v00) + s.fx * (v11 - v01)));
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Layer normalization over the last axis with elementwise affine weight/bias [D].
template <typename T>
Tensor<T> layer_norm_last(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, double eps) {
  const std::size_t D = x.shape().back();
  if (weight.shape() != Shape{D} || bias.shape() != Shape{D}) {
    throw ShapeError("layer_norm_last: affine parameters must be [" + std::to_string(D) + "]");
  }
  const std::size_t R = x.numel() / D;
  const auto xv = x.data();
  const auto wv = weight.data();
  const auto bv = bias.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(R);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < R; ++r) {
    double mu = 0.0;
    for (std::size_t d = 0; d < D; ++d) mu += xv[r * D + d];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      const double c = xv[r * D + d] - mu;
      var += c * c;
    }
    var /= static_cast<double>(D);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t d = 0; d < D; ++d) {
      const double xh = (xv[r * D + d] - mu) * is;
      (*xhat)[r * D + d] = xh;
      out[r * D + d] = static_cast<T>(wv[d] * xh + bv[d]);
    }
  }
  return detail::record<T>(x.shape(), std::move(out), {x, weight, bias},
                           [x, weight, bias, xhat, inv_std, R, D](std::span<const T> g) {
                             const auto wv = weight.data();
                             auto gx = detail::grad_sink(x);
                             auto gw = detail::grad_sink(weight);
                             auto gb = detail::grad_sink(bias);
                             std::vector<double> gwd(D, 0.0), gbd(D, 0.0);
                             for (std::size_t r = 0; r < R; ++r) {
                               double m1 = 0.0, m2 = 0.0;
                               for (std::size_t d = 0; d < D; ++d) {
                                 const double gy = g[r * D + d];
                                 const double xh = (*xhat)[r * D + d];
                                 const double dxh = gy * wv[d];
                                 m1 += dxh;
                                 m2 += dxh * xh;
                                 gwd[d] += gy * xh;
                                 gbd[d] += gy;
                               }
                               m1 /= static_cast<double>(D);
                               m2 /= static_cast<double>(D);
                               if (!gx.empty())
                                 for (std::size_t d = 0; d < D; ++d) {
                                   const double xh = (*xhat)[r * D + d];
                                   const double dxh = g[r * D + d] * wv[d];
                                   gx[r * D + d] += static_cast<T>((*inv_std)[r] * (dxh - m1 - xh * m2));
                                 }
                             }
                             if (!gw.empty())
                               for (std::size_t d = 0; d < D; ++d) gw[d] += static_cast<T>(gwd[d]);
                             if (!gb.empty())
                               for (std::size_t d = 0; d < D; ++d) gb[d] += static_cast<T>(gbd[d]);
                           });
}

/// Adaptive layer normalization of x[B,C,...]: statistics per sample over all
/// of (C,H,W), then channel-wise gain gamma and bias beta ([B,C] or [1,C]).
template <typename T>
Tensor<T> ada_ln(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (x.dim() < 2) throw ShapeError("ada_ln: input must be [B,C,...], got " + shape_string(x.shape()));
  const std::size_t B = x.size(0), C = x.size(1);
  const std::size_t S = x.numel() / (B * C);
  const Shape per_sample{B, C}, shared{1, C};
  auto valid = [&](const Tensor<T>& t) { return t.shape() == per_sample || t.shape() == shared; };
  if (!valid(gamma) || !valid(beta)) {
    throw ShapeError("ada_ln: gamma/beta must be [B,C] or [1,C] for input " + shape_string(x.shape()) + ", got " +
                     shape_string(gamma.shape()) + " / " + shape_string(beta.shape()));
  }
  if (!(eps > 0)) throw ConfigError("ada_ln: epsilon must be positive");
  const bool ps = gamma.shape() == per_sample && B != 1;
  const bool ps_beta = beta.shape() == per_sample && B != 1;
  const std::size_t n = C * S;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(B);
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < B; ++b) {
    const T* xs = xv.data() + b * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += xs[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = xs[i] - mu;
      var += c * c;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[b] = is;
    for (std::size_t c = 0; c < C; ++c) {
      const double gm = gv[(ps ? b * C : 0) + c];
      const double bt = bv[(ps_beta ? b * C : 0) + c];
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = b * n + c * S + s;
        const double xh = (xv[i] - mu) * is;
        (*xhat)[i] = xh;
        out[i] = static_cast<T>(gm * xh + bt);
      }
    }
  }
  return detail::record<T>(
      x.shape(), std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, B, C, S, n, ps, ps_beta](std::span<const T> g) {
        const auto gv = gamma.data();
        auto gx = detail::grad_sink(x);
        auto gg = detail::grad_sink(gamma);
        auto gb = detail::grad_sink(beta);
        for (std::size_t b = 0; b < B; ++b) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t pi = (ps ? b * C : 0) + c;
            const double gm = gv[pi];
            double sg = 0.0, sgx = 0.0;
            for (std::size_t s = 0; s < S; ++s) {
              const std::size_t i = b * n + c * S + s;
              const double gy = g[i];
              sg += gy;
              sgx += gy * (*xhat)[i];
            }
            m1 += gm * sg;
            m2 += gm * sgx;
            if (!gg.empty()) gg[pi] += static_cast<T>(sgx);
            if (!gb.empty()) gb[(ps_beta ? b * C : 0) + c] += static_cast<T>(sg);
          }
          if (gx.empty()) continue;
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          for (std::size_t c = 0; c < C; ++c) {
            const double gm = gv[(ps ? b * C : 0) + c];
            for (std::size_t s = 0; s < S; ++s) {
              const std::size_t i = b * n + c * S + s;
              gx[i] += static_cast<T>((*inv_std)[b] * (g[i] * gm - m1 - (*xhat)[i] * m2));
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Composites

/// NAFNet SimpleGate: [B,2C,...] split in channel halves a, b -> a * b.
template <typename T>
Tensor<T> simple_gate(const Tensor<T>& x) {
  auto halves = chunk(x, 1, 2);
  return mul(halves[0], halves[1]);
}

/// Repeats a [1,...] tensor n times along axis 0.
template <typename T>
Tensor<T> repeat_batch(const Tensor<T>& x, std::size_t n) {
  if (x.dim() == 0 || x.size(0) != 1) throw ShapeError("repeat_batch: leading extent must be 1, got " + shape_string(x.shape()));
  return concat(std::vector<Tensor<T>>(n, x), 0);
}

}  // namespace darkvrai
