#pragma once

// Losses and image-quality metrics on the mosaicked plane. Images are any
// tensor whose last two axes are (H, W); leading axes are treated as a batch
// of single-channel images. ssim, ms_ssim and the losses are differentiable.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "darkvrai/error.hpp"
#include "darkvrai/ops.hpp"
#include "darkvrai/tensor.hpp"

namespace darkvrai {

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr double kPsnrCap = 100.0;

namespace detail {

inline void require_same_image_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  if (a.size() < 2) throw ShapeError(std::string(op) + ": need at least [H,W], got " + shape_string(a));
}

template <typename T>
Tensor<T> as_image_batch(const Tensor<T>& x) {
  const std::size_t h = x.size(x.dim() - 2), w = x.size(x.dim() - 1);
  return reshape(x, Shape{x.numel() / (h * w), 1, h, w});
}

/// Largest odd window not exceeding the requested size or the image.
inline std::size_t fitted_window(std::size_t requested, std::size_t h, std::size_t w) {
  std::size_t k = std::min({requested, h, w});
  if (k % 2 == 0) --k;
  return std::max<std::size_t>(k, 1);
}

inline std::vector<double> gaussian_taps(std::size_t k, double sigma) {
  std::vector<double> g(k);
  const double c = static_cast<double>(k / 2);
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += g[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
  for (auto& v : g) v /= s;
  return g;
}

/// Separable Gaussian filter, valid positions only.
template <typename T>
Tensor<T> gaussian_filter(const Tensor<T>& x, std::size_t k, double sigma) {
  const auto taps = gaussian_taps(k, sigma);
  std::vector<T> t(taps.begin(), taps.end());
  auto rows = conv2d(x, Tensor<T>({1, 1, k, 1}, t));
  return conv2d(rows, Tensor<T>({1, 1, 1, k}, t));
}

/// SSIM and contrast-structure maps over valid window positions.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> ssim_maps(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& opt) {
  const std::size_t k = fitted_window(opt.window, x.size(2), x.size(3));
  const double c1 = (opt.k1 * opt.data_range) * (opt.k1 * opt.data_range);
  const double c2 = (opt.k2 * opt.data_range) * (opt.k2 * opt.data_range);
  auto mu_x = gaussian_filter(x, k, opt.sigma);
  auto mu_y = gaussian_filter(y, k, opt.sigma);
  auto mu_xx = mul(mu_x, mu_x), mu_yy = mul(mu_y, mu_y), mu_xy = mul(mu_x, mu_y);
  auto s_xx = sub(gaussian_filter(mul(x, x), k, opt.sigma), mu_xx);
  auto s_yy = sub(gaussian_filter(mul(y, y), k, opt.sigma), mu_yy);
  auto s_xy = sub(gaussian_filter(mul(x, y), k, opt.sigma), mu_xy);
  auto cs = div(add_scalar(mul_scalar(s_xy, 2.0), c2), add_scalar(add(s_xx, s_yy), c2));
  auto lum = div(add_scalar(mul_scalar(mu_xy, 2.0), c1), add_scalar(add(mu_xx, mu_yy), c1));
  return {mul(lum, cs), cs};
}

}  // namespace detail

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_loss: shape mismatch " + shape_string(pred.shape()) + " vs " + shape_string(target.shape()));
  }
  return mean(abs(sub(pred, target)));
}

/// Mean Gaussian-window SSIM. The window shrinks to the largest odd size that
/// fits images smaller than 11 pixels.
template <typename T>
Tensor<T> ssim(const Tensor<T>& pred, const Tensor<T>& target, const SsimOptions& opt = {}) {
  detail::require_same_image_shape(pred.shape(), target.shape(), "ssim");
  return mean(detail::ssim_maps(detail::as_image_batch(pred), detail::as_image_batch(target), opt).first);
}

/// Default scale count: min(5, floor(log2(min(H, W) / 8))), at least 1.
inline std::size_t ms_ssim_scales(std::size_t h, std::size_t w) {
  const double m = static_cast<double>(std::min(h, w)) / 8.0;
  const int s = m >= 2.0 ? static_cast<int>(std::floor(std::log2(m))) : 1;
  return static_cast<std::size_t>(std::clamp(s, 1, 5));
}

/// Renormalized exponents for the first `scales` entries of the standard set.
inline std::vector<double> ms_ssim_weights(std::size_t scales) {
  if (scales == 0 || scales > kMsSsimWeights.size()) throw ConfigError("ms_ssim: scales must be in [1, 5]");
  std::vector<double> w(kMsSsimWeights.begin(), kMsSsimWeights.begin() + static_cast<std::ptrdiff_t>(scales));
  double s = 0.0;
  for (double v : w) s += v;
  for (auto& v : w) v /= s;
  return w;
}

/// Multi-scale SSIM: contrast-structure means at the first scales-1 levels and
/// the full SSIM mean at the coarsest, each clamped to >= 1e-6 before the
/// fractional power. scales = 0 picks ms_ssim_scales(H, W).
template <typename T>
Tensor<T> ms_ssim(const Tensor<T>& pred, const Tensor<T>& target, std::size_t scales = 0, const SsimOptions& opt = {}) {
  detail::require_same_image_shape(pred.shape(), target.shape(), "ms_ssim");
  auto x = detail::as_image_batch(pred), y = detail::as_image_batch(target);
  const std::size_t h = x.size(2), w = x.size(3);
  if (scales == 0) scales = ms_ssim_scales(h, w);
  const auto weights = ms_ssim_weights(scales);
  if (scales > 1 && (std::min(h, w) >> (scales - 1)) < opt.window) {
    throw ShapeError("ms_ssim: " + std::to_string(h) + "x" + std::to_string(w) + " image is too small for " +
                     std::to_string(scales) + " scales; lower the scale count");
  }
  constexpr double kFloor = 1e-6;
  Tensor<T> out;
  for (std::size_t s = 0; s < scales; ++s) {
    auto [ssim_map, cs_map] = detail::ssim_maps(x, y, opt);
    const bool last = s + 1 == scales;
    auto term = pow_scalar(clamp_min(mean(last ? ssim_map : cs_map), kFloor), weights[s]);
    out = out.defined() ? mul(out, term) : term;
    if (!last) {
      x = avg_pool2x2(x);
      y = avg_pool2x2(y);
    }
  }
  return out;
}

/// l1 + lambda_ssim * (1 - ms_ssim).
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& pred, const Tensor<T>& target, double lambda_ssim = 1.0,
                        std::size_t scales = 0) {
  auto l1 = l1_loss(pred, target);
  if (lambda_ssim == 0.0) return l1;
  return add(l1, mul_scalar(add_scalar(neg(ms_ssim(pred, target, scales)), 1.0), lambda_ssim));
}

struct PsnrResult {
  double db = 0.0;
  bool capped = false;  // MSE was zero and db holds the cap
};

template <typename T>
PsnrResult psnr(const Tensor<T>& pred, const Tensor<T>& target, double data_range = 1.0, double cap = kPsnrCap) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("psnr: shape mismatch " + shape_string(pred.shape()) + " vs " + shape_string(target.shape()));
  }
  double se = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(pred.numel());
  if (mse == 0.0) return {cap, true};
  return {std::min(cap, 10.0 * std::log10(data_range * data_range / mse)), false};
}

/// SSIM as a plain number, without recording a graph.
template <typename T>
double ssim_value(const Tensor<T>& pred, const Tensor<T>& target, const SsimOptions& opt = {}) {
  NoGradGuard guard;
  return static_cast<double>(ssim(pred, target, opt).item());
}

}  // namespace darkvrai
