#pragma once

// Central finite-difference check of reverse-mode gradients in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "darkvrai/ops.hpp"
#include "darkvrai/rng.hpp"
#include "darkvrai/tensor.hpp"

namespace darkvrai {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates probed per input; 0 probes every element.
  std::size_t max_coords_per_input = 0;
  /// Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-3;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst;  // "input i[j]: analytic a, numeric n"

  bool passed(double tol) const { return std::isfinite(max_rel_error) && max_rel_error <= tol; }

  void merge(const GradCheckResult& other) {
    coords_checked += other.coords_checked;
    if (!(other.max_rel_error <= max_rel_error)) {
      max_rel_error = other.max_rel_error;
      worst = other.worst;
    }
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

/// Compares d<out, R>/d(inputs) from backward() against central differences,
/// where R is a random projection so every output element contributes.
/// `inputs` must be leaves; they are marked as requiring gradients.
template <typename F>
GradCheckResult gradcheck(F&& f, std::vector<Tensor<double>> inputs, Rng& rng, const GradCheckOptions& opt = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor<double> probe;
  {
    auto out = f(inputs);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> r(out.numel());
    for (auto& v : r) v = nd(rng);
    probe = Tensor<double>(out.shape(), std::move(r));
    backward(sum(mul(out, probe)));
  }
  auto objective = [&]() {
    NoGradGuard guard;
    auto out = f(inputs);
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * probe[i];
    return s;
  };

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    const std::vector<double> analytic =
        in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end()) : std::vector<double>(in.numel(), 0.0);
    std::vector<std::size_t> coords(in.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_input && coords.size() > opt.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_input);
    }
    auto values = in.mutable_data();
    for (std::size_t j : coords) {
      const double saved = values[j];
      values[j] = saved + opt.step;
      const double up = objective();
      values[j] = saved - opt.step;
      const double down = objective();
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = relative_error(analytic[j], numeric, opt.denominator_floor);
      ++result.coords_checked;
      if (!(err <= result.max_rel_error)) {
        result.max_rel_error = err;
        std::ostringstream os;
        os << "input " << k << "[" << j << "]: analytic " << analytic[j] << ", numeric " << numeric;
        result.worst = os.str();
      }
    }
  }
  return result;
}

/// Random leaf with entries drawn uniformly from [lo, hi].
inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

}  // namespace darkvrai
