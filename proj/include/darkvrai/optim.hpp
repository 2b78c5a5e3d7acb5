#pragma once

// Adam with bias correction and the cosine-annealed learning rate.

#include <cmath>
#include <cstddef>
#include <vector>

#include "darkvrai/error.hpp"
#include "darkvrai/params.hpp"

namespace darkvrai {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam: betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("adam: eps must be positive");
  }
};

/// Moment buffers kept in double regardless of parameter precision.
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  bool operator==(const AdamState&) const = default;

  template <typename T>
  void ensure(const ParameterSet<T>& ps) {
    if (m.empty() && step == 0) {
      for (const auto& [name, t] : ps) {
        m.emplace_back(t.numel(), 0.0);
        v.emplace_back(t.numel(), 0.0);
      }
    }
    if (m.size() != ps.size() || v.size() != ps.size()) throw ShapeError("adam: state does not match parameter set");
    std::size_t i = 0;
    for (const auto& [name, t] : ps) {
      if (m[i].size() != t.numel() || v[i].size() != t.numel()) {
        throw ShapeError("adam: moment buffer size mismatch for " + name);
      }
      ++i;
    }
  }
};

/// One Adam update using the gradients currently stored on the parameters.
/// Parameters without a gradient buffer are treated as having zero gradient.
template <typename T>
void adam_step(ParameterSet<T>& ps, AdamState& state, double lr, const AdamConfig& cfg = {}) {
  state.ensure(ps);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::size_t i = 0;
  for (const auto& entry : ps) {
    Tensor<T> p = entry.second;
    auto values = p.mutable_data();
    const bool has = p.has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = has ? static_cast<double>(p.grad()[k]) : 0.0;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      const double update = lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
      values[k] = static_cast<T>(static_cast<double>(values[k]) - update);
    }
    ++i;
  }
}

/// lr_min + (lr_max - lr_min) (1 + cos(pi t / iterations)) / 2, held at lr_min past the end.
inline double cosine_lr(std::size_t iter, std::size_t iterations, double lr_max, double lr_min) {
  if (iterations == 0) return lr_max;
  const double t = std::min(1.0, static_cast<double>(iter) / static_cast<double>(iterations));
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::acos(-1.0) * t));
}

}  // namespace darkvrai
