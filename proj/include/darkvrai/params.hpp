#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "darkvrai/error.hpp"
#include "darkvrai/rng.hpp"
#include "darkvrai/tensor.hpp"

namespace darkvrai {

/// kIdentity zero-initializes residual output layers so fresh blocks compute
/// the identity; kRandom gives those layers small random values instead
/// (used to probe gradients and sensitivities of a non-degenerate network).
enum class InitMode { kIdentity, kRandom };

/// Ordered, named collection of trainable leaves. Each parameter draws its
/// initial values from a stream derived from (seed, name), so models that
/// share a parameter name and shape share its initialization.
template <typename T>
class ParameterSet {
 public:
  using Initializer = std::function<void(std::span<T>, Rng&)>;

  explicit ParameterSet(std::uint64_t seed = 0, InitMode mode = InitMode::kIdentity) : seed_(seed), mode_(mode) {}

  InitMode mode() const { return mode_; }
  std::uint64_t seed() const { return seed_; }

  Tensor<T> create(const std::string& name, Shape shape, const Initializer& init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    Rng rng(derive_seed(seed_, fnv1a(name)));
    init(t.mutable_data(), rng);
    t.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, t);
    return t;
  }

  /// Uniform in [-bound, bound] with bound = 1/sqrt(fan_in).
  Tensor<T> uniform(const std::string& name, Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    return create(name, std::move(shape), [bound](std::span<T> v, Rng& rng) {
      std::uniform_real_distribution<double> d(-bound, bound);
      for (auto& x : v) x = static_cast<T>(d(rng));
    });
  }

  Tensor<T> constant(const std::string& name, Shape shape, double value) {
    return create(name, std::move(shape), [value](std::span<T> v, Rng&) {
      for (auto& x : v) x = static_cast<T>(value);
    });
  }

  /// Zero in identity mode; uniform(fan_in) in random mode.
  Tensor<T> residual_zero(const std::string& name, Shape shape, std::size_t fan_in) {
    if (mode_ == InitMode::kRandom) return uniform(name, std::move(shape), fan_in);
    return constant(name, std::move(shape), 0.0);
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

 private:
  std::uint64_t seed_;
  InitMode mode_;
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace darkvrai
