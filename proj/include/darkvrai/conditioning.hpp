#pragma once

// Capture-condition conditioning: (sensor, illuminance, frame rate) metadata
// is one-hot encoded, embedded into a dense vector v_cc, and injected into
// feature maps by adaptive layer normalization.

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "darkvrai/error.hpp"
#include "darkvrai/ops.hpp"
#include "darkvrai/params.hpp"
#include "darkvrai/tensor.hpp"
#include <nlohmann/json.hpp>

namespace darkvrai {

struct CaptureCondition {
  std::size_t sensor_id = 0;
  double illuminance_lx = 0.0;
  double fps = 0.0;

  bool operator==(const CaptureCondition&) const = default;

  std::string label() const {
    std::ostringstream os;
    os << "sensor" << sensor_id << "_" << illuminance_lx << "lx_" << fps << "fps";
    return os.str();
  }
};

struct ConditionVocabulary {
  std::size_t sensors = 4;
  std::vector<double> illuminance_lx{1.0, 3.0, 10.0};
  std::vector<double> fps{24.0, 60.0, 120.0};

  bool operator==(const ConditionVocabulary&) const = default;

  static ConditionVocabulary desk() { return {}; }
  static ConditionVocabulary paper_scale() { return {14, {1.0, 3.0, 10.0}, {24.0, 60.0, 120.0}}; }

  void validate() const {
    auto increasing = [](const std::vector<double>& v, const char* name) {
      if (v.empty()) throw ConfigError(std::string("vocabulary: ") + name + " levels are empty");
      for (std::size_t i = 1; i < v.size(); ++i)
        if (!(v[i] > v[i - 1])) throw ConfigError(std::string("vocabulary: ") + name + " levels must be strictly increasing");
    };
    if (sensors == 0) throw ConfigError("vocabulary: sensor count must be positive");
    increasing(illuminance_lx, "illuminance_lx");
    increasing(fps, "fps");
  }

  static std::size_t find_level(const std::vector<double>& levels, double v, const char* factor) {
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (std::fabs(levels[i] - v) <= 1e-9 * std::max(1.0, std::fabs(v))) return i;
    std::ostringstream os;
    os << factor << " " << v << " is not in the vocabulary [";
    for (std::size_t i = 0; i < levels.size(); ++i) os << (i ? ", " : "") << levels[i];
    os << "]";
    throw VocabularyError(os.str());
  }

  std::size_t sensor_index(const CaptureCondition& c) const {
    if (c.sensor_id >= sensors) {
      throw VocabularyError("sensor_id " + std::to_string(c.sensor_id) + " is not in the vocabulary (sensors: " +
                            std::to_string(sensors) + ")");
    }
    return c.sensor_id;
  }
  std::size_t illuminance_index(const CaptureCondition& c) const {
    return find_level(illuminance_lx, c.illuminance_lx, "illuminance_lx");
  }
  std::size_t fps_index(const CaptureCondition& c) const { return find_level(fps, c.fps, "fps"); }

  void check(const CaptureCondition& c) const {
    sensor_index(c);
    illuminance_index(c);
    fps_index(c);
  }
};

inline void to_json(nlohmann::json& j, const ConditionVocabulary& v) {
  j = nlohmann::json{{"sensors", v.sensors}, {"illuminance_lx", v.illuminance_lx}, {"fps", v.fps}};
}

inline void from_json(const nlohmann::json& j, ConditionVocabulary& v) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "sensors" && it.key() != "illuminance_lx" && it.key() != "fps")
      throw ConfigError("vocabulary: unknown key '" + it.key() + "'");
  v.sensors = j.at("sensors").get<std::size_t>();
  v.illuminance_lx = j.at("illuminance_lx").get<std::vector<double>>();
  v.fps = j.at("fps").get<std::vector<double>>();
  v.validate();
}

inline void to_json(nlohmann::json& j, const CaptureCondition& c) {
  j = nlohmann::json{{"sensor_id", c.sensor_id}, {"illuminance_lx", c.illuminance_lx}, {"fps", c.fps}};
}

inline void from_json(const nlohmann::json& j, CaptureCondition& c) {
  c.sensor_id = j.at("sensor_id").get<std::size_t>();
  c.illuminance_lx = j.at("illuminance_lx").get<double>();
  c.fps = j.at("fps").get<double>();
}

struct OneHotCondition {
  std::vector<double> sensor;
  std::vector<double> illuminance;
  std::vector<double> fps;
};

/// Strict one-hot encoding; an unknown value raises VocabularyError naming the factor.
inline OneHotCondition one_hot(const CaptureCondition& c, const ConditionVocabulary& vocab) {
  OneHotCondition out{std::vector<double>(vocab.sensors, 0.0), std::vector<double>(vocab.illuminance_lx.size(), 0.0),
                      std::vector<double>(vocab.fps.size(), 0.0)};
  out.sensor[vocab.sensor_index(c)] = 1.0;
  out.illuminance[vocab.illuminance_index(c)] = 1.0;
  out.fps[vocab.fps_index(c)] = 1.0;
  return out;
}

/// Three per-factor embedding tables fused by one linear layer into v_cc.
template <typename T>
class ConditionEmbedding {
 public:
  ConditionEmbedding() = default;

  ConditionEmbedding(ParameterSet<T>& ps, const std::string& prefix, const ConditionVocabulary& vocab,
                     std::size_t width, std::size_t d_cc)
      : vocab_(vocab), width_(width), d_cc_(d_cc) {
    vocab.validate();
    auto table = [&](const char* name, std::size_t rows) {
      return ps.create(prefix + "." + name, {rows, width}, [](std::span<T> v, Rng& rng) {
        std::normal_distribution<double> d(0.0, 1.0);
        for (auto& x : v) x = static_cast<T>(d(rng));
      });
    };
    sensor_table_ = table("sensor_table", vocab.sensors);
    lux_table_ = table("illuminance_table", vocab.illuminance_lx.size());
    fps_table_ = table("fps_table", vocab.fps.size());
    fusion_weight_ = ps.uniform(prefix + ".fusion.weight", {d_cc, 3 * width}, 3 * width);
    fusion_bias_ = ps.uniform(prefix + ".fusion.bias", {d_cc}, 3 * width);
  }

  std::size_t dim() const { return d_cc_; }
  const ConditionVocabulary& vocabulary() const { return vocab_; }
  const Tensor<T>& sensor_table() const { return sensor_table_; }
  const Tensor<T>& illuminance_table() const { return lux_table_; }
  const Tensor<T>& fps_table() const { return fps_table_; }
  const Tensor<T>& fusion_bias() const { return fusion_bias_; }

  /// v_cc = fusion([onehot_s * E_s || onehot_l * E_l || onehot_f * E_f]) -> [1, d_cc].
  Tensor<T> embed(const OneHotCondition& oh) const {
    auto row = [](const std::vector<double>& hot, const Tensor<T>& table, const char* factor) {
      if (hot.size() != table.size(0)) {
        throw ShapeError(std::string("embed: ") + factor + " one-hot has length " + std::to_string(hot.size()) +
                         ", table has " + std::to_string(table.size(0)) + " rows");
      }
      Tensor<T> h({1, hot.size()}, std::vector<T>(hot.begin(), hot.end()));
      return matmul(h, table);
    };
    auto joined = concat<T>({row(oh.sensor, sensor_table_, "sensor"), row(oh.illuminance, lux_table_, "illuminance"),
                             row(oh.fps, fps_table_, "fps")},
                            1);
    return linear(joined, fusion_weight_, fusion_bias_);
  }

  Tensor<T> embed(const CaptureCondition& c) const { return embed(one_hot(c, vocab_)); }

 private:
  ConditionVocabulary vocab_;
  std::size_t width_ = 0;
  std::size_t d_cc_ = 0;
  Tensor<T> sensor_table_, lux_table_, fps_table_, fusion_weight_, fusion_bias_;
};

/// An AdaLN site. When conditioned, (gamma, beta) come from a per-site linear
/// projection of v_cc initialized to gamma = 1, beta = 0; otherwise they are
/// plain learnable per-channel parameters (unconditioned layer norm).
template <typename T>
class AdaLayerNorm {
 public:
  AdaLayerNorm() = default;

  AdaLayerNorm(ParameterSet<T>& ps, const std::string& prefix, std::size_t channels, std::size_t d_cc, bool conditioned,
               double eps = 1e-5)
      : channels_(channels), conditioned_(conditioned), eps_(eps) {
    if (conditioned) {
      proj_weight_ = ps.residual_zero(prefix + ".proj.weight", {2 * channels, d_cc}, d_cc);
      proj_bias_ = ps.create(prefix + ".proj.bias", {2 * channels}, [channels](std::span<T> v, Rng&) {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(i < channels ? 1.0 : 0.0);
      });
    } else {
      gain_ = ps.constant(prefix + ".weight", {1, channels}, 1.0);
      shift_ = ps.constant(prefix + ".bias", {1, channels}, 0.0);
    }
  }

  bool conditioned() const { return conditioned_; }
  double eps() const { return eps_; }

  /// gamma and beta for a conditioning vector [G, d_cc].
  std::pair<Tensor<T>, Tensor<T>> modulation(const Tensor<T>& v_cc) const {
    if (!conditioned_) return {gain_, shift_};
    if (!v_cc.defined()) throw ConfigError("conditioned AdaLN site requires a conditioning vector");
    auto gb = chunk(linear(v_cc, proj_weight_, proj_bias_), 1, 2);
    return {gb[0], gb[1]};
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& v_cc) const {
    auto [gamma, beta] = modulation(v_cc);
    return ada_ln(x, gamma, beta, eps_);
  }

 private:
  std::size_t channels_ = 0;
  bool conditioned_ = false;
  double eps_ = 1e-5;
  Tensor<T> proj_weight_, proj_bias_, gain_, shift_;
};

}  // namespace darkvrai
