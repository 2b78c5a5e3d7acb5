#pragma once

// Two-stage burst denoiser: a conditioned alignment stage (BOSS blocks,
// residual conv blocks and flow-based feature warping toward the base frame)
// followed by a conditioned U-shaped NAFBlock denoiser that restores the
// final (base) frame of the burst.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "darkvrai/blocks.hpp"
#include "darkvrai/conditioning.hpp"
#include "darkvrai/ops.hpp"
#include "darkvrai/params.hpp"
#include "darkvrai/scan.hpp"
#include <nlohmann/json.hpp>

namespace darkvrai {

struct ModelConfig {
  std::size_t channels = 8;            // C
  std::size_t frames = 4;              // T
  std::size_t enc_blocks = 4;          // total over all encoder scales
  std::size_t bottleneck_blocks = 8;
  std::size_t dec_blocks = 4;          // total over all decoder scales
  std::size_t num_scales = 2;
  std::size_t align_levels = 2;
  std::size_t d_cc = 64;
  std::size_t embed_width = 32;
  std::size_t state_dim = 8;           // N
  std::size_t ca_reduction = 4;
  std::size_t scan_chunk = 64;
  bool use_c3 = true;
  bool use_boss = true;
  ConditionVocabulary vocab = ConditionVocabulary::desk();

  bool operator==(const ModelConfig&) const = default;

  static ModelConfig desk() { return {}; }

  static ModelConfig paper_scale() {
    ModelConfig c;
    c.channels = 48;
    c.frames = 10;
    c.num_scales = 4;
    c.vocab = ConditionVocabulary::paper_scale();
    return c;
  }

  /// Packed planes are halved num_scales times, so mosaic sizes must divide 2^(num_scales+1).
  std::size_t size_multiple() const { return std::size_t{1} << (num_scales + 1); }

  void validate() const {
    if (frames < 2) throw ConfigError("model: frames (T) must be at least 2");
    if (channels == 0 || channels % 2) throw ConfigError("model: channels (C) must be positive and even");
    if (num_scales < 1) throw ConfigError("model: num_scales must be at least 1");
    if (enc_blocks < num_scales || dec_blocks < num_scales) {
      throw ConfigError("model: need at least one encoder and one decoder block per scale");
    }
    if (d_cc == 0 || embed_width == 0 || state_dim == 0 || scan_chunk == 0) {
      throw ConfigError("model: d_cc, embed_width, state_dim and scan_chunk must be positive");
    }
    vocab.validate();
  }

  void validate_input(std::size_t height, std::size_t width) const {
    if (height % 2 || width % 2) {
      throw ShapeError("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                       " is not even; Bayer packing needs even dimensions");
    }
    const std::size_t m = size_multiple();
    if (height % m || width % m) {
      throw ShapeError("frame size " + std::to_string(height) + "x" + std::to_string(width) + " must be divisible by " +
                       std::to_string(m) + " for " + std::to_string(num_scales) + " U-Net scales");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"channels", c.channels},
                     {"frames", c.frames},
                     {"enc_blocks", c.enc_blocks},
                     {"bottleneck_blocks", c.bottleneck_blocks},
                     {"dec_blocks", c.dec_blocks},
                     {"num_scales", c.num_scales},
                     {"align_levels", c.align_levels},
                     {"d_cc", c.d_cc},
                     {"embed_width", c.embed_width},
                     {"state_dim", c.state_dim},
                     {"ca_reduction", c.ca_reduction},
                     {"scan_chunk", c.scan_chunk},
                     {"use_c3", c.use_c3},
                     {"use_boss", c.use_boss},
                     {"vocab", c.vocab}};
}

/// Partial update: keys present in j override c; unknown keys are rejected.
inline void merge_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> known{"channels",  "frames",      "enc_blocks",   "bottleneck_blocks",
                                           "dec_blocks", "num_scales",  "align_levels", "d_cc",
                                           "embed_width", "state_dim",  "ca_reduction", "scan_chunk",
                                           "use_c3",     "use_boss",    "vocab"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("model config: unknown key '" + it.key() + "'");
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("channels", c.channels);
  get("frames", c.frames);
  get("enc_blocks", c.enc_blocks);
  get("bottleneck_blocks", c.bottleneck_blocks);
  get("dec_blocks", c.dec_blocks);
  get("num_scales", c.num_scales);
  get("align_levels", c.align_levels);
  get("d_cc", c.d_cc);
  get("embed_width", c.embed_width);
  get("state_dim", c.state_dim);
  get("ca_reduction", c.ca_reduction);
  get("scan_chunk", c.scan_chunk);
  get("use_c3", c.use_c3);
  get("use_boss", c.use_boss);
  if (j.contains("vocab")) c.vocab = j.at("vocab").get<ConditionVocabulary>();
  c.validate();
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  merge_json(j, c);
}

/// Splits `total` blocks over `scales` levels, earlier levels taking the remainder.
inline std::vector<std::size_t> blocks_per_scale(std::size_t total, std::size_t scales) {
  std::vector<std::size_t> out(scales, total / scales);
  for (std::size_t i = 0; i < total % scales; ++i) ++out[i];
  return out;
}

/// Residual conv block of the alignment stage: x + conv(silu(conv(AdaLN(x)))).
template <typename T>
struct AlignConvBlock {
  AdaLayerNorm<T> norm;
  Tensor<T> w1, b1, w2, b2;

  AlignConvBlock() = default;
  AlignConvBlock(ParameterSet<T>& ps, const std::string& prefix, std::size_t C, std::size_t d_cc, bool conditioned)
      : norm(ps, prefix + ".norm", C, d_cc, conditioned) {
    w1 = ps.uniform(prefix + ".conv1.weight", {C, C, 3, 3}, 9 * C);
    b1 = ps.uniform(prefix + ".conv1.bias", {C}, 9 * C);
    w2 = ps.uniform(prefix + ".conv2.weight", {C, C, 3, 3}, 9 * C);
    b2 = ps.uniform(prefix + ".conv2.bias", {C}, 9 * C);
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& v_cc) const {
    auto h = conv2d(silu(conv2d(norm.forward(x, v_cc), w1, b1, {1, 1, 1})), w2, b2, {1, 1, 1});
    return add(x, h);
  }
};

/// Predicts a per-pixel offset field for every non-base frame from
/// [frame features || base features] and warps the frame toward the base.
/// The base frame (last) passes through untouched. Zero offset weights give
/// an identity warp.
template <typename T>
struct AlignBlock {
  AdaLayerNorm<T> norm;
  Tensor<T> w1, b1, w2, b2;

  AlignBlock() = default;
  AlignBlock(ParameterSet<T>& ps, const std::string& prefix, std::size_t C, std::size_t d_cc, bool conditioned)
      : norm(ps, prefix + ".norm", 2 * C, d_cc, conditioned) {
    w1 = ps.uniform(prefix + ".offset1.weight", {C, 2 * C, 3, 3}, 18 * C);
    b1 = ps.uniform(prefix + ".offset1.bias", {C}, 18 * C);
    w2 = ps.residual_zero(prefix + ".offset2.weight", {2, C, 3, 3}, 9 * C);
    b2 = ps.residual_zero(prefix + ".offset2.bias", {2}, 9 * C);
  }

  Tensor<T> offsets(const Tensor<T>& moving, const Tensor<T>& base, const Tensor<T>& v_cc) const {
    auto pair = concat<T>({moving, repeat_batch(base, moving.size(0))}, 1);
    auto h = silu(conv2d(norm.forward(pair, v_cc), w1, b1, {1, 1, 1}));
    return conv2d(h, w2, b2, {1, 1, 1});
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& v_cc) const {
    const std::size_t F = x.size(0);
    auto parts = split(x, 0, {F - 1, 1});
    auto warped = warp(parts[0], offsets(parts[0], parts[1], v_cc));
    return concat<T>({warped, parts[1]}, 0);
  }
};

template <typename T>
class DarkVraiModel {
 public:
  DarkVraiModel(const ModelConfig& config, std::uint64_t seed, InitMode mode = InitMode::kIdentity,
                ScanOptions scan = {})
      : config_(config), params_(seed, mode), scan_(scan) {
    config_.validate();
    scan_.chunk = config_.scan_chunk;
    const std::size_t C = config_.channels;
    const std::size_t d = config_.d_cc;
    const bool cond = config_.use_c3;
    auto& ps = params_;

    if (cond) embedding_ = ConditionEmbedding<T>(ps, "c3", config_.vocab, config_.embed_width, d);

    shallow_w_ = ps.uniform("align.shallow.weight", {C, 4, 3, 3}, 36);
    shallow_b_ = ps.uniform("align.shallow.bias", {C}, 36);
    for (std::size_t l = 0; l < config_.align_levels; ++l) {
      const std::string p = "align.level" + std::to_string(l);
      Level level;
      if (config_.use_boss) {
        level.boss_pre = BossBlock<T>(ps, p + ".boss_pre", C, config_.state_dim, config_.ca_reduction, d, cond);
        level.boss_mid = BossBlock<T>(ps, p + ".boss_mid", C, config_.state_dim, config_.ca_reduction, d, cond);
      }
      level.encoder = AlignConvBlock<T>(ps, p + ".encoder", C, d, cond);
      level.align = AlignBlock<T>(ps, p + ".align", C, d, cond);
      levels_.push_back(std::move(level));
    }

    fusion_w_ = ps.uniform("denoise.fusion.weight", {C, config_.frames * C, 1, 1}, config_.frames * C);
    fusion_b_ = ps.uniform("denoise.fusion.bias", {C}, config_.frames * C);
    const auto enc = blocks_per_scale(config_.enc_blocks, config_.num_scales);
    const auto dec = blocks_per_scale(config_.dec_blocks, config_.num_scales);
    std::size_t ch = C;
    for (std::size_t s = 0; s < config_.num_scales; ++s) {
      const std::string p = "denoise.enc" + std::to_string(s);
      Stage stage;
      for (std::size_t b = 0; b < enc[s]; ++b)
        stage.blocks.emplace_back(ps, p + ".block" + std::to_string(b), ch, d, cond);
      stage.resample_w = ps.uniform(p + ".down.weight", {2 * ch, ch, 2, 2}, 4 * ch);
      stage.resample_b = ps.uniform(p + ".down.bias", {2 * ch}, 4 * ch);
      encoders_.push_back(std::move(stage));
      ch *= 2;
    }
    for (std::size_t b = 0; b < config_.bottleneck_blocks; ++b)
      bottleneck_.emplace_back(ps, "denoise.bottleneck.block" + std::to_string(b), ch, d, cond);
    for (std::size_t s = config_.num_scales; s-- > 0;) {
      const std::string p = "denoise.dec" + std::to_string(s);
      Stage stage;
      stage.resample_w = ps.uniform(p + ".up.weight", {2 * ch, ch, 1, 1}, ch);
      stage.resample_b = ps.uniform(p + ".up.bias", {2 * ch}, ch);
      ch /= 2;
      for (std::size_t b = 0; b < dec[s]; ++b)
        stage.blocks.emplace_back(ps, p + ".block" + std::to_string(b), ch, d, cond);
      decoders_.push_back(std::move(stage));
    }
    out_w_ = ps.residual_zero("denoise.out.weight", {4, C, 3, 3}, 9 * C);
    out_b_ = ps.residual_zero("denoise.out.bias", {4}, 9 * C);
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  ScanOptions& scan_options() { return scan_; }
  const ScanOptions& scan_options() const { return scan_; }

  /// v_cc [1, d_cc], or an undefined tensor when C3 is disabled (the
  /// condition is still validated against the vocabulary).
  Tensor<T> condition_vector(const CaptureCondition& cond) const {
    config_.vocab.check(cond);
    if (!config_.use_c3) return {};
    return embedding_.embed(cond);
  }

  /// frames_packed [T,4,h,w] -> aligned features [T,C,h,w].
  Tensor<T> align(const Tensor<T>& frames_packed, const Tensor<T>& v_cc) const {
    auto f = conv2d(frames_packed, shallow_w_, shallow_b_, {1, 1, 1});
    for (const auto& level : levels_) {
      if (config_.use_boss) f = level.boss_pre.forward(f, v_cc, scan_);
      f = level.encoder.forward(f, v_cc);
      if (config_.use_boss) f = level.boss_mid.forward(f, v_cc, scan_);
      f = level.align.forward(f, v_cc);
    }
    return f;
  }

  /// aligned [T,C,h,w], base_packed [1,4,h,w] -> restored packed base [1,4,h,w].
  Tensor<T> denoise(const Tensor<T>& aligned, const Tensor<T>& base_packed, const Tensor<T>& v_cc) const {
    const std::size_t F = aligned.size(0), C = aligned.size(1), h = aligned.size(2), w = aligned.size(3);
    auto x = conv2d(reshape(aligned, {1, F * C, h, w}), fusion_w_, fusion_b_);
    std::vector<Tensor<T>> skips;
    for (const auto& stage : encoders_) {
      for (const auto& b : stage.blocks) x = b.forward(x, v_cc);
      skips.push_back(x);
      x = conv2d(x, stage.resample_w, stage.resample_b, {2, 0, 1});
    }
    for (const auto& b : bottleneck_) x = b.forward(x, v_cc);
    for (const auto& stage : decoders_) {
      x = pixel_shuffle2(conv2d(x, stage.resample_w, stage.resample_b));
      x = add(x, skips.back());
      skips.pop_back();
      for (const auto& b : stage.blocks) x = b.forward(x, v_cc);
    }
    return add(conv2d(x, out_w_, out_b_, {1, 1, 1}), base_packed);
  }

  /// frames [T,1,H,W] linear Bayer -> restored base frame [1,H,W] (unclamped).
  Tensor<T> forward(const Tensor<T>& frames, const CaptureCondition& cond) const {
    if (frames.dim() != 4 || frames.size(1) != 1) {
      throw ShapeError("model: frames must be [T,1,H,W], got " + shape_string(frames.shape()));
    }
    if (frames.size(0) != config_.frames) {
      throw ShapeError("model: expected " + std::to_string(config_.frames) + " frames, got " +
                       std::to_string(frames.size(0)));
    }
    const std::size_t H = frames.size(2), W = frames.size(3);
    config_.validate_input(H, W);
    auto v_cc = condition_vector(cond);
    auto packed = pixel_unshuffle2(frames);
    auto base = split(packed, 0, {config_.frames - 1, 1})[1];
    auto restored = denoise(align(packed, v_cc), base, v_cc);
    return reshape(pixel_shuffle2(restored), {1, H, W});
  }

  /// Inference output clamped to [0, 1].
  Tensor<T> infer(const Tensor<T>& frames, const CaptureCondition& cond) const {
    NoGradGuard guard;
    auto y = forward(frames, cond);
    std::vector<T> v(y.data().begin(), y.data().end());
    for (auto& x : v) x = std::clamp(x, T(0), T(1));
    return Tensor<T>(y.shape(), std::move(v));
  }

 private:
  struct Level {
    BossBlock<T> boss_pre, boss_mid;
    AlignConvBlock<T> encoder;
    AlignBlock<T> align;
  };
  struct Stage {
    std::vector<NafBlock<T>> blocks;
    Tensor<T> resample_w, resample_b;
  };

  ModelConfig config_;
  ParameterSet<T> params_;
  ScanOptions scan_;
  ConditionEmbedding<T> embedding_;
  Tensor<T> shallow_w_, shallow_b_;
  std::vector<Level> levels_;
  Tensor<T> fusion_w_, fusion_b_;
  std::vector<Stage> encoders_;
  std::vector<NafBlock<T>> bottleneck_;
  std::vector<Stage> decoders_;
  Tensor<T> out_w_, out_b_;

 public:
  const std::vector<Level>& levels() const { return levels_; }
};

/// Trainable element count of a model built from `config`.
inline std::size_t count_parameters(const ModelConfig& config) {
  DarkVraiModel<float> model(config, 0);
  return model.parameters().element_count();
}

}  // namespace darkvrai
