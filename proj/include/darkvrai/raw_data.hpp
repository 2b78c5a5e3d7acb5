#pragma once

// Synthetic low-light Bayer RAW bursts: procedural moving scenes, RGGB
// mosaicking, a Poisson-Gaussian sensor noise model driven by the capture
// condition, and the on-disk sequence / dataset format.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "darkvrai/conditioning.hpp"
#include "darkvrai/error.hpp"
#include "darkvrai/io.hpp"
#include "darkvrai/parallel.hpp"
#include "darkvrai/rng.hpp"
#include "darkvrai/tensor.hpp"

namespace darkvrai {

// ---------------------------------------------------------------------------
// Sensor noise model

/// Per-sensor constants of the noise model. Photo-electrons collected for a
/// normalized clean value v are lambda = v * lux * (1/fps) * qe * full_well_scale / k,
/// so a larger k means fewer electrons per digital unit and stronger shot noise.
/// read_noise_sigma is in electrons.
struct SensorProfile {
  std::size_t sensor_id = 0;
  double gain_k = 1.0;
  double read_noise_sigma = 2.0;
  double full_well_scale = 20000.0;
  double quantum_efficiency = 0.6;

  bool operator==(const SensorProfile&) const = default;

  void validate() const {
    if (!(gain_k > 0)) throw ConfigError("sensor profile: gain_k must be positive");
    if (!(read_noise_sigma >= 0)) throw ConfigError("sensor profile: read_noise_sigma must be non-negative");
    if (!(full_well_scale > 0) || !(quantum_efficiency > 0)) {
      throw ConfigError("sensor profile: full_well_scale and quantum_efficiency must be positive");
    }
  }
};

inline void to_json(nlohmann::json& j, const SensorProfile& p) {
  j = nlohmann::json{{"sensor_id", p.sensor_id},
                     {"gain_k", p.gain_k},
                     {"read_noise_sigma", p.read_noise_sigma},
                     {"full_well_scale", p.full_well_scale},
                     {"quantum_efficiency", p.quantum_efficiency}};
}

inline void from_json(const nlohmann::json& j, SensorProfile& p) {
  p.sensor_id = j.at("sensor_id").get<std::size_t>();
  p.gain_k = j.at("gain_k").get<double>();
  p.read_noise_sigma = j.at("read_noise_sigma").get<double>();
  p.full_well_scale = j.at("full_well_scale").get<double>();
  p.quantum_efficiency = j.at("quantum_efficiency").get<double>();
  p.validate();
}

/// Fixed synthetic profiles: gain_k spans [1, 4] and read noise [8, 2] electrons
/// in opposite order, so sensors differ in both noise components.
inline std::vector<SensorProfile> synthetic_profiles(std::size_t sensors) {
  std::vector<SensorProfile> out;
  for (std::size_t i = 0; i < sensors; ++i) {
    const double f = sensors > 1 ? static_cast<double>(i) / static_cast<double>(sensors - 1) : 0.0;
    SensorProfile p;
    p.sensor_id = i;
    p.gain_k = std::pow(4.0, f);
    p.read_noise_sigma = 2.0 * std::pow(4.0, 1.0 - f);
    out.push_back(p);
  }
  return out;
}

/// Digital gain g and read noise for one capture: noisy = g * (Poisson(v / g) + N(0, sigma^2)).
struct NoiseParams {
  double gain = 0.0;
  double read_sigma = 0.0;

  double photon_mean(double clean) const { return std::max(clean, 0.0) / gain; }
  /// Var[noisy] = g^2 (lambda + sigma^2) = g v + g^2 sigma^2.
  double variance(double clean) const { return gain * gain * (photon_mean(clean) + read_sigma * read_sigma); }
};

inline NoiseParams noise_params(const CaptureCondition& cond, const SensorProfile& p) {
  p.validate();
  if (!(cond.illuminance_lx > 0) || !(cond.fps > 0)) {
    throw ConfigError("noise model: illuminance and fps must be positive");
  }
  const double exposure = 1.0 / cond.fps;
  const double electrons_per_unit = cond.illuminance_lx * exposure * p.quantum_efficiency * p.full_well_scale / p.gain_k;
  return {1.0 / electrons_per_unit, p.read_noise_sigma};
}

/// One noisy sample. Shot noise uses a Gaussian approximation above 1000 electrons.
inline double sample_noisy(double clean, const NoiseParams& np, Rng& rng) {
  const double lambda = np.photon_mean(clean);
  double electrons;
  if (lambda > 1000.0) {
    electrons = std::normal_distribution<double>(lambda, std::sqrt(lambda))(rng);
  } else if (lambda > 0.0) {
    electrons = static_cast<double>(std::poisson_distribution<long long>(lambda)(rng));
  } else {
    electrons = 0.0;
  }
  if (np.read_sigma > 0) electrons += std::normal_distribution<double>(0.0, np.read_sigma)(rng);
  return np.gain * electrons;
}

// ---------------------------------------------------------------------------
// Frames

/// Single-plane RGGB mosaic, black level subtracted and normalized to [0, 1].
struct BayerFrame {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;
  int black_level = 64;
  int white_level = 1023;

  bool operator==(const BayerFrame&) const = default;

  float at(std::size_t r, std::size_t c) const { return data[r * width + c]; }
};

/// Bayer site of pixel (r, c): 0 = R, 1 = G1, 2 = G2, 3 = B.
constexpr int bayer_site(std::size_t r, std::size_t c) { return static_cast<int>(2 * (r % 2) + (c % 2)); }

/// Linear RGB image, planar [3, H, W].
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  float at(std::size_t ch, std::size_t r, std::size_t c) const { return data[(ch * height + r) * width + c]; }
};

inline void require_even(std::size_t h, std::size_t w, const char* op) {
  if (h == 0 || w == 0 || h % 2 || w % 2) {
    throw ShapeError(std::string(op) + ": frame dimensions must be even and positive, got " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
}

/// RGGB sampling: (even, even) R, (even, odd) G, (odd, even) G, (odd, odd) B.
inline BayerFrame mosaic(const RgbImage& rgb) {
  require_even(rgb.height, rgb.width, "mosaic");
  BayerFrame f{rgb.height, rgb.width, std::vector<float>(rgb.height * rgb.width)};
  static constexpr int kChannel[4] = {0, 1, 1, 2};
  for (std::size_t r = 0; r < rgb.height; ++r)
    for (std::size_t c = 0; c < rgb.width; ++c) f.data[r * rgb.width + c] = rgb.at(kChannel[bayer_site(r, c)], r, c);
  return f;
}

/// H x W mosaic -> [4, H/2, W/2] planes in R, G1, G2, B order.
inline Tensor<float> pack_bayer(const BayerFrame& f) {
  require_even(f.height, f.width, "pack_bayer");
  const std::size_t h = f.height / 2, w = f.width / 2;
  std::vector<float> out(4 * h * w);
  for (std::size_t r = 0; r < f.height; ++r)
    for (std::size_t c = 0; c < f.width; ++c)
      out[(static_cast<std::size_t>(bayer_site(r, c)) * h + r / 2) * w + c / 2] = f.data[r * f.width + c];
  return Tensor<float>({4, h, w}, std::move(out));
}

inline BayerFrame unpack_bayer(const Tensor<float>& planes) {
  if (planes.dim() != 3 || planes.size(0) != 4) {
    throw ShapeError("unpack_bayer: expected [4,h,w] planes, got " + shape_string(planes.shape()));
  }
  const std::size_t h = planes.size(1), w = planes.size(2);
  BayerFrame f{2 * h, 2 * w, std::vector<float>(4 * h * w)};
  require_even(f.height, f.width, "unpack_bayer");
  for (std::size_t r = 0; r < f.height; ++r)
    for (std::size_t c = 0; c < f.width; ++c)
      f.data[r * f.width + c] = planes[(static_cast<std::size_t>(bayer_site(r, c)) * h + r / 2) * w + c / 2];
  return f;
}

/// Adds sensor noise to a clean mosaic. The result is not clipped.
inline BayerFrame apply_noise(const BayerFrame& clean, const CaptureCondition& cond, const SensorProfile& profile,
                              std::uint64_t seed) {
  const NoiseParams np = noise_params(cond, profile);
  Rng rng(seed);
  BayerFrame out = clean;
  for (auto& v : out.data) v = static_cast<float>(sample_noisy(v, np, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Procedural scenes

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t octaves = 4;
  double base_period = 24.0;  // pixels per lattice cell at the coarsest octave
  double velocity_x = 0.0;    // pixels / second
  double velocity_y = 0.0;
  double illumination = 1.0;  // scales the [0, 1] texture

  void validate() const {
    require_even(height, width, "scene");
    if (octaves == 0 || !(base_period > 0)) throw ConfigError("scene: octaves and base_period must be positive");
    if (!std::isfinite(velocity_x) || !std::isfinite(velocity_y)) throw ConfigError("scene: velocity must be finite");
    if (!(illumination > 0) || illumination > 1.0) throw ConfigError("scene: illumination must be in (0, 1]");
  }
};

namespace detail {

inline double lattice_value(std::uint64_t seed, std::int64_t ix, std::int64_t iy, std::uint64_t layer) {
  const std::uint64_t h = derive_seed(seed, static_cast<std::uint64_t>(ix) * 0x9e3779b97f4a7c15ULL ^
                                                static_cast<std::uint64_t>(iy), layer);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Multi-octave value noise in [0, 1] at continuous coordinates (x, y).
inline double value_noise(std::uint64_t seed, double x, double y, std::size_t octaves, double period, std::uint64_t layer) {
  double sum = 0.0, norm = 0.0, amp = 1.0;
  for (std::size_t o = 0; o < octaves; ++o) {
    const double fx = x / period, fy = y / period;
    const double x0 = std::floor(fx), y0 = std::floor(fy);
    double tx = fx - x0, ty = fy - y0;
    tx = tx * tx * (3.0 - 2.0 * tx);
    ty = ty * ty * (3.0 - 2.0 * ty);
    const auto ix = static_cast<std::int64_t>(x0), iy = static_cast<std::int64_t>(y0);
    const std::uint64_t l = layer * 64 + o;
    const double v00 = lattice_value(seed, ix, iy, l), v10 = lattice_value(seed, ix + 1, iy, l);
    const double v01 = lattice_value(seed, ix, iy + 1, l), v11 = lattice_value(seed, ix + 1, iy + 1, l);
    sum += amp * ((v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty);
    norm += amp;
    amp *= 0.5;
    period *= 0.5;
  }
  return sum / norm;
}

}  // namespace detail

/// T clean linear RGB frames of a textured plane translating at the scene
/// velocity; frame t is displaced by velocity * t / fps.
inline std::vector<RgbImage> synth_clean_video(const SceneSpec& spec, const CaptureCondition& cond, std::size_t frames,
                                               std::uint64_t seed) {
  spec.validate();
  if (frames == 0) throw ConfigError("synth_clean_video: need at least one frame");
  if (!(cond.fps > 0)) throw ConfigError("synth_clean_video: fps must be positive");
  std::vector<RgbImage> out;
  for (std::size_t t = 0; t < frames; ++t) {
    const double ox = spec.velocity_x * static_cast<double>(t) / cond.fps;
    const double oy = spec.velocity_y * static_cast<double>(t) / cond.fps;
    RgbImage img{spec.height, spec.width, std::vector<float>(3 * spec.height * spec.width)};
    for (std::size_t r = 0; r < spec.height; ++r)
      for (std::size_t c = 0; c < spec.width; ++c) {
        const double x = static_cast<double>(c) + ox, y = static_cast<double>(r) + oy;
        const double lum = detail::value_noise(seed, x, y, spec.octaves, spec.base_period, 0);
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double tint = detail::value_noise(seed, x, y, 2, 2.0 * spec.base_period, 1 + ch);
          double v = 0.75 * lum + 0.25 * tint;
          v = std::clamp(0.5 + 1.8 * (v - 0.5), 0.0, 1.0);  // contrast stretch gives sharper structure
          img.data[(ch * spec.height + r) * spec.width + c] = static_cast<float>(spec.illumination * v);
        }
      }
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequences on disk

struct VideoSequence {
  std::vector<BayerFrame> noisy;
  std::vector<BayerFrame> clean;
  CaptureCondition condition;
  SensorProfile profile;
  std::uint64_t scene_seed = 0;

  bool operator==(const VideoSequence&) const = default;

  std::size_t frames() const { return noisy.size(); }
  std::size_t height() const { return noisy.empty() ? 0 : noisy[0].height; }
  std::size_t width() const { return noisy.empty() ? 0 : noisy[0].width; }

  void validate() const {
    if (noisy.empty()) throw ShapeError("sequence has no frames");
    // Inference inputs may carry no ground truth.
    if (!clean.empty() && noisy.size() != clean.size()) {
      throw ShapeError("sequence: noisy and clean frame counts differ");
    }
    for (const auto* list : {&noisy, &clean})
      for (const auto& f : *list) {
        if (f.height != height() || f.width != width() || f.data.size() != f.height * f.width) {
          throw ShapeError("sequence: frames differ in shape");
        }
      }
    require_even(height(), width(), "sequence");
  }
};

inline std::string frame_name(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03zu.f32", t);
  return buf;
}

inline std::string sequence_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%04zu", i);
  return buf;
}

inline nlohmann::json sequence_meta(const VideoSequence& seq) {
  const auto& f = seq.noisy.at(0);
  return nlohmann::json{{"shape", {f.height, f.width}},
                        {"frames", seq.frames()},
                        {"pattern", "RGGB"},
                        {"dtype", "float32-le"},
                        {"condition", seq.condition},
                        {"profile", seq.profile},
                        {"black_level", f.black_level},
                        {"white_level", f.white_level},
                        {"scene_seed", seq.scene_seed}};
}

inline void save_sequence(const VideoSequence& seq, const fs::path& dir) {
  seq.validate();
  fs::create_directories(dir / "noisy");
  if (!seq.clean.empty()) fs::create_directories(dir / "clean");
  write_json(dir / "meta.json", sequence_meta(seq));
  for (std::size_t t = 0; t < seq.frames(); ++t) {
    write_f32(dir / "noisy" / frame_name(t), seq.noisy[t].data);
    if (!seq.clean.empty()) write_f32(dir / "clean" / frame_name(t), seq.clean[t].data);
  }
}

/// Loads a sequence. The condition is not checked against any vocabulary here.
/// With `with_clean` false only the noisy frames are read.
inline VideoSequence load_sequence(const fs::path& dir, bool with_clean = true) {
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw IoError("missing " + meta_path.string());
  const auto meta = read_json(meta_path);
  VideoSequence seq;
  std::size_t h = 0, w = 0, frames = 0;
  int black = 0, white = 0;
  try {
    h = meta.at("shape").at(0).get<std::size_t>();
    w = meta.at("shape").at(1).get<std::size_t>();
    frames = meta.at("frames").get<std::size_t>();
    if (meta.at("pattern").get<std::string>() != "RGGB") throw IoError(meta_path.string() + ": unsupported pattern");
    seq.condition = meta.at("condition").get<CaptureCondition>();
    seq.profile = meta.at("profile").get<SensorProfile>();
    black = meta.at("black_level").get<int>();
    white = meta.at("white_level").get<int>();
    seq.scene_seed = meta.at("scene_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(meta_path.string() + ": invalid metadata (" + e.what() + ")");
  }
  if (frames == 0) throw IoError(meta_path.string() + ": sequence declares zero frames");
  for (std::size_t t = 0; t < frames; ++t) {
    seq.noisy.push_back({h, w, read_f32(dir / "noisy" / frame_name(t), h * w), black, white});
    if (with_clean) seq.clean.push_back({h, w, read_f32(dir / "clean" / frame_name(t), h * w), black, white});
  }
  seq.validate();
  return seq;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetSpec {
  std::size_t sequences = 30;
  std::size_t frames = 4;
  std::size_t height = 96;
  std::size_t width = 96;
  std::size_t holdout = 6;  // the last `holdout` sequences form the test split
  std::size_t octaves = 4;
  double base_period = 24.0;
  double max_speed = 120.0;  // pixels / second
  double min_illumination = 0.3;
  double max_illumination = 1.0;
  bool noiseless = false;  // noisy frames are copies of the clean ones
  ConditionVocabulary vocab = ConditionVocabulary::desk();
  std::vector<CaptureCondition> conditions;  // cycled; empty means round-robin over the vocabulary
  std::vector<SensorProfile> profiles;       // empty means synthetic_profiles(vocab.sensors)

  void validate() const {
    vocab.validate();
    require_even(height, width, "dataset");
    if (frames == 0) throw ConfigError("dataset: frames must be positive");
    if (holdout > sequences) throw ConfigError("dataset: holdout exceeds sequence count");
    if (!(min_illumination > 0) || min_illumination > max_illumination || max_illumination > 1.0) {
      throw ConfigError("dataset: illumination range must satisfy 0 < min <= max <= 1");
    }
    if (!(max_speed >= 0)) throw ConfigError("dataset: max_speed must be non-negative");
    for (const auto& c : conditions) vocab.check(c);
    if (!profiles.empty() && profiles.size() != vocab.sensors) {
      throw ConfigError("dataset: need one sensor profile per vocabulary sensor");
    }
  }

  std::vector<SensorProfile> sensor_profiles() const {
    return profiles.empty() ? synthetic_profiles(vocab.sensors) : profiles;
  }

  /// Condition of sequence i: cycles the explicit list, else enumerates the vocabulary mixed-radix.
  CaptureCondition condition(std::size_t i) const {
    if (!conditions.empty()) return conditions[i % conditions.size()];
    const std::size_t s = vocab.sensors, l = vocab.illuminance_lx.size();
    return {i % s, vocab.illuminance_lx[(i / s) % l], vocab.fps[(i / (s * l)) % vocab.fps.size()]};
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"sequences", s.sequences},   {"frames", s.frames},
                     {"height", s.height},         {"width", s.width},
                     {"holdout", s.holdout},       {"octaves", s.octaves},
                     {"base_period", s.base_period}, {"max_speed", s.max_speed},
                     {"min_illumination", s.min_illumination}, {"max_illumination", s.max_illumination},
                     {"noiseless", s.noiseless},   {"vocab", s.vocab},
                     {"conditions", s.conditions},
                     {"profiles", s.profiles}};
}

inline void merge_json(const nlohmann::json& j, DatasetSpec& s) {
  static const std::set<std::string> known{"sequences", "frames",    "height",           "width",
                                           "holdout",   "octaves",   "base_period",      "max_speed",
                                           "min_illumination", "max_illumination", "noiseless", "vocab", "conditions",
                                           "profiles"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("data config: unknown key '" + it.key() + "'");
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("sequences", s.sequences);
  get("frames", s.frames);
  get("height", s.height);
  get("width", s.width);
  get("holdout", s.holdout);
  get("octaves", s.octaves);
  get("base_period", s.base_period);
  get("max_speed", s.max_speed);
  get("min_illumination", s.min_illumination);
  get("max_illumination", s.max_illumination);
  get("noiseless", s.noiseless);
  get("vocab", s.vocab);
  get("conditions", s.conditions);
  get("profiles", s.profiles);
  s.validate();
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s = DatasetSpec{};
  merge_json(j, s);
}

/// Generates sequence i of a dataset; depends only on (spec, seed, i).
inline VideoSequence generate_sequence(const DatasetSpec& spec, std::uint64_t seed, std::size_t i) {
  const std::uint64_t seq_seed = derive_seed(seed, i);
  const CaptureCondition cond = spec.condition(i);
  const auto profiles = spec.sensor_profiles();
  Rng rng(derive_seed(seq_seed, 1));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double angle = 2.0 * std::acos(-1.0) * unit(rng);
  const double speed = spec.max_speed * unit(rng);
  SceneSpec scene;
  scene.height = spec.height;
  scene.width = spec.width;
  scene.octaves = spec.octaves;
  scene.base_period = spec.base_period;
  scene.velocity_x = speed * std::cos(angle);
  scene.velocity_y = speed * std::sin(angle);
  scene.illumination = spec.min_illumination + (spec.max_illumination - spec.min_illumination) * unit(rng);

  VideoSequence seq;
  seq.condition = cond;
  seq.profile = profiles.at(cond.sensor_id);
  seq.scene_seed = derive_seed(seq_seed, 2);
  const auto rgb = synth_clean_video(scene, cond, spec.frames, seq.scene_seed);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    seq.clean.push_back(mosaic(rgb[t]));
    seq.noisy.push_back(spec.noiseless ? seq.clean.back()
                                       : apply_noise(seq.clean.back(), cond, seq.profile, derive_seed(seq_seed, 3, t)));
  }
  return seq;
}

struct DatasetInfo {
  nlohmann::json manifest;
  std::string manifest_hash;
};

inline std::string sequence_content_hash(const fs::path& dir, std::size_t frames) {
  std::uint64_t h = fnv1a(read_bytes(dir / "meta.json"));
  for (std::size_t t = 0; t < frames; ++t) {
    h = fnv1a(read_bytes(dir / "noisy" / frame_name(t)), h);
    h = fnv1a(read_bytes(dir / "clean" / frame_name(t)), h);
  }
  return hex64(h);
}

/// Writes `spec.sequences` sequences plus manifest.json under `dir`. The
/// manifest records each sequence's split and a content hash, so its own hash
/// identifies the whole dataset byte for byte.
inline DatasetInfo make_dataset(const fs::path& dir, const DatasetSpec& spec, std::uint64_t seed, int threads = 1) {
  spec.validate();
  fs::create_directories(dir);
  parallel_for(spec.sequences, threads,
               [&](std::size_t i) { save_sequence(generate_sequence(spec, seed, i), dir / sequence_name(i)); });
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < spec.sequences; ++i) {
    const std::string id = sequence_name(i);
    entries.push_back({{"id", id},
                       {"split", i + spec.holdout >= spec.sequences ? "test" : "train"},
                       {"condition", spec.condition(i)},
                       {"content_hash", sequence_content_hash(dir / id, spec.frames)}});
  }
  nlohmann::json manifest{{"format", "darkvrai-dataset/1"},
                          {"seed", seed},
                          {"frames", spec.frames},
                          {"shape", {spec.height, spec.width}},
                          {"pattern", "RGGB"},
                          {"vocabulary", spec.vocab},
                          {"sequences", entries}};
  write_json(dir / "manifest.json", manifest);
  return {manifest, hex64(fnv1a(manifest.dump()))};
}

struct Dataset {
  fs::path root;
  nlohmann::json manifest;
  std::vector<std::string> ids;
  std::vector<std::string> splits;
  std::vector<VideoSequence> sequences;

  std::size_t size() const { return sequences.size(); }

  std::vector<std::size_t> indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (split.empty() || splits[i] == split) out.push_back(i);
    return out;
  }
};

/// Loads every sequence listed in manifest.json.
inline Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  Dataset ds;
  ds.root = dir;
  ds.manifest = read_json(dir / "manifest.json");
  try {
    for (const auto& e : ds.manifest.at("sequences")) {
      ds.ids.push_back(e.at("id").get<std::string>());
      ds.splits.push_back(e.value("split", std::string("train")));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": invalid manifest (" + e.what() + ")");
  }
  for (const auto& id : ds.ids) ds.sequences.push_back(load_sequence(dir / id));
  return ds;
}

inline std::string manifest_hash(const fs::path& dir) { return hex64(fnv1a(read_json(dir / "manifest.json").dump())); }

}  // namespace darkvrai
