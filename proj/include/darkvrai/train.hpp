#pragma once

// Training loop, patch sampling, held-out evaluation and the ablation harness.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "darkvrai/checkpoint.hpp"
#include "darkvrai/error.hpp"
#include "darkvrai/metrics.hpp"
#include "darkvrai/model.hpp"
#include "darkvrai/optim.hpp"
#include "darkvrai/parallel.hpp"
#include "darkvrai/raw_data.hpp"

namespace darkvrai {

struct TrainConfig {
  std::size_t iterations = 2000;
  std::size_t batch_size = 4;
  std::size_t patch_size = 32;
  std::size_t stride = 24;
  double lr_max = 2e-4;
  double lr_min = 1e-6;
  AdamConfig adam;
  double lambda_ssim = 1.0;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 0;  // 0 disables intermediate checkpoints
  int threads = 1;

  bool operator==(const TrainConfig& o) const {
    return iterations == o.iterations && batch_size == o.batch_size && patch_size == o.patch_size &&
           stride == o.stride && lr_max == o.lr_max && lr_min == o.lr_min && adam.beta1 == o.adam.beta1 &&
           adam.beta2 == o.adam.beta2 && adam.eps == o.adam.eps && lambda_ssim == o.lambda_ssim && seed == o.seed &&
           eval_interval == o.eval_interval && threads == o.threads;
  }

  void validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (patch_size == 0 || patch_size % 2) throw ConfigError("train: patch_size must be even and positive");
    if (stride < 2 || stride % 2) throw ConfigError("train: stride must be even and >= 2 to keep the Bayer phase");
    if (!(lr_max > 0) || !(lr_min >= 0) || lr_min > lr_max) throw ConfigError("train: need 0 <= lr_min <= lr_max, lr_max > 0");
    if (!(lambda_ssim >= 0)) throw ConfigError("train: lambda_ssim must be non-negative");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
    adam.validate();
  }

  void validate(const ModelConfig& model) const {
    validate();
    if (patch_size % model.size_multiple()) {
      throw ConfigError("train: patch_size " + std::to_string(patch_size) + " must be divisible by " +
                        std::to_string(model.size_multiple()) + " (2 x 2^num_scales)");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"iterations", c.iterations}, {"batch_size", c.batch_size},   {"patch_size", c.patch_size},
                     {"stride", c.stride},         {"lr_max", c.lr_max},           {"lr_min", c.lr_min},
                     {"beta1", c.adam.beta1},      {"beta2", c.adam.beta2},        {"adam_eps", c.adam.eps},
                     {"lambda_ssim", c.lambda_ssim}, {"seed", c.seed},             {"eval_interval", c.eval_interval},
                     {"threads", c.threads}};
}

inline void merge_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{"iterations", "batch_size", "patch_size", "stride",   "lr_max",
                                           "lr_min",     "beta1",      "beta2",      "adam_eps", "lambda_ssim",
                                           "seed",       "eval_interval", "threads"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("train config: unknown key '" + it.key() + "'");
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("iterations", c.iterations);
  get("batch_size", c.batch_size);
  get("patch_size", c.patch_size);
  get("stride", c.stride);
  get("lr_max", c.lr_max);
  get("lr_min", c.lr_min);
  get("beta1", c.adam.beta1);
  get("beta2", c.adam.beta2);
  get("adam_eps", c.adam.eps);
  get("lambda_ssim", c.lambda_ssim);
  get("seed", c.seed);
  get("eval_interval", c.eval_interval);
  get("threads", c.threads);
  c.validate();
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  merge_json(j, c);
}

inline std::string config_hash(const nlohmann::json& j) { return hex64(fnv1a(j.dump())); }

// ---------------------------------------------------------------------------
// Patches

struct PatchOrigin {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const PatchOrigin&) const = default;
};

/// Grid of crop origins 0, stride, 2*stride, ... that keep the patch inside the
/// frame. Even strides keep every origin on an RGGB phase boundary.
inline std::vector<PatchOrigin> patch_origins(std::size_t height, std::size_t width, std::size_t patch,
                                              std::size_t stride) {
  if (stride < 2 || stride % 2) throw ConfigError("patch sampling: stride must be even and >= 2");
  if (patch == 0 || patch % 2) throw ConfigError("patch sampling: patch size must be even and positive");
  if (patch > height || patch > width) {
    throw ShapeError("patch sampling: patch " + std::to_string(patch) + " exceeds frame " + std::to_string(height) +
                     "x" + std::to_string(width));
  }
  std::vector<PatchOrigin> out;
  for (std::size_t r = 0; r + patch <= height; r += stride)
    for (std::size_t c = 0; c + patch <= width; c += stride) out.push_back({r, c});
  return out;
}

struct PatchSample {
  std::size_t sequence = 0;
  PatchOrigin origin;
};

/// The frames fed to the model: the last `frames` of the burst, so the
/// sequence's final frame is the base frame.
inline std::size_t first_model_frame(const VideoSequence& seq, std::size_t frames) {
  if (seq.frames() < frames) {
    throw ShapeError("sequence has " + std::to_string(seq.frames()) + " frames; the model needs " +
                     std::to_string(frames));
  }
  return seq.frames() - frames;
}

/// Crops one sample: noisy burst [T,1,p,p] and clean base frame [1,p,p].
/// The same window is used for every frame; nothing is flipped or rotated.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> crop_sample(const VideoSequence& seq, PatchOrigin o, std::size_t patch,
                                            std::size_t frames) {
  const std::size_t first = first_model_frame(seq, frames);
  if (o.row % 2 || o.col % 2 || o.row + patch > seq.height() || o.col + patch > seq.width()) {
    throw ShapeError("crop_sample: origin breaks the Bayer phase or leaves the frame");
  }
  std::vector<T> noisy(frames * patch * patch), clean(patch * patch);
  for (std::size_t t = 0; t < frames; ++t) {
    const auto& f = seq.noisy[first + t];
    for (std::size_t r = 0; r < patch; ++r)
      for (std::size_t c = 0; c < patch; ++c)
        noisy[(t * patch + r) * patch + c] = static_cast<T>(f.at(o.row + r, o.col + c));
  }
  const auto& base = seq.clean.back();
  for (std::size_t r = 0; r < patch; ++r)
    for (std::size_t c = 0; c < patch; ++c) clean[r * patch + c] = static_cast<T>(base.at(o.row + r, o.col + c));
  return {Tensor<T>({frames, 1, patch, patch}, std::move(noisy)), Tensor<T>({1, patch, patch}, std::move(clean))};
}

/// Full frames: noisy burst [T,1,H,W] and the two base frames [1,H,W].
template <typename T>
struct FullFrames {
  Tensor<T> noisy;
  Tensor<T> noisy_base;
  Tensor<T> clean_base;
};

template <typename T>
FullFrames<T> full_frames(const VideoSequence& seq, std::size_t frames) {
  const std::size_t first = first_model_frame(seq, frames), H = seq.height(), W = seq.width();
  std::vector<T> noisy;
  noisy.reserve(frames * H * W);
  for (std::size_t t = first; t < seq.frames(); ++t) noisy.insert(noisy.end(), seq.noisy[t].data.begin(), seq.noisy[t].data.end());
  const auto& nb = seq.noisy.back().data;
  const auto& cb = seq.clean.back().data;
  return {Tensor<T>({frames, 1, H, W}, std::move(noisy)), Tensor<T>({1, H, W}, std::vector<T>(nb.begin(), nb.end())),
          Tensor<T>({1, H, W}, std::vector<T>(cb.begin(), cb.end()))};
}

/// Deterministic batch for iteration `iter`: each element draws a training
/// sequence and one of its grid origins from a stream derived from (seed, iter, b).
class PatchSampler {
 public:
  PatchSampler(const Dataset& ds, std::vector<std::size_t> indices, std::size_t patch, std::size_t stride)
      : indices_(std::move(indices)) {
    if (indices_.empty()) throw ConfigError("training needs at least one sequence");
    for (std::size_t i : indices_) {
      const auto& s = ds.sequences.at(i);
      origins_.push_back(patch_origins(s.height(), s.width(), patch, stride));
    }
  }

  std::vector<PatchSample> batch(std::uint64_t seed, std::size_t iter, std::size_t batch_size) const {
    std::vector<PatchSample> out;
    for (std::size_t b = 0; b < batch_size; ++b) {
      Rng rng(derive_seed(seed, iter, b));
      const std::size_t k = std::uniform_int_distribution<std::size_t>(0, indices_.size() - 1)(rng);
      const auto& o = origins_[k];
      out.push_back({indices_[k], o[std::uniform_int_distribution<std::size_t>(0, o.size() - 1)(rng)]});
    }
    return out;
  }

  const std::vector<std::vector<PatchOrigin>>& origins() const { return origins_; }

 private:
  std::vector<std::size_t> indices_;
  std::vector<std::vector<PatchOrigin>> origins_;
};

// ---------------------------------------------------------------------------
// Training

struct LossRow {
  std::size_t iter = 0;  // optimizer step index, starting at 0
  double lr = 0.0;
  double loss = 0.0;
  bool operator==(const LossRow&) const = default;
};

struct TrainHooks {
  std::function<void(const LossRow&)> on_step;
  std::function<void(std::size_t completed)> on_interval;  // every eval_interval steps
  std::size_t max_steps = std::numeric_limits<std::size_t>::max();  // stop early (for resumable runs)
};

template <typename T>
struct TrainState {
  AdamState adam;
  std::size_t iteration = 0;  // completed optimizer steps
};

/// Trains `model` from state.iteration up to cfg.iterations on the "train"
/// split (or every sequence when no split is marked train). Throws
/// NanLossError on a non-finite loss.
template <typename T>
std::vector<LossRow> train(DarkVraiModel<T>& model, TrainState<T>& state, const TrainConfig& cfg, const Dataset& ds,
                           const TrainHooks& hooks = {}) {
  cfg.validate(model.config());
  auto indices = ds.indices("train");
  if (indices.empty()) indices = ds.indices("");
  if (indices.empty()) throw ConfigError("training dataset is empty");
  PatchSampler sampler(ds, indices, cfg.patch_size, cfg.stride);
  const std::size_t frames = model.config().frames;
  auto& ps = model.parameters();
  std::vector<LossRow> curve;
  std::size_t steps = 0;
  while (state.iteration < cfg.iterations && steps < hooks.max_steps) {
    const std::size_t it = state.iteration;
    const double lr = cosine_lr(it, cfg.iterations, cfg.lr_max, cfg.lr_min);
    const auto batch = sampler.batch(cfg.seed, it, cfg.batch_size);
    ps.zero_grad();
    Tensor<T> total;
    for (const auto& s : batch) {
      const auto& seq = ds.sequences[s.sequence];
      auto [noisy, clean] = crop_sample<T>(seq, s.origin, cfg.patch_size, frames);
      auto loss = combined_loss(model.forward(noisy, seq.condition), clean, cfg.lambda_ssim);
      total = total.defined() ? add(total, loss) : loss;
    }
    total = mul_scalar(total, 1.0 / static_cast<double>(batch.size()));
    const double value = static_cast<double>(total.item());
    if (!std::isfinite(value)) {
      std::ostringstream os;
      os << "non-finite loss at iteration " << it << " (lr " << lr << ", batch";
      for (const auto& s : batch) os << " " << ds.ids.at(s.sequence) << "@" << s.origin.row << "," << s.origin.col;
      os << ")";
      throw NanLossError(os.str());
    }
    backward(total);
    adam_step(ps, state.adam, lr, cfg.adam);
    ++state.iteration;
    ++steps;
    curve.push_back({it, lr, value});
    if (hooks.on_step) hooks.on_step(curve.back());
    if (hooks.on_interval && cfg.eval_interval && state.iteration % cfg.eval_interval == 0) {
      hooks.on_interval(state.iteration);
    }
  }
  return curve;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string provenance_line(const std::string& config_hash, std::uint64_t seed) {
  return "# config_hash=" + config_hash + " seed=" + std::to_string(seed) + "\n";
}

/// Loss curve CSV. When appending, the header is written only to a new file.
inline void write_loss_csv(const fs::path& path, const std::vector<LossRow>& rows, const std::string& provenance,
                           bool append = false) {
  const bool fresh = !append || !fs::exists(path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
  if (!out) throw IoError("cannot write " + path.string());
  if (fresh) out << provenance << "iter,lr,loss\n";
  for (const auto& r : rows) out << r.iter << "," << format_double(r.lr) << "," << format_double(r.loss) << "\n";
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRow {
  std::string id;
  CaptureCondition condition;
  double psnr_db = 0.0;
  double ssim = 0.0;
  bool capped = false;
  double noisy_psnr_db = 0.0;  // clamped noisy base frame vs clean base frame
  double noisy_ssim = 0.0;
};

struct MetricMeans {
  std::size_t count = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double noisy_psnr_db = 0.0;
  double noisy_ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  MetricMeans aggregate;
  std::map<std::string, MetricMeans> by_condition;  // keyed by CaptureCondition::label()
};

inline MetricMeans mean_of(const std::vector<const EvalRow*>& rows) {
  MetricMeans m;
  m.count = rows.size();
  if (rows.empty()) return m;
  for (const auto* r : rows) {
    m.psnr_db += r->psnr_db;
    m.ssim += r->ssim;
    m.noisy_psnr_db += r->noisy_psnr_db;
    m.noisy_ssim += r->noisy_ssim;
  }
  const double n = static_cast<double>(rows.size());
  m.psnr_db /= n;
  m.ssim /= n;
  m.noisy_psnr_db /= n;
  m.noisy_ssim /= n;
  return m;
}

template <typename T>
Tensor<T> clamp_unit(const Tensor<T>& x) {
  std::vector<T> v(x.data().begin(), x.data().end());
  for (auto& e : v) e = std::clamp(e, T(0), T(1));
  return Tensor<T>(x.shape(), std::move(v));
}

/// Restores the base frame of every sequence in `split` ("" = all) at full
/// resolution and scores it on the mosaicked plane after clamping to [0, 1].
/// Sequences are processed in parallel; rows keep dataset order.
template <typename T>
EvalReport evaluate(const DarkVraiModel<T>& model, const Dataset& ds, const std::string& split = "", int threads = 1) {
  const auto indices = ds.indices(split);
  EvalReport report;
  report.rows.resize(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t k) {
    const auto& seq = ds.sequences[indices[k]];
    auto ff = full_frames<T>(seq, model.config().frames);
    auto restored = model.infer(ff.noisy, seq.condition);
    auto noisy = clamp_unit(ff.noisy_base);
    auto& row = report.rows[k];
    row.id = ds.ids[indices[k]];
    row.condition = seq.condition;
    const auto p = psnr(restored, ff.clean_base);
    row.psnr_db = p.db;
    row.capped = p.capped;
    row.ssim = ssim_value(restored, ff.clean_base);
    row.noisy_psnr_db = psnr(noisy, ff.clean_base).db;
    row.noisy_ssim = ssim_value(noisy, ff.clean_base);
  });
  std::vector<const EvalRow*> all;
  std::map<std::string, std::vector<const EvalRow*>> groups;
  for (const auto& r : report.rows) {
    all.push_back(&r);
    groups[r.condition.label()].push_back(&r);
  }
  report.aggregate = mean_of(all);
  for (const auto& [key, rows] : groups) report.by_condition[key] = mean_of(rows);
  return report;
}

inline void write_eval_csv(const fs::path& path, const EvalReport& report, const std::string& provenance) {
  std::ostringstream os;
  os << provenance << "sequence_id,sensor_id,illuminance_lx,fps,psnr_db,ssim,psnr_capped,noisy_psnr_db,noisy_ssim\n";
  for (const auto& r : report.rows) {
    os << r.id << "," << r.condition.sensor_id << "," << format_double(r.condition.illuminance_lx) << ","
       << format_double(r.condition.fps) << "," << format_double(r.psnr_db) << "," << format_double(r.ssim) << ","
       << (r.capped ? 1 : 0) << "," << format_double(r.noisy_psnr_db) << "," << format_double(r.noisy_ssim) << "\n";
  }
  write_bytes(path, os.str());
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  std::string name;
  bool use_c3 = false;
  bool use_boss = false;
};

inline std::vector<AblationVariant> ablation_variants() {
  return {{"Baseline", false, false}, {"+C3", true, false}, {"+C3+BOSS", true, true}};
}

struct AblationRow {
  std::string variant;
  std::vector<double> psnr_db;  // one per seed
  std::vector<double> ssim;
  double psnr_mean = 0.0, psnr_std = 0.0, ssim_mean = 0.0, ssim_std = 0.0;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;
  double noisy_psnr_db = 0.0;
  double noisy_ssim = 0.0;
};

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

/// Trains each variant once per seed (model seed = training seed = s) with an
/// identical schedule and scores the held-out split ("test", else everything).
inline AblationTable ablation_run(const Dataset& ds, const std::vector<std::uint64_t>& seeds, const ModelConfig& base,
                                  TrainConfig tc, int threads = 1,
                                  const std::function<void(const std::string&)>& log = {}) {
  if (seeds.empty()) throw ConfigError("ablation: need at least one seed");
  const std::string split = ds.indices("test").empty() ? "" : "test";
  AblationTable table;
  table.seeds = seeds;
  for (const auto& v : ablation_variants()) {
    AblationRow row;
    row.variant = v.name;
    ModelConfig cfg = base;
    cfg.use_c3 = v.use_c3;
    cfg.use_boss = v.use_boss;
    for (std::uint64_t s : seeds) {
      DarkVraiModel<float> model(cfg, s);
      model.scan_options().threads = threads;
      TrainState<float> state;
      tc.seed = s;
      train(model, state, tc, ds);
      const auto rep = evaluate(model, ds, split, threads);
      row.psnr_db.push_back(rep.aggregate.psnr_db);
      row.ssim.push_back(rep.aggregate.ssim);
      table.noisy_psnr_db = rep.aggregate.noisy_psnr_db;
      table.noisy_ssim = rep.aggregate.noisy_ssim;
      if (log) log(v.name + " seed " + std::to_string(s) + ": PSNR " + format_double(rep.aggregate.psnr_db) + " dB");
    }
    std::tie(row.psnr_mean, row.psnr_std) = mean_std(row.psnr_db);
    std::tie(row.ssim_mean, row.ssim_std) = mean_std(row.ssim);
    table.rows.push_back(std::move(row));
  }
  return table;
}

inline void write_ablation_csv(const fs::path& path, const AblationTable& t, const std::string& provenance) {
  std::ostringstream os;
  os << provenance << "variant,seeds,psnr_mean_db,psnr_std_db,ssim_mean,ssim_std\n";
  for (const auto& r : t.rows) {
    os << r.variant << "," << r.psnr_db.size() << "," << format_double(r.psnr_mean) << "," << format_double(r.psnr_std)
       << "," << format_double(r.ssim_mean) << "," << format_double(r.ssim_std) << "\n";
  }
  write_bytes(path, os.str());
}

}  // namespace darkvrai
