#pragma once

// Self-contained invariant suites (gradient checks, scan equivalence, AdaLN
// statistics, noise-model moments) and the scan throughput benchmark. Each
// check reports a measured value against its limit so callers can print margins.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "darkvrai/blocks.hpp"
#include "darkvrai/conditioning.hpp"
#include "darkvrai/gradcheck.hpp"
#include "darkvrai/metrics.hpp"
#include "darkvrai/model.hpp"
#include "darkvrai/ops.hpp"
#include "darkvrai/raw_data.hpp"
#include "darkvrai/scan.hpp"

namespace darkvrai {

struct CheckResult {
  std::string suite;
  std::string name;
  double value = 0.0;  // measured error (smaller is better)
  double limit = 0.0;  // pass iff value <= limit
  std::size_t instances = 0;
  std::string detail;

  bool passed() const { return std::isfinite(value) && value <= limit; }
  /// limit / value; above 1 means headroom.
  double margin() const { return value > 0 ? limit / value : std::numeric_limits<double>::infinity(); }
};

struct SuiteReport {
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed(); });
  }
  void append(const SuiteReport& o) {
    checks.insert(checks.end(), o.checks.begin(), o.checks.end());
    seconds += o.seconds;
  }
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  int threads = 1;
  std::size_t gradcheck_instances = 20;
  std::size_t noise_configs = 20;
  std::size_t noise_samples = 1000000;
  std::size_t scan_seeds = 10;
  bool inject_fault = false;  // swap in a backward rule with the wrong sign
};

inline std::string format_check(const CheckResult& c) {
  std::ostringstream os;
  os << (c.passed() ? "PASS " : "FAIL ") << c.suite << "/" << c.name << ": " << std::setprecision(3) << c.value
     << " <= " << c.limit << " (margin " << std::setprecision(3) << c.margin() << "x, " << c.instances
     << " instances)";
  if (!c.detail.empty()) os << " " << c.detail;
  return os.str();
}

namespace detail {

template <typename F>
SuiteReport timed(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport r = f();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// silu whose backward rule has the wrong sign; used to prove the gradient suite can fail.
inline Tensor<double> faulty_silu(const Tensor<double>& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
  return record<double>(x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      gx[i] -= g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

using Inputs = std::vector<Tensor<double>>;

}  // namespace detail

/// Autodiff vs central differences (h = 1e-5, float64) for every block type.
inline SuiteReport verify_gradcheck(const VerifyOptions& opt) {
  return detail::timed([&] {
    using detail::Inputs;
    using detail::pick;
    SuiteReport report;
    constexpr double kTol = 1e-4;
    auto run = [&](const std::string& name, std::size_t coords,
                   const std::function<GradCheckResult(Rng&, const GradCheckOptions&)>& instance) {
      GradCheckResult worst;
      GradCheckOptions gopt;
      gopt.max_coords_per_input = coords;
      for (std::size_t i = 0; i < opt.gradcheck_instances; ++i) {
        Rng rng(derive_seed(opt.seed, fnv1a(name), i));
        worst.merge(instance(rng, gopt));
      }
      report.checks.push_back({"gradcheck", name, worst.max_rel_error, kTol, opt.gradcheck_instances, worst.worst});
    };
    // Parameters of a freshly built block become extra gradcheck inputs.
    auto with_params = [](Inputs inputs, const ParameterSet<double>& ps) {
      for (const auto& [n, t] : ps) inputs.push_back(t);
      return inputs;
    };

    run("conv2d", 0, [](Rng& rng, const GradCheckOptions& g) {
      const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), k = 2 * pick(rng, 0, 1) + 1;
      const std::size_t stride = pick(rng, 1, 2), pad = pick(rng, 0, k / 2);
      return gradcheck(
          [=](const Inputs& v) { return conv2d(v[0], v[1], v[2], {stride, pad, 1}); },
          {random_tensor({pick(rng, 1, 2), cin, pick(rng, 3, 5), pick(rng, 3, 5)}, rng),
           random_tensor({cout, cin, k, k}, rng), random_tensor({cout}, rng)},
          rng, g);
    });
    run("linear", 0, [](Rng& rng, const GradCheckOptions& g) {
      const std::size_t in = pick(rng, 1, 5), out = pick(rng, 1, 5);
      return gradcheck([](const Inputs& v) { return linear(v[0], v[1], v[2]); },
                       {random_tensor({pick(rng, 1, 4), in}, rng), random_tensor({out, in}, rng),
                        random_tensor({out}, rng)},
                       rng, g);
    });
    const bool fault = opt.inject_fault;
    run("silu", 0, [fault](Rng& rng, const GradCheckOptions& g) {
      return gradcheck(
          [fault](const Inputs& v) { return fault ? detail::faulty_silu(v[0]) : silu(v[0]); },
          {random_tensor({pick(rng, 1, 3), pick(rng, 1, 6)}, rng, -4.0, 4.0)}, rng, g);
    });
    run("ada_ln", 0, [](Rng& rng, const GradCheckOptions& g) {
      const std::size_t B = pick(rng, 1, 2), C = pick(rng, 1, 3), d = pick(rng, 2, 4);
      return gradcheck(
          [](const Inputs& v) {
            auto gb = chunk(linear(v[1], v[2], v[3]), 1, 2);
            return ada_ln(v[0], gb[0], gb[1], 1e-5);
          },
          {random_tensor({B, C, pick(rng, 2, 3), pick(rng, 2, 3)}, rng), random_tensor({B, d}, rng),
           random_tensor({2 * C, d}, rng), random_tensor({2 * C}, rng)},
          rng, g);
    });
    run("channel_attention", 6, [&](Rng& rng, const GradCheckOptions& g) {
      ParameterSet<double> ps(rng(), InitMode::kRandom);
      const std::size_t C = 2 * pick(rng, 1, 2);
      ChannelAttention<double> ca(ps, "ca", C, 2);
      return gradcheck([&](const Inputs& v) { return ca.forward(v[0]); },
                       with_params({random_tensor({pick(rng, 1, 2), C, 3, 3}, rng)}, ps), rng, g);
    });
    run("boss_module", 6, [&](Rng& rng, const GradCheckOptions& g) {
      ParameterSet<double> ps(rng(), InitMode::kRandom);
      const std::size_t C = 2 * pick(rng, 1, 2);
      BossModule<double> m(ps, "boss", C, pick(rng, 1, 3));
      const ScanOptions so{ScanKernel::kParallel, pick(rng, 1, 5), 1};
      return gradcheck([&](const Inputs& v) { return m.forward(v[0], so); },
                       with_params({random_tensor({pick(rng, 1, 3), C, 2, pick(rng, 1, 3)}, rng)}, ps), rng, g);
    });
    run("boss_block", 6, [&](Rng& rng, const GradCheckOptions& g) {
      ParameterSet<double> ps(rng(), InitMode::kRandom);
      BossBlock<double> b(ps, "bb", 4, 2, 2, 6, true);
      return gradcheck([&](const Inputs& v) { return b.forward(v[0], v[1], {ScanKernel::kParallel, 3, 1}); },
                       with_params({random_tensor({pick(rng, 1, 3), 4, 2, 2}, rng), random_tensor({1, 6}, rng)}, ps),
                       rng, g);
    });
    run("naf_block", 6, [&](Rng& rng, const GradCheckOptions& g) {
      ParameterSet<double> ps(rng(), InitMode::kRandom);
      NafBlock<double> b(ps, "nb", 4, 6, true);
      return gradcheck([&](const Inputs& v) { return b.forward(v[0], v[1]); },
                       with_params({random_tensor({1, 4, 3, 3}, rng), random_tensor({1, 6}, rng)}, ps), rng, g);
    });
    run("tiny_model", 2, [&](Rng& rng, const GradCheckOptions& g) {
      ModelConfig c;
      c.channels = 4;
      c.frames = 2;
      c.num_scales = 1;
      c.enc_blocks = c.bottleneck_blocks = c.dec_blocks = 1;
      c.align_levels = 1;
      c.d_cc = 6;
      c.embed_width = 3;
      c.state_dim = 2;
      c.ca_reduction = 2;
      DarkVraiModel<double> model(c, rng(), InitMode::kRandom);
      const CaptureCondition cond{pick(rng, 0, 3), c.vocab.illuminance_lx[pick(rng, 0, 2)], c.vocab.fps[pick(rng, 0, 2)]};
      Inputs in{random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0)};
      for (const auto& [n, t] : model.parameters()) in.push_back(t);
      return gradcheck([&](const Inputs& v) { return model.forward(v[0], cond); }, in, rng, g);
    });
    run("combined_loss", 0, [](Rng& rng, const GradCheckOptions& g) {
      auto target = random_tensor({8, 8}, rng, 0.0, 1.0);
      auto pred = add(target, random_tensor({8, 8}, rng, -0.2, 0.2));
      return gradcheck([](const Inputs& v) { return combined_loss(v[0], v[1]); }, {pred, target}, rng, g);
    });
    return report;
  });
}

namespace detail {

/// Worst |parallel - sequential| over seeds, chunks and thread counts for one
/// length; infinity if two thread counts disagree bitwise.
template <typename T>
double scan_deviation(std::size_t L, const VerifyOptions& opt, const std::vector<std::size_t>& chunks,
                      const std::vector<int>& threads) {
  const std::size_t D = 4, N = 8;
  double worst = 0.0;
  for (std::size_t s = 0; s < opt.scan_seeds; ++s) {
    const std::uint64_t seed = derive_seed(opt.seed, L, s);
    Rng rng(seed);
    ParameterSet<T> ps(seed, InitMode::kRandom);
    auto p = SelectiveScanParams<T>::create(ps, "scan", D, N);
    BurstSequence<T> seq{random_tensor({L, D}, rng).template cast<T>(), 1, 1, L};
    NoGradGuard guard;
    const auto ref = scan_sequential(seq, p);
    for (std::size_t chunk : chunks) {
      std::vector<T> first;
      for (int t : threads) {
        const auto out = scan_parallel(seq, p, chunk, t);
        for (std::size_t i = 0; i < out.numel(); ++i)
          worst = std::max(worst, std::fabs(double(out[i]) - double(ref[i])));
        std::vector<T> v(out.data().begin(), out.data().end());
        if (first.empty()) first = std::move(v);
        else if (v != first) return std::numeric_limits<double>::infinity();
      }
    }
  }
  return worst;
}

}  // namespace detail

/// Parallel vs sequential selective scan across lengths, seeds, chunk sizes
/// and thread counts. Thread count must not change a single bit.
inline SuiteReport verify_scan(const VerifyOptions& opt) {
  return detail::timed([&] {
    SuiteReport report;
    const std::vector<std::size_t> chunks{1, 7, 64, 1000};
    const std::vector<int> threads{1, 2, 4};
    const std::size_t instances = opt.scan_seeds * chunks.size() * threads.size();
    for (std::size_t L : {1u, 2u, 7u, 64u, 1000u, 4096u}) {
      report.checks.push_back({"scan", "f32/L=" + std::to_string(L), detail::scan_deviation<float>(L, opt, chunks, threads),
                               1e-5, instances, ""});
      report.checks.push_back({"scan", "f64/L=" + std::to_string(L),
                               detail::scan_deviation<double>(L, opt, chunks, threads), 1e-9, instances, ""});
    }
    return report;
  });
}

/// Per-sample normalization statistics, constant-input and hand-evaluated cases.
inline SuiteReport verify_adaln(const VerifyOptions& opt) {
  return detail::timed([&] {
    SuiteReport report;
    constexpr double kEps = 1e-5;
    double mean_err = 0.0, var_err = 0.0, shift_err = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < opt.gradcheck_instances; ++i, ++n) {
      Rng rng(derive_seed(opt.seed, 0xada, i));
      const std::size_t B = detail::pick(rng, 1, 3), C = detail::pick(rng, 1, 6);
      const double scale = std::exp(std::uniform_real_distribution<double>(-3.0, 3.0)(rng));
      auto x = add_scalar(mul_scalar(random_tensor({B, C, detail::pick(rng, 1, 5), detail::pick(rng, 1, 5)}, rng), scale),
                          std::uniform_real_distribution<double>(-10.0, 10.0)(rng));
      auto y = ada_ln(x, Tensor<double>::ones({1, C}), Tensor<double>::zeros({1, C}), kEps);
      const std::size_t S = x.numel() / B;
      for (std::size_t b = 0; b < B; ++b) {
        double mx = 0.0, vx = 0.0, my = 0.0, vy = 0.0;
        for (std::size_t k = 0; k < S; ++k) mx += x[b * S + k] / S;
        for (std::size_t k = 0; k < S; ++k) vx += (x[b * S + k] - mx) * (x[b * S + k] - mx) / S;
        for (std::size_t k = 0; k < S; ++k) my += y[b * S + k] / S;
        for (std::size_t k = 0; k < S; ++k) vy += (y[b * S + k] - my) * (y[b * S + k] - my) / S;
        mean_err = std::max(mean_err, std::fabs(my));
        var_err = std::max(var_err, std::fabs(vy - vx / (vx + kEps)));
      }
      auto g = random_tensor({B, C}, rng), be = random_tensor({B, C}, rng);
      auto a = ada_ln(x, g, be, kEps), s = ada_ln(add_scalar(x, 2.5), g, be, kEps);
      for (std::size_t k = 0; k < a.numel(); ++k) shift_err = std::max(shift_err, std::fabs(a[k] - s[k]));
    }
    report.checks.push_back({"adaln", "pre_affine_mean", mean_err, 1e-6, n, ""});
    report.checks.push_back({"adaln", "pre_affine_variance", var_err, 1e-6, n, ""});
    report.checks.push_back({"adaln", "shift_invariance", shift_err, 1e-6, n, ""});

    // Constant input: every output equals beta exactly. The constant is dyadic
    // so the mean is exact and x - mu is exactly zero.
    Rng rng(derive_seed(opt.seed, 0xc0));
    auto beta = random_tensor({2, 3}, rng);
    auto y = ada_ln(add_scalar(Tensor<double>::zeros({2, 3, 4, 4}), 0.75), random_tensor({2, 3}, rng), beta, kEps);
    double const_err = 0.0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t k = 0; k < 16; ++k) const_err = std::max(const_err, std::fabs(y[(b * 3 + c) * 16 + k] - beta[b * 3 + c]));
    report.checks.push_back({"adaln", "constant_input_is_beta", const_err, 0.0, 1, ""});

    // [[1,2],[3,4]], gamma [1,2], beta [0,1]: mu 2.5, var 1.25.
    auto h = ada_ln(Tensor<double>({1, 2, 1, 2}, {1, 2, 3, 4}), Tensor<double>({1, 2}, {1, 2}),
                    Tensor<double>({1, 2}, {0, 1}), kEps);
    const double sd = std::sqrt(1.25 + kEps);
    const double expect[] = {-1.5 / sd, -0.5 / sd, 2 * 0.5 / sd + 1, 2 * 1.5 / sd + 1};
    double hand = 0.0;
    for (std::size_t k = 0; k < 4; ++k) hand = std::max(hand, std::fabs(h[k] - expect[k]));
    report.checks.push_back({"adaln", "hand_oracle", hand, 1e-6, 1, ""});
    return report;
  });
}

/// Monte-Carlo moments of the noise model against its analytic mean and
/// variance, and monotonicity of the variance over the (lux, fps) grid.
inline SuiteReport verify_noise(const VerifyOptions& opt) {
  return detail::timed([&] {
    SuiteReport report;
    const auto vocab = ConditionVocabulary::desk();
    const auto profiles = synthetic_profiles(vocab.sensors);
    double mean_err = 0.0, var_err = 0.0;
    std::string worst;
    for (std::size_t i = 0; i < opt.noise_configs; ++i) {
      Rng rng(derive_seed(opt.seed, 0x7015e, i));
      const auto& p = profiles[detail::pick(rng, 0, profiles.size() - 1)];
      const CaptureCondition cond{p.sensor_id, vocab.illuminance_lx[detail::pick(rng, 0, 2)],
                                  vocab.fps[detail::pick(rng, 0, 2)]};
      const double clean = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
      const auto np = noise_params(cond, p);
      double s = 0.0, s2 = 0.0;
      for (std::size_t k = 0; k < opt.noise_samples; ++k) {
        const double v = sample_noisy(clean, np, rng);
        s += v;
        s2 += v * v;
      }
      const double n = static_cast<double>(opt.noise_samples);
      const double m = s / n, var = s2 / n - m * m;
      const double me = std::fabs(m - clean) / clean, ve = std::fabs(var - np.variance(clean)) / np.variance(clean);
      if (me > mean_err || ve > var_err) worst = cond.label() + " v=" + std::to_string(clean);
      mean_err = std::max(mean_err, me);
      var_err = std::max(var_err, ve);
    }
    report.checks.push_back({"noise", "mean_relative_error", mean_err, 0.01, opt.noise_configs, worst});
    report.checks.push_back({"noise", "variance_relative_error", var_err, 0.05, opt.noise_configs, worst});

    // Count grid violations: variance must fall with lux and rise with fps.
    double violations = 0.0;
    std::size_t pairs = 0;
    for (const auto& p : profiles)
      for (double clean : {0.0, 0.2, 1.0}) {
        for (double fps : vocab.fps)
          for (std::size_t l = 1; l < vocab.illuminance_lx.size(); ++l, ++pairs)
            violations += noise_params({p.sensor_id, vocab.illuminance_lx[l], fps}, p).variance(clean) >=
                          noise_params({p.sensor_id, vocab.illuminance_lx[l - 1], fps}, p).variance(clean);
        for (double lux : vocab.illuminance_lx)
          for (std::size_t f = 1; f < vocab.fps.size(); ++f, ++pairs)
            violations += noise_params({p.sensor_id, lux, vocab.fps[f]}, p).variance(clean) <=
                          noise_params({p.sensor_id, lux, vocab.fps[f - 1]}, p).variance(clean);
      }
    report.checks.push_back({"noise", "monotonicity_violations", violations, 0.0, pairs, ""});
    return report;
  });
}

inline const std::vector<std::string>& verify_suites() {
  static const std::vector<std::string> names{"gradcheck", "scan", "adaln", "noise"};
  return names;
}

inline SuiteReport run_verify(const std::string& suite, const VerifyOptions& opt) {
  if (suite == "gradcheck") return verify_gradcheck(opt);
  if (suite == "scan") return verify_scan(opt);
  if (suite == "adaln") return verify_adaln(opt);
  if (suite == "noise") return verify_noise(opt);
  if (suite == "all") {
    SuiteReport all;
    for (const auto& s : verify_suites()) all.append(run_verify(s, opt));
    return all;
  }
  throw ConfigError("unknown verify suite '" + suite + "' (expected gradcheck, scan, adaln, noise or all)");
}

// ---------------------------------------------------------------------------
// Scan benchmark

struct BenchRow {
  std::size_t length = 0;
  std::string kernel;  // "seq" or "par"
  int threads = 1;
  double tokens_per_second = 0.0;
  double max_abs_diff_vs_seq = 0.0;
};

/// Forward-only float32 selective scan over D = 8 channels, N = 8 states.
/// Each configuration is repeated until at least `min_seconds` have elapsed.
inline std::vector<BenchRow> bench_scan(const std::vector<std::size_t>& lengths, const std::vector<int>& threads,
                                        bool include_sequential, std::uint64_t seed = 0, double min_seconds = 0.05) {
  std::vector<BenchRow> rows;
  NoGradGuard guard;
  for (std::size_t L : lengths) {
    if (L == 0) throw ConfigError("bench-scan: lengths must be positive");
    Rng rng(derive_seed(seed, L));
    ParameterSet<float> ps(seed, InitMode::kRandom);
    auto p = SelectiveScanParams<float>::create(ps, "scan", 8, 8);
    BurstSequence<float> seq{random_tensor({L, 8}, rng).cast<float>(), 1, 1, L};
    const auto ref = scan_sequential(seq, p);
    auto measure = [&](const std::function<Tensor<float>()>& f, Tensor<float>& out) {
      std::size_t reps = 0;
      const auto t0 = std::chrono::steady_clock::now();
      double elapsed = 0.0;
      do {
        out = f();
        ++reps;
        elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } while (elapsed < min_seconds);
      return static_cast<double>(L * reps) / elapsed;
    };
    Tensor<float> out;
    if (include_sequential) {
      rows.push_back({L, "seq", 1, measure([&] { return scan_sequential(seq, p); }, out), 0.0});
    }
    for (int t : threads) {
      if (t < 1) throw ConfigError("bench-scan: thread counts must be >= 1");
      const double tps = measure([&] { return scan_parallel(seq, p, 64, t); }, out);
      double diff = 0.0;
      for (std::size_t i = 0; i < out.numel(); ++i) diff = std::max(diff, std::fabs(double(out[i]) - double(ref[i])));
      rows.push_back({L, "par", t, tps, diff});
    }
  }
  return rows;
}

}  // namespace darkvrai
