// darkvrai: dataset generation, training, inference, evaluation, invariant
// suites and scan benchmarks behind one binary.
//
// Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "darkvrai/checkpoint.hpp"
#include "darkvrai/raw_data.hpp"
#include "darkvrai/train.hpp"
#include "darkvrai/verify.hpp"

using namespace darkvrai;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;
  DatasetSpec data;

  json resolved() const { return {{"model", model}, {"train", train}, {"data", data}}; }
  std::string hash() const { return config_hash(resolved()); }
};

/// Defaults overridden by the optional JSON file with sections model, train,
/// data and vocabulary (the latter shared by model and data).
RunConfig load_run_config(const std::string& path) {
  RunConfig c;
  if (path.empty()) return c;
  const json j = read_json(path);
  if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
  static const std::set<std::string> sections{"model", "train", "data", "vocabulary"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!sections.count(it.key())) throw ConfigError(path + ": unknown key '" + it.key() + "'");
  try {
    if (j.contains("vocabulary")) {
      const auto vocab = j.at("vocabulary").get<ConditionVocabulary>();
      c.model.vocab = vocab;
      c.data.vocab = vocab;
    }
    if (j.contains("model")) merge_json(j.at("model"), c.model);
    if (j.contains("data")) merge_json(j.at("data"), c.data);
    if (j.contains("train")) merge_json(j.at("train"), c.train);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

int default_threads() {
  if (const char* env = std::getenv("DARKVRAI_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

/// Accepts a checkpoint directory or a training run directory containing one.
fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::exists(p / "manifest.json")) return p;
  if (fs::exists(p / "checkpoint" / "manifest.json")) return p / "checkpoint";
  throw IoError("no checkpoint found at " + p.string());
}

std::string checkpoint_dtype(const fs::path& dir) {
  return read_json(dir / "manifest.json").value("dtype", std::string(LittleEndian<float>::kName));
}

struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;
};

Provenance checkpoint_provenance(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  const json extra = m.value("extra", json::object());
  return {extra.value("config_hash", config_hash(m.value("model", json::object()))), m.value("seed", std::uint64_t{0})};
}

// ---------------------------------------------------------------------------
// PNG preview

// libpng reports errors by longjmp; nothing with a destructor lives in this frame.
bool png_write_gray(png_structp png, png_infop info, FILE* fp, std::size_t h, std::size_t w, png_bytepp rows,
                    png_textp text) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_text(png, info, text, 1);
  png_write_info(png, info);
  png_write_image(png, rows);
  png_write_end(png, nullptr);
  return true;
}

/// 8-bit grayscale view of the mosaicked plane with gamma 1/2.2 after clamping to [0, 1].
void write_preview_png(const fs::path& path, std::size_t h, std::size_t w, const std::vector<float>& values,
                       const std::string& comment) {
  std::vector<png_byte> pixels(h * w);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double v = std::clamp(static_cast<double>(values[i]), 0.0, 1.0);
    pixels[i] = static_cast<png_byte>(std::lround(255.0 * std::pow(v, 1.0 / 2.2)));
  }
  std::vector<png_bytep> rows(h);
  for (std::size_t r = 0; r < h; ++r) rows[r] = pixels.data() + r * w;
  std::string key = "Comment", text = comment;
  png_text chunk{};
  chunk.compression = PNG_TEXT_COMPRESSION_NONE;
  chunk.key = key.data();
  chunk.text = text.data();
  chunk.text_length = text.size();

  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  const bool ok = png && info && png_write_gray(png, info, fp, h, w, rows.data(), &chunk);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  if (!ok) throw IoError("libpng failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Loss curve file, kept consistent across resumed runs

std::vector<std::string> previous_loss_rows(const fs::path& path, std::size_t before_iter) {
  std::vector<std::string> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("iter,", 0) == 0) continue;
    if (std::stoull(line.substr(0, line.find(','))) < before_iter) rows.push_back(line);
  }
  return rows;
}

void write_loss_file(const fs::path& path, const std::string& provenance, const std::vector<std::string>& kept,
                     const std::vector<LossRow>& rows) {
  std::ostringstream os;
  os << provenance << "iter,lr,loss\n";
  for (const auto& l : kept) os << l << "\n";
  for (const auto& r : rows) os << r.iter << "," << format_double(r.lr) << "," << format_double(r.loss) << "\n";
  write_bytes(path, os.str());
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenDataArgs {
  std::string out, config;
  std::optional<std::size_t> sequences;
  std::uint64_t seed = 0;
  int threads = 1;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  RunConfig c = load_run_config(a.config);
  if (a.sequences) {
    c.data.sequences = *a.sequences;
    // Keep a train split when fewer sequences than the default holdout are requested.
    if (c.data.holdout > c.data.sequences) c.data.holdout = c.data.sequences / 5;
  }
  c.data.validate();
  const fs::path out = a.out;
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out))) {
    if (!a.force) throw ConfigError("output directory " + out.string() + " is not empty; pass --force to overwrite");
    if (!fs::exists(out / "manifest.json")) {
      throw ConfigError("refusing to overwrite " + out.string() + ": it does not look like a dataset directory");
    }
    fs::remove_all(out);
  }
  const auto info = make_dataset(out, c.data, a.seed, a.threads);
  const std::string hash = c.hash();
  write_json(out / "config.json", json{{"config", c.resolved()}, {"config_hash", hash}, {"seed", a.seed}});
  std::cout << "sequences=" << c.data.sequences << " holdout=" << c.data.holdout << "\n"
            << "manifest_hash=" << info.manifest_hash << "\n"
            << "config_hash=" << hash << " seed=" << a.seed << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data, out, config, precision = "f32";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> stop_after;
  int threads = 1;
  bool resume = false, force = false;
};

template <typename T>
int run_train(const TrainArgs& a, const RunConfig& c) {
  const fs::path out = a.out, ck_dir = out / "checkpoint", loss_path = out / "loss.csv";
  const std::string hash = c.hash();
  const std::uint64_t seed = c.train.seed;
  c.train.validate(c.model);
  const Dataset ds = load_dataset(a.data);
  const json extra{{"config", c.resolved()}, {"config_hash", hash}, {"precision", a.precision}};

  TrainState<T> state;
  std::vector<std::string> kept;
  auto model = [&]() -> DarkVraiModel<T> {
    if (a.resume) {
      if (checkpoint_dtype(ck_dir) != LittleEndian<T>::kName) {
        throw ConfigError("resume: checkpoint precision differs from --precision " + a.precision);
      }
      auto ck = load_checkpoint<T>(ck_dir);
      if (ck.extra.value("config_hash", std::string()) != hash) {
        throw ConfigError("resume: config hash " + hash + " differs from the checkpoint's " +
                          ck.extra.value("config_hash", std::string("(none)")));
      }
      state.adam = std::move(ck.adam);
      state.iteration = ck.iteration;
      kept = previous_loss_rows(loss_path, state.iteration);
      return std::move(ck.model);
    }
    if (fs::exists(ck_dir) && !a.force) {
      throw ConfigError(out.string() + " already holds a checkpoint; pass --resume to continue or --force to restart");
    }
    return DarkVraiModel<T>(c.model, seed);
  }();
  model.scan_options().threads = a.threads;
  write_json(out / "config.json", json{{"config", c.resolved()}, {"config_hash", hash}, {"seed", seed}});

  const std::string provenance = provenance_line(hash, seed);
  std::vector<LossRow> rows;
  auto save = [&] {
    write_loss_file(loss_path, provenance, kept, rows);
    return save_checkpoint(ck_dir, model, seed, state.iteration, &state.adam, extra);
  };
  const auto held_out = ds.indices("test").empty() ? std::string() : std::string("test");
  TrainHooks hooks;
  if (a.stop_after) hooks.max_steps = *a.stop_after;
  hooks.on_step = [&](const LossRow& r) {
    rows.push_back(r);
    if (r.iter % 100 == 0) std::cerr << "iter " << r.iter << " lr " << format_double(r.lr) << " loss " << format_double(r.loss) << "\n";
  };
  hooks.on_interval = [&](std::size_t done) {
    save();
    const auto rep = evaluate(model, ds, held_out, a.threads);
    std::cerr << "iter " << done << ": held-out PSNR " << format_double(rep.aggregate.psnr_db) << " dB, SSIM "
              << format_double(rep.aggregate.ssim) << "\n";
  };
  try {
    train(model, state, c.train, ds, hooks);
  } catch (const NanLossError&) {
    write_loss_file(loss_path, provenance, kept, rows);
    throw;
  }
  const std::string ck_hash = save();
  std::cout << "iterations=" << state.iteration << "/" << c.train.iterations << "\n";
  if (!rows.empty()) std::cout << "final_loss=" << format_double(rows.back().loss) << "\n";
  std::cout << "checkpoint=" << ck_dir.string() << " checkpoint_hash=" << ck_hash << "\n"
            << "config_hash=" << hash << " seed=" << seed << "\n";
  return kExitOk;
}

int cmd_train(const TrainArgs& a) {
  RunConfig c = load_run_config(a.config);
  if (a.seed) c.train.seed = *a.seed;
  return a.precision == "f64" ? run_train<double>(a, c) : run_train<float>(a, c);
}

struct DenoiseArgs {
  std::string ckpt, seq, out;
  int threads = 1;
};

template <typename T>
int run_denoise(const DenoiseArgs& a, const fs::path& ck_dir) {
  const auto ck = load_checkpoint<T>(ck_dir);
  auto model = ck.model;
  model.scan_options().threads = a.threads;
  const VideoSequence seq = load_sequence(a.seq, false);
  model.config().vocab.check(seq.condition);
  const std::size_t frames = model.config().frames, first = first_model_frame(seq, frames);
  const std::size_t H = seq.height(), W = seq.width();
  std::vector<T> burst;
  burst.reserve(frames * H * W);
  for (std::size_t t = first; t < seq.frames(); ++t) burst.insert(burst.end(), seq.noisy[t].data.begin(), seq.noisy[t].data.end());
  Tensor<T> restored;
  {
    NoGradGuard guard;
    restored = model.forward(Tensor<T>({frames, 1, H, W}, std::move(burst)), seq.condition);
  }
  std::vector<float> values(restored.data().begin(), restored.data().end());
  const fs::path out = a.out;
  fs::create_directories(out);
  write_f32(out / "restored.f32", values);
  const auto prov = checkpoint_provenance(ck_dir);
  const std::string ck_hash = checkpoint_hash(ck_dir);
  write_json(out / "meta.json", json{{"shape", {H, W}},
                                    {"dtype", "float32-le"},
                                    {"pattern", "RGGB"},
                                    {"base_frame", seq.frames() - 1},
                                    {"condition", seq.condition},
                                    {"source", fs::absolute(a.seq).lexically_normal().string()},
                                    {"checkpoint_hash", ck_hash},
                                    {"config_hash", prov.config_hash},
                                    {"seed", prov.seed},
                                    {"preview", "preview.png"},
                                    {"preview_gamma", 1.0 / 2.2}});
  write_preview_png(out / "preview.png", H, W, values,
                    "config_hash=" + prov.config_hash + " seed=" + std::to_string(prov.seed));
  std::cout << "restored=" << (out / "restored.f32").string() << " shape=" << H << "x" << W << "\n"
            << "config_hash=" << prov.config_hash << " seed=" << prov.seed << "\n";
  return kExitOk;
}

int cmd_denoise(const DenoiseArgs& a) {
  const fs::path ck = resolve_checkpoint(a.ckpt);
  return checkpoint_dtype(ck) == LittleEndian<double>::kName ? run_denoise<double>(a, ck) : run_denoise<float>(a, ck);
}

struct EvalArgs {
  std::string ckpt, data, report, split;
  int threads = 1;
};

template <typename T>
int run_eval(const EvalArgs& a, const fs::path& ck_dir) {
  const auto ck = load_checkpoint<T>(ck_dir);
  auto model = ck.model;
  model.scan_options().threads = a.threads;
  const Dataset ds = load_dataset(a.data);
  for (std::size_t i : ds.indices(a.split)) model.config().vocab.check(ds.sequences[i].condition);
  const auto rep = evaluate(model, ds, a.split, a.threads);
  const auto prov = checkpoint_provenance(ck_dir);
  if (!a.report.empty()) {
    write_eval_csv(a.report, rep,
                   provenance_line(prov.config_hash, prov.seed) + "# checkpoint_hash=" + checkpoint_hash(ck_dir) +
                       " dataset_manifest_hash=" + manifest_hash(a.data) + "\n");
  }
  const auto& m = rep.aggregate;
  std::cout << "rows=" << rep.rows.size() << "\n"
            << "psnr_db=" << format_double(m.psnr_db) << " ssim=" << format_double(m.ssim) << "\n"
            << "noisy_psnr_db=" << format_double(m.noisy_psnr_db) << " noisy_ssim=" << format_double(m.noisy_ssim)
            << "\n";
  for (const auto& [label, cm] : rep.by_condition)
    std::cout << "  " << label << ": psnr_db=" << format_double(cm.psnr_db) << " ssim=" << format_double(cm.ssim) << "\n";
  std::cout << "config_hash=" << prov.config_hash << " seed=" << prov.seed << "\n";
  return kExitOk;
}

int cmd_eval(const EvalArgs& a) {
  const fs::path ck = resolve_checkpoint(a.ckpt);
  return checkpoint_dtype(ck) == LittleEndian<double>::kName ? run_eval<double>(a, ck) : run_eval<float>(a, ck);
}

struct VerifyArgs {
  std::string suite = "all";
  std::uint64_t seed = 0;
  int threads = 1;
  bool inject_fault = false;
};

int cmd_verify(const VerifyArgs& a) {
  VerifyOptions opt;
  opt.seed = a.seed;
  opt.threads = a.threads;
  opt.inject_fault = a.inject_fault;
  const auto report = run_verify(a.suite, opt);
  for (const auto& c : report.checks) std::cout << format_check(c) << "\n";
  std::size_t failed = 0;
  for (const auto& c : report.checks) failed += !c.passed();
  std::cout << "verify " << a.suite << ": " << (failed ? "FAIL" : "PASS") << " (" << report.checks.size() - failed << "/"
            << report.checks.size() << " checks, " << std::setprecision(3) << report.seconds << " s, seed " << a.seed
            << ")\n";
  return failed ? kExitValidation : kExitOk;
}

struct BenchArgs {
  std::vector<std::size_t> lengths{64, 256, 1024, 4096};
  std::vector<int> threads{1};
  std::vector<std::string> kernels{"par"};
  std::string out;
  std::uint64_t seed = 0;
};

int cmd_bench_scan(const BenchArgs& a) {
  const bool with_seq = std::find(a.kernels.begin(), a.kernels.end(), "seq") != a.kernels.end();
  const bool with_par = std::find(a.kernels.begin(), a.kernels.end(), "par") != a.kernels.end();
  auto rows = bench_scan(a.lengths, with_par ? a.threads : std::vector<int>{}, with_seq, a.seed);
  const std::string hash = config_hash(json{{"lengths", a.lengths}, {"threads", a.threads}, {"kernels", a.kernels}});
  std::ostringstream os;
  os << provenance_line(hash, a.seed) << "L,kernel,threads,tokens_per_second,max_abs_diff_vs_seq\n";
  double worst = 0.0;
  for (const auto& r : rows) {
    os << r.length << "," << r.kernel << "," << r.threads << "," << format_double(r.tokens_per_second) << ","
       << format_double(r.max_abs_diff_vs_seq) << "\n";
    worst = std::max(worst, r.max_abs_diff_vs_seq);
  }
  if (a.out.empty()) std::cout << os.str();
  else write_bytes(a.out, os.str());
  std::cout << "rows=" << rows.size() << " max_abs_diff_vs_seq=" << format_double(worst) << "\n";
  return kExitOk;
}

struct AblateArgs {
  std::string data, out, config;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int threads = 1;
};

int cmd_ablate(const AblateArgs& a) {
  const RunConfig c = load_run_config(a.config);
  c.train.validate(c.model);
  const Dataset ds = load_dataset(a.data);
  const auto table = ablation_run(ds, a.seeds, c.model, c.train, a.threads,
                                  [](const std::string& line) { std::cerr << line << "\n"; });
  std::string seeds;
  for (auto s : a.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  const std::string prov = "# config_hash=" + c.hash() + " seeds=" + seeds + "\n";
  write_ablation_csv(a.out, table, prov);
  std::cout << "noisy: psnr_db=" << format_double(table.noisy_psnr_db) << " ssim=" << format_double(table.noisy_ssim)
            << "\n";
  for (const auto& r : table.rows)
    std::cout << r.variant << ": psnr_db=" << format_double(r.psnr_mean) << " +- " << format_double(r.psnr_std)
              << " ssim=" << format_double(r.ssim_mean) << " +- " << format_double(r.ssim_std) << "\n";
  std::cout << "config_hash=" << c.hash() << " seeds=" << seeds << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-light RAW burst denoising: data synthesis, training, inference and verification."};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  const int threads = default_threads();
  const auto precision = CLI::IsMember({"f32", "f64"});

  GenDataArgs gen;
  gen.threads = threads;
  auto* g = app.add_subcommand("gen-data", "Synthesize a RAW video dataset and print its manifest hash");
  g->add_option("--out", gen.out, "Output dataset directory")->required();
  g->add_option("--sequences", gen.sequences, "Number of sequences (default: data.sequences from the config, 30)");
  g->add_option("--config", gen.config, "JSON config with model/train/data/vocabulary sections")->check(CLI::ExistingFile);
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--threads", gen.threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  g->add_flag("--force", gen.force, "Replace an existing dataset directory");

  TrainArgs tr;
  tr.threads = threads;
  auto* t = app.add_subcommand("train", "Train a model; writes OUT/checkpoint, OUT/loss.csv and OUT/config.json");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--config", tr.config, "JSON config with model/train/data/vocabulary sections")->check(CLI::ExistingFile);
  t->add_option("--seed", tr.seed, "Model and sampling seed (default: train.seed from the config, 0)");
  t->add_option("--threads", tr.threads, "Scan worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  t->add_option("--precision", tr.precision, "Parameter precision")->check(precision);
  t->add_option("--stop-after", tr.stop_after, "Stop after this many steps in this invocation (checkpoint is saved)");
  t->add_flag("--resume", tr.resume, "Continue from OUT/checkpoint");
  t->add_flag("--force", tr.force, "Restart even if OUT already holds a checkpoint");

  DenoiseArgs dn;
  dn.threads = threads;
  auto* d = app.add_subcommand("denoise", "Restore the last frame of a sequence; writes restored.f32, meta.json, preview.png");
  d->add_option("--ckpt", dn.ckpt, "Checkpoint directory or training run directory")->required();
  d->add_option("--seq", dn.seq, "Sequence directory (meta.json + noisy/)")->required();
  d->add_option("--out", dn.out, "Output directory")->required();
  d->add_option("--threads", dn.threads, "Scan worker threads")->check(CLI::PositiveNumber);

  EvalArgs ev;
  ev.threads = threads;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a dataset (PSNR/SSIM on the mosaicked plane)");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint directory or training run directory")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--report", ev.report, "Per-sequence CSV report path");
  e->add_option("--split", ev.split, "Restrict to a split (train or test); empty means every sequence");
  e->add_option("--threads", ev.threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);

  VerifyArgs vf;
  vf.threads = threads;
  auto* v = app.add_subcommand("verify", "Run invariant suites; exit 0 iff every check passes");
  v->add_option("--suite", vf.suite, "Suite to run")->check(CLI::IsMember({"gradcheck", "scan", "adaln", "noise", "all"}));
  v->add_option("--seed", vf.seed, "Seed for random instances");
  v->add_option("--threads", vf.threads, "Worker threads")->check(CLI::PositiveNumber);
  v->add_flag("--inject-fault", vf.inject_fault, "Use a silu backward rule with the wrong sign (the suite must fail)");

  BenchArgs bn;
  bn.threads = {threads};
  auto* b = app.add_subcommand("bench-scan", "Benchmark the selective scan kernels; writes a CSV");
  b->add_option("--lengths", bn.lengths, "Comma-separated sequence lengths")->delimiter(',');
  b->add_option("--threads", bn.threads, "Comma-separated thread counts for the parallel kernel")->delimiter(',');
  b->add_option("--kernels", bn.kernels, "Comma-separated kernels to time (seq, par)")
      ->delimiter(',')
      ->check(CLI::IsMember({"seq", "par"}));
  b->add_option("--out", bn.out, "CSV path (stdout when empty)");
  b->add_option("--seed", bn.seed, "Seed for scan parameters and inputs");

  AblateArgs ab;
  ab.threads = threads;
  auto* a = app.add_subcommand("ablate", "Train Baseline, +C3 and +C3+BOSS over several seeds; writes a CSV table");
  a->add_option("--data", ab.data, "Dataset directory")->required();
  a->add_option("--out", ab.out, "CSV path")->required();
  a->add_option("--seeds", ab.seeds, "Comma-separated seeds")->delimiter(',');
  a->add_option("--config", ab.config, "JSON config with model/train sections")->check(CLI::ExistingFile);
  a->add_option("--threads", ab.threads, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*d) return cmd_denoise(dn);
    if (*e) return cmd_eval(ev);
    if (*v) return cmd_verify(vf);
    if (*b) return cmd_bench_scan(bn);
    if (*a) return cmd_ablate(ab);
  } catch (const NanLossError& err) {
    std::cerr << "darkvrai: error: " << err.what() << "\n";
    return kExitRuntime;
  } catch (const Error& err) {
    // Config, vocabulary, shape and I/O problems are all input validation failures.
    std::cerr << "darkvrai: error: " << err.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& err) {
    std::cerr << "darkvrai: error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
