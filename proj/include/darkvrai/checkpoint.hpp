#pragma once

// Checkpoint directory: manifest.json plus one little-endian blob per
// parameter (and per Adam moment buffer when optimizer state is saved).
// Values are stored at the model's precision, so round-trips are bit-exact.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "darkvrai/error.hpp"
#include "darkvrai/io.hpp"
#include "darkvrai/model.hpp"
#include "darkvrai/optim.hpp"

namespace darkvrai {

inline constexpr const char* kCheckpointFormat = "darkvrai-checkpoint/1";

template <typename T>
struct Checkpoint {
  DarkVraiModel<T> model;
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
  AdamState adam;
  nlohmann::json extra;  // free-form provenance (train config, config hash, ...)
};

namespace detail {

inline std::string blob_name(const char* prefix, std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu.%s", prefix, i, ext);
  return buf;
}

template <typename T>
constexpr const char* blob_ext() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename U, typename T>
std::vector<T> read_as(const fs::path& path, std::size_t n) {
  auto raw = read_le<U>(path, n);
  return std::vector<T>(raw.begin(), raw.end());
}

}  // namespace detail

/// Writes the checkpoint into `dir`, replacing any previous content. `adam`
/// may be null for weights-only checkpoints.
template <typename T>
std::string save_checkpoint(const fs::path& dir, const DarkVraiModel<T>& model, std::uint64_t seed,
                            std::size_t iteration, const AdamState* adam = nullptr,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  nlohmann::json params = nlohmann::json::array();
  std::size_t i = 0;
  for (const auto& [name, t] : model.parameters()) {
    const std::string file = detail::blob_name("p", i, detail::blob_ext<T>());
    std::vector<T> values(t.data().begin(), t.data().end());
    const std::string bytes = encode_le(values);
    write_bytes(tmp / file, bytes);
    nlohmann::json entry{{"name", name}, {"shape", t.shape()}, {"file", file}, {"hash", hex64(fnv1a(bytes))}};
    if (adam && !adam->m.empty()) {
      entry["adam_m"] = detail::blob_name("m", i, "f64");
      entry["adam_v"] = detail::blob_name("v", i, "f64");
      write_le(tmp / entry["adam_m"].get<std::string>(), adam->m.at(i));
      write_le(tmp / entry["adam_v"].get<std::string>(), adam->v.at(i));
    }
    params.push_back(std::move(entry));
    ++i;
  }
  nlohmann::json manifest{{"format", kCheckpointFormat},
                          {"dtype", LittleEndian<T>::kName},
                          {"model", model.config()},
                          {"seed", seed},
                          {"iteration", iteration},
                          {"adam_step", adam ? adam->step : 0},
                          {"has_optimizer", adam != nullptr && !adam->m.empty()},
                          {"parameters", params},
                          {"extra", extra}};
  write_json(tmp / "manifest.json", manifest);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
  return hex64(fnv1a(manifest.dump()));
}

/// Hash over the manifest, which itself records a hash of every parameter blob.
inline std::string checkpoint_hash(const fs::path& dir) {
  return hex64(fnv1a(read_json(dir / "manifest.json").dump()));
}

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw IoError("checkpoint manifest not found: " + mpath.string());
  const auto manifest = read_json(mpath);
  try {
    if (manifest.at("format").get<std::string>() != kCheckpointFormat) {
      throw IoError(mpath.string() + ": unsupported checkpoint format");
    }
    const std::string dtype = manifest.at("dtype").get<std::string>();
    if (dtype != LittleEndian<float>::kName && dtype != LittleEndian<double>::kName) {
      throw IoError(mpath.string() + ": unsupported dtype " + dtype);
    }
    const auto config = manifest.at("model").get<ModelConfig>();
    Checkpoint<T> ck{DarkVraiModel<T>(config, manifest.at("seed").get<std::uint64_t>()),
                     manifest.at("seed").get<std::uint64_t>(), manifest.at("iteration").get<std::size_t>(), {},
                     manifest.value("extra", nlohmann::json::object())};
    const auto& entries = manifest.at("parameters");
    auto& ps = ck.model.parameters();
    if (entries.size() != ps.size()) {
      throw IoError(mpath.string() + ": parameter count " + std::to_string(entries.size()) + " does not match model (" +
                    std::to_string(ps.size()) + ")");
    }
    const bool has_opt = manifest.value("has_optimizer", false);
    std::size_t i = 0;
    for (const auto& [name, t] : ps) {
      const auto& e = entries.at(i);
      if (e.at("name").get<std::string>() != name || e.at("shape").get<Shape>() != t.shape()) {
        throw IoError(mpath.string() + ": parameter " + std::to_string(i) + " (" + e.at("name").get<std::string>() +
                      ") does not match model parameter " + name);
      }
      const fs::path file = dir / e.at("file").get<std::string>();
      auto values = dtype == LittleEndian<float>::kName ? detail::read_as<float, T>(file, t.numel())
                                                        : detail::read_as<double, T>(file, t.numel());
      Tensor<T> dst = t;
      std::copy(values.begin(), values.end(), dst.mutable_data().begin());
      if (has_opt) {
        ck.adam.m.push_back(read_le<double>(dir / e.at("adam_m").get<std::string>(), t.numel()));
        ck.adam.v.push_back(read_le<double>(dir / e.at("adam_v").get<std::string>(), t.numel()));
      }
      ++i;
    }
    ck.adam.step = has_opt ? manifest.value("adam_step", std::size_t{0}) : 0;
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(mpath.string() + ": invalid checkpoint manifest (" + e.what() + ")");
  }
}

}  // namespace darkvrai
