#pragma once

// File helpers: little-endian float blobs, JSON documents, content hashes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "darkvrai/error.hpp"
#include "darkvrai/rng.hpp"

namespace darkvrai {

namespace fs = std::filesystem;

inline std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_bytes(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

template <typename T>
struct LittleEndian;
template <>
struct LittleEndian<float> {
  using Bits = std::uint32_t;
  static constexpr const char* kName = "float32-le";
};
template <>
struct LittleEndian<double> {
  using Bits = std::uint64_t;
  static constexpr const char* kName = "float64-le";
};

template <typename T>
std::string encode_le(const std::vector<T>& values) {
  using Bits = typename LittleEndian<T>::Bits;
  std::string bytes(values.size() * sizeof(T), '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Bits u = std::bit_cast<Bits>(values[i]);
    for (std::size_t b = 0; b < sizeof(T); ++b) bytes[i * sizeof(T) + b] = static_cast<char>((u >> (8 * b)) & 0xffu);
  }
  return bytes;
}

template <typename T>
std::vector<T> decode_le(std::string_view bytes) {
  using Bits = typename LittleEndian<T>::Bits;
  std::vector<T> values(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    Bits u = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b)
      u |= static_cast<Bits>(static_cast<unsigned char>(bytes[i * sizeof(T) + b])) << (8 * b);
    values[i] = std::bit_cast<T>(u);
  }
  return values;
}

/// Reads exactly `expected` values; a size mismatch names the file.
template <typename T>
std::vector<T> read_le(const fs::path& path, std::size_t expected) {
  const std::string bytes = read_bytes(path);
  if (bytes.size() != expected * sizeof(T)) {
    throw IoError(path.string() + ": expected " + std::to_string(expected * sizeof(T)) + " bytes, found " +
                  std::to_string(bytes.size()) + " (truncated or wrong shape)");
  }
  return decode_le<T>(bytes);
}

template <typename T>
void write_le(const fs::path& path, const std::vector<T>& values) {
  write_bytes(path, encode_le(values));
}

inline std::string encode_f32(const std::vector<float>& values) { return encode_le(values); }
inline std::vector<float> decode_f32(std::string_view bytes) { return decode_le<float>(bytes); }
inline void write_f32(const fs::path& path, const std::vector<float>& values) { write_le(path, values); }
inline std::vector<float> read_f32(const fs::path& path, std::size_t expected) { return read_le<float>(path, expected); }

inline nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_bytes(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed JSON (" + e.what() + ")");
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_bytes(path, j.dump(2) + "\n"); }

inline std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace darkvrai
