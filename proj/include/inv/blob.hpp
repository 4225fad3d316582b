#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "inv/error.hpp"

namespace inv {

// Little-endian 32-bit float blobs. Values are widened to double on load.

inline void write_f32_blob(const std::filesystem::path& path, std::span<const double> values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write blob " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("failed writing blob " + path.string());
}

// Reads exactly `expected` floats. A size mismatch or a non-finite value is
// reported with the blob name.
inline std::vector<double> read_f32_blob(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing blob " + path.filename().string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected * 4) {
    throw ValidationError("blob " + path.filename().string() + " has " + std::to_string(bytes.size()) +
                          " bytes, expected " + std::to_string(expected * 4) +
                          (bytes.size() < expected * 4 ? " (truncated)" : ""));
  }
  std::vector<double> values(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    const float f = std::bit_cast<float>(bits);
    if (!std::isfinite(f)) {
      throw ValidationError("blob " + path.filename().string() + " contains a non-finite value at index " +
                            std::to_string(i));
    }
    values[i] = f;
  }
  return values;
}

// Rounds through float32 so in-memory values match what a blob round trip gives.
inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace inv
