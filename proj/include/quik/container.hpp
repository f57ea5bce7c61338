#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "quik/matrix.hpp"
#include "quik/packed.hpp"

namespace quik {

// On-disk tensor container: a `manifest.json` listing tensors plus raw
// little-endian blob files. dtype codes: f32, i8, i4p. Blob byte offsets are
// 8-byte aligned. Manifest order is preserved round-trip.
enum class Dtype { F32, I8, I4P };

const char *dtype_name(Dtype d);
Dtype dtype_from_name(const std::string &name);

// Byte length implied by dtype and shape. For i4p the last dimension is packed
// two nibbles per byte with per-row padding; all leading dimensions multiply.
int64_t dtype_nbytes(Dtype d, std::span<const int64_t> shape);

struct TensorEntry {
  std::string name;
  Dtype dtype = Dtype::F32;
  std::vector<int64_t> shape;
  std::vector<uint8_t> bytes;
};

struct TensorContainer {
  std::vector<TensorEntry> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  void add_f32(const std::string &name, const FpMatrix &m);
  void add_f32(const std::string &name, std::span<const float> v);
  void add_packed(const std::string &name, const PackedIntMatrix &m);

  bool contains(const std::string &name) const;
  const TensorEntry &require(const std::string &name) const;

  FpMatrix get_f32(const std::string &name) const;
  std::vector<float> get_f32_vector(const std::string &name) const;
  PackedIntMatrix get_packed(const std::string &name) const;

  // Writes manifest.json + tensors.bin into `dir` (created if needed).
  void write(const std::filesystem::path &dir) const;
  static TensorContainer read(const std::filesystem::path &dir);
};

} // namespace quik
