#pragma once

// Shared checkpoint container.
//
// Layout (little-endian):
//   "VCPCKPT\0"                      8-byte magic
//   u32 version                      currently 1
//   u64 n, n bytes                   config as UTF-8 JSON
//   u64 count                        number of tensors
//   per tensor:
//     u32 n, n bytes                 dotted name, e.g. "encoder.layers.3.attn.wq"
//     u32 rank, rank x u64 extents
//     numel x f64                    row-major values
//
// Names are namespaced by component (encoder., connector., decoder., probes.,
// interaction., probe_connector.) so a base checkpoint can be extended in place.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "viscop/tensor.hpp"

namespace viscop {

struct Checkpoint {
  static constexpr std::uint32_t version = 1;

  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> tensors;

  [[nodiscard]] std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  [[nodiscard]] const Tensor* find(const std::string& name) const;
};

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);
std::string content_hash(const std::vector<std::uint8_t>& bytes);
std::string content_hash(const std::string& text);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace viscop
