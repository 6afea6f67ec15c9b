#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cgnc/tensor.hpp"

namespace cgnc {

// Single-file container of named arrays plus JSON metadata.
//
//   "CGNCARCH" | u32 version | u32 0 | u64 len | JSON |
//   u64 count | { u32 len | name | u32 rank | i64 dims[rank] | f64 data[] }* |
//   u64 FNV-1a of everything before it
//
// All integers and doubles are little-endian.
struct Archive {
  std::uint32_t version = 1;
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor& array(const std::string& name) const;
};

std::vector<std::uint8_t> serialize_archive(const Archive& a);
// Throws LoadError for truncation, checksum mismatch, or a version newer
// than `max_version`.
Archive parse_archive(const std::vector<std::uint8_t>& bytes, std::uint32_t max_version, const std::string& origin);

// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

void save_archive(const std::filesystem::path& path, const Archive& a);
Archive load_archive(const std::filesystem::path& path, std::uint32_t max_version);

// Hex FNV-1a digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

}  // namespace cgnc
