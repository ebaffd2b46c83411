// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dmavg {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2, u8 = 3 };

const char* to_string(DType dtype);

struct TensorEntry {
  DType dtype = DType::f64;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> bytes;

  std::size_t element_count() const;
  static TensorEntry from(const std::vector<float>& values, std::vector<std::uint64_t> shape = {});
  static TensorEntry from(const std::vector<double>& values, std::vector<std::uint64_t> shape = {});
  static TensorEntry from(const std::vector<std::int64_t>& values, std::vector<std::uint64_t> shape = {});
  std::vector<float> as_f32() const;
  std::vector<double> as_f64() const;
  std::vector<std::int64_t> as_i64() const;
};

// Named tensors in a little-endian binary file with a JSON sidecar
// (<path>.json) that describes every entry plus free-form metadata.
//
// Binary layout:
//   "DMAVGC01" | u32 count | per entry:
//     u32 name_len | name | u8 dtype | u32 ndim | u64 dims[ndim] | u64 nbytes | data
struct Container {
  std::map<std::string, TensorEntry> tensors;
  // JSON object text stored under "meta" in the sidecar.
  std::string meta_json = "{}";

  const TensorEntry& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

void write_container(const Container& container, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& path);

}  // namespace dmavg
