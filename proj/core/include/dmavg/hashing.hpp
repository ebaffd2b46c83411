// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace dmavg {

// FNV-1a 64-bit. Used for content addressing, not for security.
class ContentHasher {
 public:
  void update(std::span<const std::byte> bytes);
  void update(std::string_view text);
  void update(std::span<const double> values);
  void update(std::uint64_t value);

  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hash_hex(std::span<const double> values);
std::string hash_hex(std::string_view text);
std::string to_hex(std::uint64_t value);

}  // namespace dmavg
