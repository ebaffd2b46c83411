// SPDX-License-Identifier: Apache-2.0
#include "dmavg/hashing.hpp"

#include <cstring>

namespace dmavg {

void ContentHasher::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= 0x100000001b3ULL;
  }
}

void ContentHasher::update(std::string_view text) { update(std::as_bytes(std::span(text.data(), text.size()))); }

void ContentHasher::update(std::span<const double> values) { update(std::as_bytes(values)); }

void ContentHasher::update(std::uint64_t value) {
  std::byte raw[sizeof(value)];
  std::memcpy(raw, &value, sizeof(value));
  update(std::span<const std::byte>(raw, sizeof(raw)));
}

std::string ContentHasher::hex() const { return to_hex(state_); }

std::string to_hex(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

std::string hash_hex(std::span<const double> values) {
  ContentHasher h;
  h.update(values);
  return h.hex();
}

std::string hash_hex(std::string_view text) {
  ContentHasher h;
  h.update(text);
  return h.hex();
}

}  // namespace dmavg
