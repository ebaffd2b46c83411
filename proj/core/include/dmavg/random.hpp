// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace dmavg {

// Expands a master seed into an independent per-purpose seed.
std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose);
std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose, std::uint64_t index);

// xoshiro256** with a Box-Muller normal sampler. Portable across standard
// libraries, unlike std::normal_distribution.
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  State state() const { return state_; }
  void set_state(const State& s) { state_ = s; }

 private:
  State state_{};
};

}  // namespace dmavg
