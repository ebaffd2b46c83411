// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dmavg/batch.hpp"

namespace dmavg {

// Map [-1, 1] to 8-bit levels and back. to_byte rounds and clamps.
std::uint8_t to_byte(double value);
double from_byte(std::uint8_t value);

// Channel-major image in [-1, 1] written as 8-bit RGB (or gray) PNG.
void write_png(const std::filesystem::path& path, std::span<const double> image, LatentShape shape);
std::vector<double> read_png(const std::filesystem::path& path, LatentShape* shape = nullptr);

}  // namespace dmavg
