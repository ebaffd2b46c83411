// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>

#include "dmavg/toy_data.hpp"
#include "dmavg/toy_denoiser.hpp"
#include "dmavg/toy_embedder.hpp"

namespace dmavg::testing {

// Trained toy substrate shared by the slow tests: 16x16 desk dataset
// (seed 0, 256 images per class), default denoiser and embedder (seed 0).
struct ToyFixture {
  LabeledImages data;
  std::shared_ptr<ToyDenoiser> model;
  ToyEmbedder embedder;
};

inline constexpr int kSun = 0;
inline constexpr int kCrane = 1;
inline constexpr int kBlock = 2;

std::filesystem::path fixture_dir();
LabeledImages fixture_dataset();

// Trains and caches the fixture when missing; loads it otherwise.
const ToyFixture& toy_fixture();

// Small untrained toy network for structural tests.
std::shared_ptr<ToyDenoiser> small_toy(int num_concepts = 2, std::uint64_t seed = 0,
                                       LatentShape shape = {1, 4, 4});

// Fresh empty directory under the system temp directory.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace dmavg::testing
