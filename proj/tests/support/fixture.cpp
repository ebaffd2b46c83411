// SPDX-License-Identifier: Apache-2.0
#include "fixture.hpp"

#include <unistd.h>

#include "dmavg/container.hpp"
#include "dmavg/random.hpp"

#ifndef DMAVG_FIXTURE_DIR
#define DMAVG_FIXTURE_DIR "dmavg-fixture"
#endif

namespace dmavg::testing {

namespace fs = std::filesystem;

fs::path fixture_dir() {
  if (const char* env = std::getenv("DMAVG_FIXTURE_DIR"); env && *env) return env;
  return DMAVG_FIXTURE_DIR;
}

LabeledImages fixture_dataset() { return generate_dataset(desk_dataset_spec(16, 256, 0)); }

namespace {

ToyFixture build_or_load() {
  ToyFixture f;
  f.data = fixture_dataset();
  const fs::path dir = fixture_dir();
  const fs::path model_path = dir / "model.bin";
  const fs::path embedder_path = dir / "embedder.bin";
  if (fs::exists(model_path) && fs::exists(sidecar_path(model_path)) && fs::exists(embedder_path) &&
      fs::exists(sidecar_path(embedder_path))) {
    f.model = ToyDenoiser::load(model_path);
    f.embedder = ToyEmbedder::load(embedder_path);
    return f;
  }
  fs::create_directories(dir);
  ToyTrainingConfig training;
  training.seed = 0;
  f.model = train_toy_denoiser(f.data, toy_config_for(f.data), training);
  ToyEmbedderConfig ec;
  ec.seed = 0;
  f.embedder = train_toy_embedder(f.data, ec);

  // Written under temporary names and renamed so a reader never sees half a fixture.
  const std::string tag = ".tmp" + std::to_string(::getpid());
  f.model->save(model_path.string() + tag);
  f.embedder.save(embedder_path.string() + tag);
  for (const auto& p : {model_path, embedder_path}) {
    fs::rename(sidecar_path(p.string() + tag), sidecar_path(p));
    fs::rename(p.string() + tag, p);
  }
  return f;
}

}  // namespace

const ToyFixture& toy_fixture() {
  static const ToyFixture f = build_or_load();
  return f;
}

std::shared_ptr<ToyDenoiser> small_toy(int num_concepts, std::uint64_t seed, LatentShape shape) {
  ToyDenoiserConfig c;
  c.shape = shape;
  c.num_concepts = num_concepts;
  c.time_features = 8;
  c.cond_dim = 8;
  c.enc1 = 12;
  c.enc2 = 10;
  c.bottleneck = 6;
  // Random output weights too, so predictions depend on every layer.
  const auto base = ToyDenoiser::initialize(c, seed);
  std::vector<float> params(base->parameters().begin(), base->parameters().end());
  Rng rng(derive_seed(seed, "perturb"));
  for (auto& p : params) p += static_cast<float>(0.05 * rng.normal());
  return std::make_shared<ToyDenoiser>(c, std::move(params));
}

namespace {

// Removes this process's scratch root at exit.
struct ScratchRoot {
  fs::path path = fs::temp_directory_path() / ("dmavg-test-" + std::to_string(::getpid()));
  ~ScratchRoot() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

}  // namespace

fs::path scratch_dir(const std::string& name) {
  static const ScratchRoot root;
  const fs::path p = root.path / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace dmavg::testing
