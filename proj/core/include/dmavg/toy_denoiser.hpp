// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "dmavg/model.hpp"
#include "dmavg/toy_data.hpp"

namespace dmavg {

enum class Precision { f32, f64 };

// Dense encoder-decoder with additive skip connections:
//
//   enc1 -> enc2 -> bottleneck -> dec2 (+ skip enc2) -> dec1 (+ skip enc1) -> x0
//
// The output layer predicts the clean latent x0, reported as noise through
// eps = (z - sqrt(abar) * x0) / sqrt(1 - abar).
//
// Every block receives a projection of the conditioning vector
// (time embedding + concept embedding). The conditioning projections are the
// low-rank adapter targets.
struct ToyDenoiserConfig {
  LatentShape shape{3, 32, 32};
  int num_concepts = 1;
  int time_features = 32;
  int cond_dim = 64;
  int enc1 = 256;
  int enc2 = 128;
  int bottleneck = 128;
  int train_steps = 1000;
  BetaSpec beta = BetaSpec::linear(1e-4, 0.02);
};

struct ToyWeights;

class ToyDenoiser final : public Denoiser {
 public:
  ToyDenoiser(const ToyDenoiserConfig& config, std::vector<float> parameters,
              Precision precision = Precision::f32);

  // He-style random initialization; output layer starts at zero.
  static std::shared_ptr<ToyDenoiser> initialize(const ToyDenoiserConfig& config, std::uint64_t seed);

  const ToyDenoiserConfig& config() const;
  std::span<const float> parameters() const;
  Precision precision() const { return precision_; }
  std::shared_ptr<ToyDenoiser> with_precision(Precision precision) const;

  LatentShape latent_shape() const override;
  int train_steps() const override;
  BetaSpec beta_spec() const override;
  int num_concepts() const override;
  std::size_t embedding_dim() const override;
  std::vector<AdapterTarget> adapter_targets() const override;

  const std::vector<std::string>& taps() const override;
  std::string bottleneck_tap() const override { return "bottleneck"; }
  std::size_t tap_size(std::string_view tap) const override;

  Batch forward(const Batch& z, int timestep, int concept_id, const ConditioningSpec& spec,
                const TapRequest* tap = nullptr) const override;
  std::unique_ptr<ActivationTape> record(std::span<const double> z, int timestep, int concept_id,
                                         const ConditioningSpec& spec, std::string_view tap) const override;

  // Identity codec; decode clamps to the image range [-1, 1].
  Batch decode(const Batch& latents) const override;
  Batch encode(const Batch& images) const override;

  std::shared_ptr<const Denoiser> with_conditioning(const ConditioningSpec& spec) const override;

  ConditioningGradient conditioning_gradient(const Batch& noisy, std::span<const int> timesteps,
                                             const Batch& target_eps, const ConditioningSpec& spec,
                                             bool want_embedding, bool want_adapter) const override;
  std::vector<double> concept_embedding(int concept_id) const override;

  // Mean squared denoising loss over the batch and its gradient with respect
  // to every network parameter (accumulated into grad, same layout as
  // parameters()). concepts may contain kUnconditional.
  double parameter_gradient(const Batch& noisy, std::span<const int> timesteps, std::span<const int> concepts,
                            const Batch& target_eps, std::vector<float>& grad) const;

  void save(const std::filesystem::path& path) const;
  static std::shared_ptr<ToyDenoiser> load(const std::filesystem::path& path);

 private:
  std::shared_ptr<const ToyWeights> weights_;
  Precision precision_ = Precision::f32;
  // Refinement baked in by with_conditioning.
  std::optional<int> refined_concept_;
  std::optional<std::vector<double>> embedding_;
  std::optional<LowRankAdapter> adapter_;
};

struct ToyTrainingConfig {
  int epochs = 100;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double class_dropout = 0.1;
  // Probability of training a row with both skip paths removed.
  double skip_dropout = 0.5;
  std::uint64_t seed = 0;
};

struct TrainingLog {
  std::vector<double> epoch_loss;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double seconds = 0.0;
};

// Fixed held-out denoising loss on a deterministic probe batch.
double probe_denoising_loss(const ToyDenoiser& model, const LabeledImages& data, std::uint64_t seed,
                            int probe_size = 64);

std::shared_ptr<ToyDenoiser> train_toy_denoiser(const LabeledImages& data, const ToyDenoiserConfig& config,
                                                const ToyTrainingConfig& training, TrainingLog* log = nullptr);

// Default architecture for a dataset: matches shape and concept count.
ToyDenoiserConfig toy_config_for(const LabeledImages& data);

}  // namespace dmavg
