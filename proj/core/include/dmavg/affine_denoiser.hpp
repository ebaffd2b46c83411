// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "dmavg/model.hpp"

namespace dmavg {

// eps(z, t, c) = A z + b + offset[c], with a linear "bottleneck" tap P z.
// A reference adapter with closed-form behavior, used to check samplers and
// the adapter contract without a trained network.
class AffineDenoiser final : public Denoiser, public std::enable_shared_from_this<AffineDenoiser> {
 public:
  struct Params {
    LatentShape shape{1, 2, 2};
    int train_steps = 1000;
    BetaSpec beta = BetaSpec::linear(1e-4, 0.02);
    std::vector<double> matrix;                    // dim x dim, row-major
    std::vector<double> bias;                      // dim
    std::vector<std::vector<double>> offsets;      // per concept, then null branch last
    std::vector<double> projection;                // bottleneck x dim
    std::size_t bottleneck = 2;
  };

  explicit AffineDenoiser(Params params);

  // Random small-norm operator so DDIM trajectories stay bounded.
  static std::shared_ptr<AffineDenoiser> random(LatentShape shape, int num_concepts, std::size_t bottleneck,
                                                std::uint64_t seed);

  const Params& params() const { return params_; }

  LatentShape latent_shape() const override { return params_.shape; }
  int train_steps() const override { return params_.train_steps; }
  BetaSpec beta_spec() const override { return params_.beta; }
  int num_concepts() const override { return static_cast<int>(params_.offsets.size()) - 1; }
  std::size_t embedding_dim() const override { return 0; }
  std::vector<AdapterTarget> adapter_targets() const override { return {}; }

  const std::vector<std::string>& taps() const override { return taps_; }
  std::string bottleneck_tap() const override { return "bottleneck"; }
  std::size_t tap_size(std::string_view tap) const override;

  Batch forward(const Batch& z, int timestep, int concept_id, const ConditioningSpec& spec,
                const TapRequest* tap = nullptr) const override;
  std::unique_ptr<ActivationTape> record(std::span<const double> z, int timestep, int concept_id,
                                         const ConditioningSpec& spec, std::string_view tap) const override;

  Batch decode(const Batch& latents) const override { return latents; }
  Batch encode(const Batch& images) const override { return images; }

  std::shared_ptr<const Denoiser> with_conditioning(const ConditioningSpec& spec) const override;

 private:
  Params params_;
  std::vector<std::string> taps_{"bottleneck", "output"};
};

}  // namespace dmavg
