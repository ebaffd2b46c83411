// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dmavg/batch.hpp"
#include "dmavg/schedule.hpp"

namespace dmavg {

// Concept id reserved for the unconditional (null) branch.
inline constexpr int kUnconditional = -1;

// One low-rank factor pair on a conditioning projection: delta = down * up,
// down is in x rank, up is rank x out (both row-major).
struct LowRankFactor {
  std::string target;
  int in = 0;
  int out = 0;
  int rank = 0;
  std::vector<double> down;
  std::vector<double> up;

  friend bool operator==(const LowRankFactor&, const LowRankFactor&) = default;
};

struct LowRankAdapter {
  std::vector<LowRankFactor> factors;

  int rank() const { return factors.empty() ? 0 : factors.front().rank; }
  std::size_t parameter_count() const;
  friend bool operator==(const LowRankAdapter&, const LowRankAdapter&) = default;
};

// A conditioning projection an adapter may attach to.
struct AdapterTarget {
  std::string name;
  int in = 0;
  int out = 0;
};

struct ConditioningSpec {
  int concept_id = 0;
  // Concept used for the unconditional branch of guidance; null when absent.
  std::optional<int> negative;
  // Replaces the concept's embedding row.
  std::optional<std::vector<double>> learned_embedding;
  std::optional<LowRankAdapter> adapter;

  static ConditioningSpec for_concept(int concept_id) {
    ConditioningSpec spec;
    spec.concept_id = concept_id;
    return spec;
  }
};

// Which forward pass feeds the activation tap when guidance runs two passes.
enum class ActivationBranch { conditional, unconditional, guided };

// Result of a recorded forward pass up to a tap; pullback maps a cotangent
// on the activation to a gradient on the input latent.
class ActivationTape {
 public:
  virtual ~ActivationTape() = default;
  virtual std::span<const double> activation() const = 0;
  virtual void pullback(std::span<const double> cotangent, std::span<double> grad_latent) const = 0;
};

// Gradient of a mean-squared denoising loss with respect to the refinement
// parameters of a ConditioningSpec.
struct ConditioningGradient {
  double loss = 0.0;
  std::vector<double> embedding;
  LowRankAdapter adapter;
};

// Optional activation capture or substitution for a single forward branch.
struct TapRequest {
  std::string tap;
  Batch* capture = nullptr;
  // Replaces the tap activation before it feeds later layers. One row is
  // broadcast to every batch row; otherwise rows must match.
  const Batch* substitute = nullptr;
};

// Uniform denoiser interface. Implementations are immutable after
// construction; conditioning refinement returns a new handle.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual LatentShape latent_shape() const = 0;
  virtual int train_steps() const = 0;
  virtual BetaSpec beta_spec() const = 0;
  virtual int num_concepts() const = 0;
  virtual std::size_t embedding_dim() const = 0;
  virtual std::vector<AdapterTarget> adapter_targets() const = 0;

  virtual const std::vector<std::string>& taps() const = 0;
  virtual std::string bottleneck_tap() const = 0;
  virtual std::size_t tap_size(std::string_view tap) const = 0;

  // Raw single-branch noise prediction for every row of z at a model-native
  // timestep. concept_id == kUnconditional selects the null branch.
  virtual Batch forward(const Batch& z, int timestep, int concept_id, const ConditioningSpec& spec,
                        const TapRequest* tap = nullptr) const = 0;

  virtual std::unique_ptr<ActivationTape> record(std::span<const double> z, int timestep, int concept_id,
                                                 const ConditioningSpec& spec, std::string_view tap) const = 0;

  virtual Batch decode(const Batch& latents) const = 0;
  virtual Batch encode(const Batch& images) const = 0;

  // Handle whose forward passes use spec's embedding and adapter by default.
  virtual std::shared_ptr<const Denoiser> with_conditioning(const ConditioningSpec& spec) const = 0;

  virtual ConditioningGradient conditioning_gradient(const Batch& noisy, std::span<const int> timesteps,
                                                     const Batch& target_eps, const ConditioningSpec& spec,
                                                     bool want_embedding, bool want_adapter) const;

  // Base embedding row for a concept; starting point of inversion training.
  virtual std::vector<double> concept_embedding(int concept_id) const;

  // Zero-effect adapter: random down factors, zero up factors.
  LowRankAdapter make_adapter(int rank, std::uint64_t seed) const;
};

using DenoiserHandle = std::shared_ptr<const Denoiser>;

// Guided noise prediction at sampler step `step`.
Batch predict_noise(const Denoiser& model, const Batch& z, const DiffusionSchedule& schedule, int step,
                    const ConditioningSpec& cond, const GuidanceSpec& guidance);

struct NoiseAndActivation {
  Batch noise;
  Batch activation;
};

NoiseAndActivation predict_with_activation(const Denoiser& model, const Batch& z,
                                           const DiffusionSchedule& schedule, int step,
                                           const ConditioningSpec& cond, const GuidanceSpec& guidance,
                                           std::string_view tap,
                                           ActivationBranch branch = ActivationBranch::conditional);

// Guided prediction with the conditional branch's tap replaced by `substitute`.
Batch predict_noise_substituted(const Denoiser& model, const Batch& z, const DiffusionSchedule& schedule,
                                int step, const ConditioningSpec& cond, const GuidanceSpec& guidance,
                                std::string_view tap, const Batch& substitute);

Batch decode_image(const Denoiser& model, const Batch& latents);
Batch encode_image(const Denoiser& model, const Batch& images);

DenoiserHandle apply_conditioning(const Denoiser& model, const ConditioningSpec& spec);

// Validation shared by implementations.
void check_tap(const Denoiser& model, std::string_view tap);
void check_conditioning(const Denoiser& model, const ConditioningSpec& spec);

}  // namespace dmavg
