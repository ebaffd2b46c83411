// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmavg/dma.hpp"

namespace dmavg {

enum class BaselineKind { avg_codec, d4m, mgd3, precomputed_mean, single_timestep, replacement };

const char* to_string(BaselineKind kind);
BaselineKind baseline_from_string(const std::string& name);

struct BaselineConfig {
  BaselineKind kind = BaselineKind::avg_codec;
  // Denoising steps after noise injection (SDEdit depth). Noise is injected
  // at sampler step S - d4m_depth; 14 of 20 matches strength 0.7.
  int d4m_depth = 14;
  double mgd3_lambda = 0.1;
  int mgd3_guided_steps = 10;
  int single_step = 10;
  int replacement_t_stop = 10;

  std::vector<std::string> validate(int num_steps) const;
  std::string params_json() const;
};

// Decodes the arithmetic mean of fully denoised latents. One row.
Batch avg_codec_prototype(const Denoiser& model, const Batch& clean_latents);

// Mean of clean latents, noised to depth `depth` with seeded noise, then
// DDIM-denoised and decoded. depth == 0 decodes the mean directly.
Batch d4m_prototype(const Denoiser& model, const Batch& clean_latents, int depth, std::uint64_t seed,
                    const DiffusionSchedule& schedule, const ConditioningSpec& cond,
                    const GuidanceSpec& guidance);

// Mode guidance toward `mean_latent` for the first guided_steps, then plain
// DDIM. One decoded image per start latent.
Batch mgd3_prototype(const Denoiser& model, std::span<const double> mean_latent, const Batch& start_latents,
                     double lambda, int guided_steps, const DiffusionSchedule& schedule,
                     const ConditioningSpec& cond, const GuidanceSpec& guidance);

struct PrecomputedTargets {
  // One target per sampler step, from unoptimized trajectories.
  std::vector<std::vector<double>> per_step;
};

PrecomputedTargets precompute_mean_activations(const Denoiser& model, const LatentBatch& latents,
                                               const ConditioningSpec& cond, const DmaConfig& config);

DmaResult precomputed_mean_dma(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config);

DmaResult single_timestep_dma(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config,
                              int t_opt);

// Overwrites every latent's tap activation with the batch mean inside the
// conditional forward pass at steps <= t_stop, without optimization.
DmaResult replacement_run(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config,
                          int t_stop);

struct BaselineResult {
  Batch prototypes;
  std::string params_json;
  std::optional<DmaTrace> trace;
};

// Runs a baseline on the same seeded latent set a DmaConfig would use. Every
// kind yields config.prototype_indices().size() images: avg-codec repeats its
// single deterministic output, D4M draws fresh injection noise per image.
BaselineResult run_baseline(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config,
                            const BaselineConfig& baseline);

}  // namespace dmavg
