// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmavg/model.hpp"
#include "dmavg/random.hpp"

namespace dmavg {

struct DmaConfig {
  int latent_count = 1000;
  int iterations = 300;
  double learning_rate = 2e-2;
  // Inclusive: steps 0..t_stop are aligned.
  int t_stop = 10;
  int num_steps = 20;
  GuidanceSpec guidance{7.0, CfgConvention::conventional};
  // Empty selects the model's bottleneck tap.
  std::string tap;
  ActivationBranch activation_branch = ActivationBranch::conditional;
  std::uint64_t seed = 0;
  int decode_count = 1;
  // Explicit prototype indices; overrides decode_count when non-empty.
  std::vector<int> decode_indices;
  // Worker threads for alignment; results do not depend on this.
  int workers = 1;

  // Every violated constraint, empty when valid.
  std::vector<std::string> validate() const;
  std::string hash() const;
  std::vector<int> prototype_indices() const;
};

// The K jointly optimized latents at some sampler step.
struct LatentBatch {
  LatentShape shape;
  Batch latents;
  int step = 0;
  std::uint64_t seed = 0;
  int concept_id = 0;

  int size() const { return static_cast<int>(latents.rows()); }
};

struct StepTrace {
  int step = 0;
  int timestep = 0;
  bool aligned = false;
  // Number of batch-mean computations at this step (1 when aligned).
  int mean_evaluations = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  // Mean squared deviation of the batch's tap activations from their own
  // mean after alignment.
  double spread_after = 0.0;
};

struct DmaTrace {
  std::vector<StepTrace> steps;
  std::string hash() const;
  std::string to_json() const;
  static DmaTrace from_json(const std::string& text);
};

struct RunState {
  LatentBatch batch;
  std::string config_hash;
  int completed_steps = 0;
  Rng::State rng_state{};
  DmaTrace trace;

  // Latents and state in the binary container; optimizer moments are fresh
  // per (latent, step) so none persist between steps.
  void save(const std::filesystem::path& path) const;
  static RunState load(const std::filesystem::path& path);
};

struct DmaResult {
  Batch prototypes;
  std::vector<int> prototype_indices;
  RunState state;
  DmaTrace trace;
};

// Standard-normal latents, deterministic per seed.
LatentBatch init_latents(int count, LatentShape shape, std::uint64_t seed);

std::vector<double> mean_activation(const Denoiser& model, const Batch& latents, const DiffusionSchedule& schedule,
                                    int step, const ConditioningSpec& cond, const GuidanceSpec& guidance,
                                    std::string_view tap,
                                    ActivationBranch branch = ActivationBranch::conditional);

struct AlignmentProblem {
  const Denoiser* model = nullptr;
  const ConditioningSpec* cond = nullptr;
  GuidanceSpec guidance;
  ActivationBranch branch = ActivationBranch::conditional;
  std::string tap;
  int timestep = 0;
  int iterations = 0;
  double learning_rate = 2e-2;
  // Identifies the failure site in numeric-failure messages.
  int step = -1;
  int latent_index = -1;
};

struct AlignResult {
  std::vector<double> latent;
  std::vector<double> activation;
  double loss_before = 0.0;
  double loss_after = 0.0;
};

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) on ||H(z) - target||^2 with fresh
// moments. The returned activation and loss_after are evaluated at the
// final latent.
AlignResult align_latent(const AlignmentProblem& problem, std::span<const double> latent,
                         std::span<const double> target);

// Loss value and gradient at z; exposed for gradient checks.
double alignment_loss(const AlignmentProblem& problem, std::span<const double> latent,
                      std::span<const double> target, std::span<double> gradient = {});

// Plain DDIM sampling from `start_step` to the clean end.
Batch sample_ddim(const Denoiser& model, Batch latents, const DiffusionSchedule& schedule,
                  const ConditioningSpec& cond, const GuidanceSpec& guidance, int start_step = 0);

// Variations of the alignment loop used by the ablation baselines.
struct DmaVariant {
  // Align only at this step instead of 0..t_stop.
  std::optional<int> single_step;
  // Per-step targets computed ahead of time; empty uses the live batch mean.
  std::vector<std::vector<double>> frozen_targets;
};

// Resumable driver for the alignment loop, one sampler step per call.
class DmaRunner {
 public:
  DmaRunner(DenoiserHandle model, ConditioningSpec cond, DmaConfig config, DmaVariant variant = {});
  DmaRunner(DenoiserHandle model, ConditioningSpec cond, DmaConfig config, LatentBatch initial,
            DmaVariant variant = {});
  DmaRunner(DenoiserHandle model, ConditioningSpec cond, DmaConfig config, RunState resume,
            DmaVariant variant = {});

  bool finished() const { return state_.completed_steps >= schedule_.num_steps(); }
  int completed_steps() const { return state_.completed_steps; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  const RunState& state() const { return state_; }

  void step();
  void run();
  DmaResult result() const;

 private:
  bool aligns_at(int step) const;
  void align_batch(int step, std::span<const double> target, StepTrace& trace);

  DenoiserHandle model_;
  ConditioningSpec cond_;
  DmaConfig config_;
  DmaVariant variant_;
  DiffusionSchedule schedule_;
  std::string tap_;
  RunState state_;
};

DmaResult dma_run(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config);
DmaResult dma_run(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config,
                  LatentBatch initial);

Batch decode_prototypes(const Denoiser& model, const LatentBatch& batch, std::span<const int> indices);

DiffusionSchedule schedule_for(const Denoiser& model, int num_steps);

}  // namespace dmavg
