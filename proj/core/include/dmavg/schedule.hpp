// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "dmavg/batch.hpp"

namespace dmavg {

// Per-training-timestep noise variances.
struct BetaSpec {
  enum class Kind { linear, explicit_values };

  Kind kind = Kind::linear;
  double start = 1e-4;
  double end = 0.02;
  std::vector<double> values;

  static BetaSpec linear(double start, double end) { return {Kind::linear, start, end, {}}; }
  static BetaSpec explicit_betas(std::vector<double> betas) {
    return {Kind::explicit_values, 0.0, 0.0, std::move(betas)};
  }

  // Materialized betas for a training range of length train_steps.
  std::vector<double> betas(int train_steps) const;
};

// Cumulative product of (1 - beta) over the full training range.
std::vector<double> training_alpha_bars(const BetaSpec& beta, int train_steps);

// Sampler view of a diffusion process. Step i (0-based, denoising order)
// moves the latent from alpha_bar(i) to alpha_bar(i + 1); alpha_bar(S) == 1.
class DiffusionSchedule {
 public:
  DiffusionSchedule(int train_steps, std::vector<int> timesteps, std::vector<double> alpha_bars);

  int num_steps() const { return static_cast<int>(timesteps_.size()); }
  int train_steps() const { return train_steps_; }
  int timestep(int step) const;
  double alpha_bar(int index) const;

  std::span<const int> timesteps() const { return timesteps_; }
  std::span<const double> alpha_bars() const { return alpha_bars_; }

 private:
  int train_steps_;
  std::vector<int> timesteps_;
  std::vector<double> alpha_bars_;
};

// Uniform leading spacing: timestep(i) = (S - 1 - i) * (train_steps / S).
DiffusionSchedule build_schedule(int num_steps, int train_steps, const BetaSpec& beta);

// Deterministic (eta = 0) DDIM update between two noise levels.
void ddim_update(double alpha_bar_t, double alpha_bar_prev, std::span<const double> z,
                 std::span<const double> eps, std::span<double> out);

void ddim_step(const DiffusionSchedule& schedule, int step, std::span<const double> z,
               std::span<const double> eps, std::span<double> out);
Batch ddim_step(const DiffusionSchedule& schedule, int step, const Batch& z, const Batch& eps);

// z_t = sqrt(abar) * z0 + sqrt(1 - abar) * eps at the noise level of `index`
// (0..S; index S is the clean end).
void forward_noise(const DiffusionSchedule& schedule, int index, std::span<const double> z0,
                   std::span<const double> eps, std::span<double> out);

// x0 estimate (z_t - sqrt(1 - abar) * eps) / sqrt(abar).
void predict_clean(const DiffusionSchedule& schedule, int index, std::span<const double> z,
                   std::span<const double> eps, std::span<double> out);

enum class CfgConvention { conventional, paper_verbatim };

struct GuidanceSpec {
  double scale = 7.0;
  CfgConvention convention = CfgConvention::conventional;

  // True when the combination reduces to the conditional prediction alone.
  bool conditional_only() const { return convention == CfgConvention::conventional && scale == 1.0; }
};

// conventional:   uncond + w * (cond - uncond)
// paper_verbatim: (1 - w) * cond - w * uncond
void cfg_combine(std::span<const double> eps_cond, std::span<const double> eps_uncond,
                 const GuidanceSpec& spec, std::span<double> out);

}  // namespace dmavg
