// SPDX-License-Identifier: Apache-2.0
#include "dmavg/schedule.hpp"

#include <cmath>
#include <string>

#include "dmavg/errors.hpp"

namespace dmavg {
namespace {

void check_sizes(std::size_t a, std::size_t b, std::size_t out, const char* what) {
  if (a != b || a != out) {
    throw InvalidArgument(std::string(what) + ": shape mismatch (" + std::to_string(a) + ", " + std::to_string(b) +
                          ", " + std::to_string(out) + ")");
  }
}

}  // namespace

std::vector<double> BetaSpec::betas(int train_steps) const {
  if (train_steps <= 0) {
    throw InvalidArgument("train_steps must be positive");
  }
  std::vector<double> out;
  if (kind == Kind::linear) {
    out.resize(static_cast<std::size_t>(train_steps));
    for (int i = 0; i < train_steps; ++i) {
      const double f = train_steps == 1 ? 0.0 : static_cast<double>(i) / (train_steps - 1);
      out[static_cast<std::size_t>(i)] = start + (end - start) * f;
    }
  } else {
    if (static_cast<int>(values.size()) != train_steps) {
      throw InvalidArgument("explicit beta list has " + std::to_string(values.size()) + " entries, expected " +
                            std::to_string(train_steps));
    }
    out = values;
  }
  for (double b : out) {
    if (!(b > 0.0) || !(b < 1.0)) {
      throw InvalidArgument("betas must lie in (0, 1), got " + std::to_string(b));
    }
  }
  return out;
}

std::vector<double> training_alpha_bars(const BetaSpec& beta, int train_steps) {
  const auto betas = beta.betas(train_steps);
  std::vector<double> out(betas.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    prod *= 1.0 - betas[i];
    out[i] = prod;
  }
  return out;
}

DiffusionSchedule::DiffusionSchedule(int train_steps, std::vector<int> timesteps, std::vector<double> alpha_bars)
    : train_steps_(train_steps), timesteps_(std::move(timesteps)), alpha_bars_(std::move(alpha_bars)) {
  if (timesteps_.empty() || alpha_bars_.size() != timesteps_.size() + 1) {
    throw InvalidArgument("schedule needs S timesteps and S + 1 alpha_bar values");
  }
  for (double a : alpha_bars_) {
    if (!(a > 0.0) || a > 1.0) {
      throw InvalidArgument("alpha_bar values must lie in (0, 1]");
    }
  }
}

int DiffusionSchedule::timestep(int step) const {
  if (step < 0 || step >= num_steps()) {
    throw InvalidArgument("sampler step " + std::to_string(step) + " out of range [0, " +
                          std::to_string(num_steps()) + ")");
  }
  return timesteps_[static_cast<std::size_t>(step)];
}

double DiffusionSchedule::alpha_bar(int index) const {
  if (index < 0 || index > num_steps()) {
    throw InvalidArgument("alpha_bar index " + std::to_string(index) + " out of range [0, " +
                          std::to_string(num_steps()) + "]");
  }
  return alpha_bars_[static_cast<std::size_t>(index)];
}

DiffusionSchedule build_schedule(int num_steps, int train_steps, const BetaSpec& beta) {
  if (num_steps <= 0 || train_steps <= 0) {
    throw InvalidArgument("num_steps and train_steps must be positive");
  }
  if (num_steps > train_steps) {
    throw InvalidArgument("num_steps (" + std::to_string(num_steps) + ") exceeds train_steps (" +
                          std::to_string(train_steps) + ")");
  }
  const auto train_bars = training_alpha_bars(beta, train_steps);
  const int ratio = train_steps / num_steps;
  std::vector<int> timesteps(static_cast<std::size_t>(num_steps));
  std::vector<double> bars(static_cast<std::size_t>(num_steps) + 1);
  for (int i = 0; i < num_steps; ++i) {
    const int t = (num_steps - 1 - i) * ratio;
    timesteps[static_cast<std::size_t>(i)] = t;
    bars[static_cast<std::size_t>(i)] = train_bars[static_cast<std::size_t>(t)];
  }
  bars.back() = 1.0;
  return DiffusionSchedule(train_steps, std::move(timesteps), std::move(bars));
}

void ddim_update(double alpha_bar_t, double alpha_bar_prev, std::span<const double> z, std::span<const double> eps,
                 std::span<double> out) {
  check_sizes(z.size(), eps.size(), out.size(), "ddim_step");
  const double sqrt_t = std::sqrt(alpha_bar_t);
  const double sigma_t = std::sqrt(1.0 - alpha_bar_t);
  const double sqrt_prev = std::sqrt(alpha_bar_prev);
  const double sigma_prev = std::sqrt(1.0 - alpha_bar_prev);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x0 = (z[i] - sigma_t * eps[i]) / sqrt_t;
    out[i] = sqrt_prev * x0 + sigma_prev * eps[i];
  }
}

void ddim_step(const DiffusionSchedule& schedule, int step, std::span<const double> z, std::span<const double> eps,
               std::span<double> out) {
  if (step < 0 || step >= schedule.num_steps()) {
    throw InvalidArgument("ddim_step: step " + std::to_string(step) + " out of range");
  }
  ddim_update(schedule.alpha_bar(step), schedule.alpha_bar(step + 1), z, eps, out);
}

Batch ddim_step(const DiffusionSchedule& schedule, int step, const Batch& z, const Batch& eps) {
  if (z.rows() != eps.rows() || z.cols() != eps.cols()) {
    throw InvalidArgument("ddim_step: batch shape mismatch");
  }
  Batch out(z.rows(), z.cols());
  ddim_step(schedule, step, z.values(), eps.values(), out.values());
  return out;
}

void forward_noise(const DiffusionSchedule& schedule, int index, std::span<const double> z0,
                   std::span<const double> eps, std::span<double> out) {
  check_sizes(z0.size(), eps.size(), out.size(), "forward_noise");
  const double a = schedule.alpha_bar(index);
  const double s = std::sqrt(a);
  const double n = std::sqrt(1.0 - a);
  for (std::size_t i = 0; i < z0.size(); ++i) {
    out[i] = s * z0[i] + n * eps[i];
  }
}

void predict_clean(const DiffusionSchedule& schedule, int index, std::span<const double> z,
                   std::span<const double> eps, std::span<double> out) {
  check_sizes(z.size(), eps.size(), out.size(), "predict_clean");
  const double a = schedule.alpha_bar(index);
  const double s = std::sqrt(a);
  const double n = std::sqrt(1.0 - a);
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = (z[i] - n * eps[i]) / s;
  }
}

void cfg_combine(std::span<const double> eps_cond, std::span<const double> eps_uncond, const GuidanceSpec& spec,
                 std::span<double> out) {
  check_sizes(eps_cond.size(), eps_uncond.size(), out.size(), "cfg_combine");
  if (spec.scale < 0.0 || !std::isfinite(spec.scale)) {
    throw InvalidArgument("guidance scale must be finite and nonnegative");
  }
  const double w = spec.scale;
  if (spec.convention == CfgConvention::conventional) {
    if (spec.conditional_only()) {
      std::copy(eps_cond.begin(), eps_cond.end(), out.begin());
      return;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = eps_uncond[i] + w * (eps_cond[i] - eps_uncond[i]);
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = (1.0 - w) * eps_cond[i] - w * eps_uncond[i];
    }
  }
}

}  // namespace dmavg
