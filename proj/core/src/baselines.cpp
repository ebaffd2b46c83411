// SPDX-License-Identifier: Apache-2.0
#include "dmavg/baselines.hpp"

#include <cmath>

#include <json.hpp>

#include "dmavg/errors.hpp"

namespace dmavg {

using json = nlohmann::json;

const char* to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::avg_codec:
      return "avg-codec";
    case BaselineKind::d4m:
      return "d4m";
    case BaselineKind::mgd3:
      return "mgd3";
    case BaselineKind::precomputed_mean:
      return "precomputed-mean";
    case BaselineKind::single_timestep:
      return "single-timestep";
    case BaselineKind::replacement:
      return "replacement";
  }
  return "?";
}

BaselineKind baseline_from_string(const std::string& name) {
  for (auto k : {BaselineKind::avg_codec, BaselineKind::d4m, BaselineKind::mgd3, BaselineKind::precomputed_mean,
                 BaselineKind::single_timestep, BaselineKind::replacement}) {
    if (name == to_string(k)) return k;
  }
  throw InvalidArgument("unknown baseline '" + name + "'");
}

std::vector<std::string> BaselineConfig::validate(int num_steps) const {
  std::vector<std::string> v;
  if (d4m_depth < 0 || d4m_depth > num_steps) v.push_back("d4m_depth: must lie in [0, num_steps]");
  if (!(mgd3_lambda >= 0.0) || !std::isfinite(mgd3_lambda)) v.push_back("mgd3_lambda: must be finite and >= 0");
  if (mgd3_guided_steps < 0 || mgd3_guided_steps > num_steps) {
    v.push_back("mgd3_guided_steps: must lie in [0, num_steps]");
  }
  if (single_step < 0 || single_step >= num_steps) v.push_back("single_step: must lie in [0, num_steps)");
  if (replacement_t_stop < 0 || replacement_t_stop > num_steps) {
    v.push_back("replacement_t_stop: must lie in [0, num_steps]");
  }
  return v;
}

std::string BaselineConfig::params_json() const {
  json j{{"kind", to_string(kind)}};
  switch (kind) {
    case BaselineKind::avg_codec:
    case BaselineKind::precomputed_mean:
      break;
    case BaselineKind::d4m:
      j["d4m_depth"] = d4m_depth;
      break;
    case BaselineKind::mgd3:
      j["mgd3_lambda"] = mgd3_lambda;
      j["mgd3_guided_steps"] = mgd3_guided_steps;
      break;
    case BaselineKind::single_timestep:
      j["single_step"] = single_step;
      break;
    case BaselineKind::replacement:
      j["replacement_t_stop"] = replacement_t_stop;
      break;
  }
  return j.dump();
}

Batch avg_codec_prototype(const Denoiser& model, const Batch& clean_latents) {
  if (clean_latents.empty()) throw InvalidArgument("cannot average an empty latent set");
  return decode_image(model, Batch::from_row(row_mean(clean_latents)));
}

Batch d4m_prototype(const Denoiser& model, const Batch& clean_latents, int depth, std::uint64_t seed,
                    const DiffusionSchedule& schedule, const ConditioningSpec& cond, const GuidanceSpec& guidance) {
  if (clean_latents.empty()) throw InvalidArgument("cannot average an empty latent set");
  if (depth < 0 || depth > schedule.num_steps()) {
    throw InvalidArgument("injection depth " + std::to_string(depth) + " out of range [0, " +
                          std::to_string(schedule.num_steps()) + "]");
  }
  const auto mean = row_mean(clean_latents);
  if (depth == 0) return decode_image(model, Batch::from_row(mean));
  const int start = schedule.num_steps() - depth;
  Rng rng(seed);
  std::vector<double> eps(mean.size());
  for (double& e : eps) e = rng.normal();
  Batch z(1, mean.size());
  forward_noise(schedule, start, mean, eps, z.row(0));
  return decode_image(model, sample_ddim(model, std::move(z), schedule, cond, guidance, start));
}

Batch mgd3_prototype(const Denoiser& model, std::span<const double> mean_latent, const Batch& start_latents,
                     double lambda, int guided_steps, const DiffusionSchedule& schedule,
                     const ConditioningSpec& cond, const GuidanceSpec& guidance) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("mode guidance weight must be >= 0");
  if (guided_steps < 0 || guided_steps > schedule.num_steps()) {
    throw InvalidArgument("guided_steps out of range");
  }
  if (mean_latent.size() != start_latents.cols()) throw InvalidArgument("mean latent size mismatch");
  Batch z = start_latents;
  std::vector<double> zhat(z.cols());
  for (int s = 0; s < schedule.num_steps(); ++s) {
    Batch eps = predict_noise(model, z, schedule, s, cond, guidance);
    if (s < guided_steps) {
      const double scale = std::sqrt(1.0 - schedule.alpha_bar(s)) * lambda;
      for (std::size_t r = 0; r < z.rows(); ++r) {
        predict_clean(schedule, s, z.row(r), eps.row(r), zhat);
        auto e = eps.row(r);
        for (std::size_t j = 0; j < e.size(); ++j) e[j] -= scale * (mean_latent[j] - zhat[j]);
      }
    }
    z = ddim_step(schedule, s, z, eps);
  }
  return decode_image(model, z);
}

PrecomputedTargets precompute_mean_activations(const Denoiser& model, const LatentBatch& latents,
                                               const ConditioningSpec& cond, const DmaConfig& config) {
  const auto schedule = schedule_for(model, config.num_steps);
  const std::string tap = config.tap.empty() ? model.bottleneck_tap() : config.tap;
  PrecomputedTargets out;
  Batch z = latents.latents;
  for (int s = 0; s < schedule.num_steps(); ++s) {
    auto pred = predict_with_activation(model, z, schedule, s, cond, config.guidance, tap, config.activation_branch);
    if (!all_finite(pred.activation.values())) {
      throw NumericFailure("non-finite activation at step " + std::to_string(s));
    }
    out.per_step.push_back(row_mean(pred.activation));
    z = ddim_step(schedule, s, z, pred.noise);
  }
  return out;
}

DmaResult precomputed_mean_dma(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config) {
  auto latents = init_latents(config.latent_count, model->latent_shape(), config.seed);
  DmaVariant variant;
  variant.frozen_targets = precompute_mean_activations(*model, latents, cond, config).per_step;
  DmaRunner runner(model, cond, config, std::move(latents), std::move(variant));
  runner.run();
  return runner.result();
}

DmaResult single_timestep_dma(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config,
                              int t_opt) {
  if (t_opt < 0 || t_opt >= config.num_steps) {
    throw InvalidArgument("t_opt " + std::to_string(t_opt) + " out of range [0, " +
                          std::to_string(config.num_steps) + ")");
  }
  DmaVariant variant;
  variant.single_step = t_opt;
  DmaRunner runner(model, cond, config, std::move(variant));
  runner.run();
  return runner.result();
}

DmaResult replacement_run(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config,
                          int t_stop) {
  const auto violations = config.validate();
  if (!violations.empty()) throw InvalidArgument("invalid DMA config: " + violations.front());
  if (t_stop < 0 || t_stop > config.num_steps) throw InvalidArgument("replacement t_stop out of range");
  const auto schedule = schedule_for(*model, config.num_steps);
  const std::string tap = config.tap.empty() ? model->bottleneck_tap() : config.tap;
  check_tap(*model, tap);

  RunState state;
  state.batch = init_latents(config.latent_count, model->latent_shape(), config.seed);
  state.batch.concept_id = cond.concept_id;
  state.config_hash = config.hash();
  Batch& z = state.batch.latents;
  for (int s = 0; s < schedule.num_steps(); ++s) {
    StepTrace tr;
    tr.step = s;
    tr.timestep = schedule.timestep(s);
    auto pred = predict_with_activation(*model, z, schedule, s, cond, config.guidance, tap,
                                        ActivationBranch::conditional);
    if (s <= t_stop) {
      const Batch mean = Batch::from_row(row_mean(pred.activation));
      tr.mean_evaluations = 1;
      tr.spread_after = 0.0;
      pred.noise = predict_noise_substituted(*model, z, schedule, s, cond, config.guidance, tap, mean);
    } else {
      tr.spread_after = mean_squared_deviation(pred.activation);
    }
    z = ddim_step(schedule, s, z, pred.noise);
    if (!all_finite(z.values())) throw NumericFailure("non-finite latents after sampler step " + std::to_string(s));
    state.trace.steps.push_back(tr);
    state.completed_steps = s + 1;
    state.batch.step = s + 1;
  }
  DmaResult r;
  r.prototype_indices = config.prototype_indices();
  r.prototypes = decode_prototypes(*model, state.batch, r.prototype_indices);
  r.trace = state.trace;
  r.state = std::move(state);
  return r;
}

BaselineResult run_baseline(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config,
                            const BaselineConfig& baseline) {
  auto violations = config.validate();
  for (auto& v : baseline.validate(config.num_steps)) violations.push_back(std::move(v));
  if (!violations.empty()) {
    std::string msg = "invalid baseline config:";
    for (const auto& v : violations) msg += " " + v + ";";
    throw InvalidArgument(msg);
  }
  BaselineResult out;
  out.params_json = baseline.params_json();
  const auto schedule = schedule_for(*model, config.num_steps);
  switch (baseline.kind) {
    case BaselineKind::avg_codec:
    case BaselineKind::d4m:
    case BaselineKind::mgd3: {
      const auto latents = init_latents(config.latent_count, model->latent_shape(), config.seed);
      const Batch clean = sample_ddim(*model, latents.latents, schedule, cond, config.guidance);
      const auto idx = config.prototype_indices();
      if (baseline.kind == BaselineKind::avg_codec) {
        const Batch one = avg_codec_prototype(*model, clean);
        out.prototypes = Batch(0, one.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) out.prototypes.append_row(one.row(0));
      } else if (baseline.kind == BaselineKind::d4m) {
        out.prototypes = Batch(0, clean.cols());
        for (int i : idx) {
          const Batch p = d4m_prototype(*model, clean, baseline.d4m_depth,
                                        derive_seed(config.seed, "d4m-noise", static_cast<std::uint64_t>(i)),
                                        schedule, cond, config.guidance);
          out.prototypes.append_row(p.row(0));
        }
      } else {
        out.prototypes = mgd3_prototype(*model, row_mean(clean), latents.latents.select(idx), baseline.mgd3_lambda,
                                        baseline.mgd3_guided_steps, schedule, cond, config.guidance);
      }
      break;
    }
    case BaselineKind::precomputed_mean: {
      auto r = precomputed_mean_dma(model, cond, config);
      out.prototypes = std::move(r.prototypes);
      out.trace = std::move(r.trace);
      break;
    }
    case BaselineKind::single_timestep: {
      auto r = single_timestep_dma(model, cond, config, baseline.single_step);
      out.prototypes = std::move(r.prototypes);
      out.trace = std::move(r.trace);
      break;
    }
    case BaselineKind::replacement: {
      auto r = replacement_run(model, cond, config, baseline.replacement_t_stop);
      out.prototypes = std::move(r.prototypes);
      out.trace = std::move(r.trace);
      break;
    }
  }
  return out;
}

}  // namespace dmavg
