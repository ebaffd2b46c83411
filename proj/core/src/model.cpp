// SPDX-License-Identifier: Apache-2.0
#include "dmavg/model.hpp"

#include <algorithm>
#include <cmath>

#include "dmavg/errors.hpp"
#include "dmavg/random.hpp"

namespace dmavg {

std::size_t LowRankAdapter::parameter_count() const {
  std::size_t n = 0;
  for (const auto& f : factors) {
    n += f.down.size() + f.up.size();
  }
  return n;
}

ConditioningGradient Denoiser::conditioning_gradient(const Batch&, std::span<const int>, const Batch&,
                                                     const ConditioningSpec&, bool, bool) const {
  throw NotAvailable("this denoiser does not expose conditioning gradients");
}

std::vector<double> Denoiser::concept_embedding(int) const {
  throw NotAvailable("this denoiser has no concept embedding table");
}

LowRankAdapter Denoiser::make_adapter(int rank, std::uint64_t seed) const {
  if (rank <= 0) {
    throw InvalidArgument("adapter rank must be positive, got " + std::to_string(rank));
  }
  const auto targets = adapter_targets();
  if (targets.empty()) {
    throw NotAvailable("this denoiser has no adapter targets");
  }
  Rng rng(seed);
  LowRankAdapter adapter;
  for (const auto& t : targets) {
    LowRankFactor f;
    f.target = t.name;
    f.in = t.in;
    f.out = t.out;
    f.rank = rank;
    f.down.resize(static_cast<std::size_t>(t.in) * static_cast<std::size_t>(rank));
    const double scale = 1.0 / std::sqrt(static_cast<double>(t.in));
    for (auto& v : f.down) {
      v = scale * rng.normal();
    }
    f.up.assign(static_cast<std::size_t>(rank) * static_cast<std::size_t>(t.out), 0.0);
    adapter.factors.push_back(std::move(f));
  }
  return adapter;
}

void check_tap(const Denoiser& model, std::string_view tap) {
  const auto& taps = model.taps();
  if (std::find(taps.begin(), taps.end(), tap) == taps.end()) {
    throw InvalidArgument("unknown activation tap '" + std::string(tap) + "'");
  }
}

void check_conditioning(const Denoiser& model, const ConditioningSpec& spec) {
  const int n = model.num_concepts();
  if (spec.concept_id < 0 || spec.concept_id >= n) {
    throw InvalidArgument("unknown concept id " + std::to_string(spec.concept_id));
  }
  if (spec.negative && *spec.negative != kUnconditional && (*spec.negative < 0 || *spec.negative >= n)) {
    throw InvalidArgument("unknown negative concept id " + std::to_string(*spec.negative));
  }
  if (spec.learned_embedding && spec.learned_embedding->size() != model.embedding_dim()) {
    throw InvalidArgument("learned embedding has " + std::to_string(spec.learned_embedding->size()) +
                          " entries, model expects " + std::to_string(model.embedding_dim()));
  }
  if (spec.adapter) {
    const auto targets = model.adapter_targets();
    const auto& factors = spec.adapter->factors;
    if (factors.size() != targets.size()) {
      throw InvalidArgument("adapter has " + std::to_string(factors.size()) + " factors, model exposes " +
                            std::to_string(targets.size()) + " targets");
    }
    const int rank = spec.adapter->rank();
    for (std::size_t i = 0; i < factors.size(); ++i) {
      const auto& f = factors[i];
      const auto& t = targets[i];
      if (f.target != t.name || f.in != t.in || f.out != t.out) {
        throw InvalidArgument("adapter factor '" + f.target + "' does not match target '" + t.name + "'");
      }
      if (f.rank <= 0 || f.rank != rank) {
        throw InvalidArgument("adapter rank must be positive and uniform");
      }
      if (f.down.size() != static_cast<std::size_t>(f.in) * static_cast<std::size_t>(f.rank) ||
          f.up.size() != static_cast<std::size_t>(f.rank) * static_cast<std::size_t>(f.out)) {
        throw InvalidArgument("adapter factor '" + f.target + "' has inconsistent sizes");
      }
    }
  }
}

namespace {

void check_latents(const Denoiser& model, const Batch& z) {
  if (z.cols() != model.latent_shape().size()) {
    throw InvalidArgument("latent has " + std::to_string(z.cols()) + " values, model expects " +
                          std::to_string(model.latent_shape().size()));
  }
}

int unconditional_concept(const ConditioningSpec& cond) { return cond.negative.value_or(kUnconditional); }

Batch combine(const Batch& cond, const Batch& uncond, const GuidanceSpec& guidance) {
  Batch out(cond.rows(), cond.cols());
  cfg_combine(cond.values(), uncond.values(), guidance, out.values());
  return out;
}

}  // namespace

Batch predict_noise(const Denoiser& model, const Batch& z, const DiffusionSchedule& schedule, int step,
                    const ConditioningSpec& cond, const GuidanceSpec& guidance) {
  check_latents(model, z);
  check_conditioning(model, cond);
  const int t = schedule.timestep(step);
  Batch eps_c = model.forward(z, t, cond.concept_id, cond);
  if (guidance.conditional_only()) {
    return eps_c;
  }
  Batch eps_u = model.forward(z, t, unconditional_concept(cond), cond);
  return combine(eps_c, eps_u, guidance);
}

NoiseAndActivation predict_with_activation(const Denoiser& model, const Batch& z, const DiffusionSchedule& schedule,
                                           int step, const ConditioningSpec& cond, const GuidanceSpec& guidance,
                                           std::string_view tap, ActivationBranch branch) {
  check_latents(model, z);
  check_conditioning(model, cond);
  check_tap(model, tap);
  const int t = schedule.timestep(step);

  NoiseAndActivation out;
  Batch act_c;
  TapRequest req_c{std::string(tap), &act_c, nullptr};
  Batch eps_c = model.forward(z, t, cond.concept_id, cond, &req_c);

  const bool need_uncond = !guidance.conditional_only() || branch == ActivationBranch::unconditional;
  if (!need_uncond) {
    out.noise = std::move(eps_c);
    out.activation = std::move(act_c);
    return out;
  }
  Batch act_u;
  TapRequest req_u{std::string(tap), &act_u, nullptr};
  Batch eps_u = model.forward(z, t, unconditional_concept(cond), cond, &req_u);
  out.noise = guidance.conditional_only() ? eps_c : combine(eps_c, eps_u, guidance);
  switch (branch) {
    case ActivationBranch::conditional:
      out.activation = std::move(act_c);
      break;
    case ActivationBranch::unconditional:
      out.activation = std::move(act_u);
      break;
    case ActivationBranch::guided:
      out.activation = combine(act_c, act_u, guidance);
      break;
  }
  return out;
}

Batch predict_noise_substituted(const Denoiser& model, const Batch& z, const DiffusionSchedule& schedule, int step,
                                const ConditioningSpec& cond, const GuidanceSpec& guidance, std::string_view tap,
                                const Batch& substitute) {
  check_latents(model, z);
  check_conditioning(model, cond);
  check_tap(model, tap);
  const int t = schedule.timestep(step);
  TapRequest req{std::string(tap), nullptr, &substitute};
  Batch eps_c = model.forward(z, t, cond.concept_id, cond, &req);
  if (guidance.conditional_only()) {
    return eps_c;
  }
  Batch eps_u = model.forward(z, t, unconditional_concept(cond), cond);
  return combine(eps_c, eps_u, guidance);
}

Batch decode_image(const Denoiser& model, const Batch& latents) {
  check_latents(model, latents);
  return model.decode(latents);
}

Batch encode_image(const Denoiser& model, const Batch& images) {
  if (images.cols() != model.latent_shape().size()) {
    throw InvalidArgument("image size does not match the model codec");
  }
  return model.encode(images);
}

DenoiserHandle apply_conditioning(const Denoiser& model, const ConditioningSpec& spec) {
  check_conditioning(model, spec);
  return model.with_conditioning(spec);
}

}  // namespace dmavg
