// SPDX-License-Identifier: Apache-2.0
#include "dmavg/dma.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <thread>

#include <json.hpp>

#include "dmavg/container.hpp"
#include "dmavg/errors.hpp"
#include "dmavg/hashing.hpp"

namespace dmavg {

using json = nlohmann::json;

namespace {

const char* branch_name(ActivationBranch b) {
  switch (b) {
    case ActivationBranch::conditional:
      return "conditional";
    case ActivationBranch::unconditional:
      return "unconditional";
    case ActivationBranch::guided:
      return "guided";
  }
  return "?";
}

json step_to_json(const StepTrace& s) {
  return {{"step", s.step},
          {"timestep", s.timestep},
          {"aligned", s.aligned},
          {"mean_evaluations", s.mean_evaluations},
          {"loss_before", s.loss_before},
          {"loss_after", s.loss_after},
          {"spread_after", s.spread_after}};
}

StepTrace step_from_json(const json& j) {
  StepTrace s;
  s.step = j.at("step").get<int>();
  s.timestep = j.at("timestep").get<int>();
  s.aligned = j.at("aligned").get<bool>();
  s.mean_evaluations = j.at("mean_evaluations").get<int>();
  s.loss_before = j.at("loss_before").get<double>();
  s.loss_after = j.at("loss_after").get<double>();
  s.spread_after = j.at("spread_after").get<double>();
  return s;
}

}  // namespace

std::vector<std::string> DmaConfig::validate() const {
  std::vector<std::string> v;
  if (latent_count < 1) v.push_back("latent_count: must be >= 1");
  if (iterations < 0) v.push_back("iterations: must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) v.push_back("learning_rate: must be positive");
  if (num_steps < 1) v.push_back("num_steps: must be >= 1");
  if (t_stop < 0 || t_stop > num_steps) v.push_back("t_stop: must lie in [0, num_steps]");
  if (!(guidance.scale >= 0.0) || !std::isfinite(guidance.scale)) v.push_back("guidance: scale must be finite and >= 0");
  if (decode_indices.empty()) {
    if (decode_count < 1 || decode_count > latent_count) v.push_back("decode_count: must lie in [1, latent_count]");
  } else {
    for (int i : decode_indices) {
      if (i < 0 || i >= latent_count) {
        v.push_back("decode_indices: " + std::to_string(i) + " out of range");
        break;
      }
    }
  }
  if (workers < 1) v.push_back("workers: must be >= 1");
  return v;
}

std::string DmaConfig::hash() const {
  json j{{"latent_count", latent_count},
         {"iterations", iterations},
         {"learning_rate", learning_rate},
         {"t_stop", t_stop},
         {"num_steps", num_steps},
         {"guidance_scale", guidance.scale},
         {"cfg_convention", guidance.convention == CfgConvention::conventional ? "conventional" : "paper-verbatim"},
         {"tap", tap},
         {"activation_branch", branch_name(activation_branch)},
         {"seed", seed},
         {"decode_indices", prototype_indices()}};
  return hash_hex(j.dump());
}

std::vector<int> DmaConfig::prototype_indices() const {
  if (!decode_indices.empty()) return decode_indices;
  std::vector<int> out;
  for (int i = 0; i < decode_count; ++i) out.push_back(i);
  return out;
}

std::string DmaTrace::to_json() const {
  json arr = json::array();
  for (const auto& s : steps) arr.push_back(step_to_json(s));
  return arr.dump();
}

DmaTrace DmaTrace::from_json(const std::string& text) {
  DmaTrace t;
  for (const auto& j : json::parse(text)) t.steps.push_back(step_from_json(j));
  return t;
}

std::string DmaTrace::hash() const { return hash_hex(to_json()); }

void RunState::save(const std::filesystem::path& path) const {
  Container c;
  c.tensors["latents"] = TensorEntry::from(batch.latents.data(), {batch.latents.rows(), batch.latents.cols()});
  json meta{{"kind", "dma-run-state"},
            {"shape", {batch.shape.channels, batch.shape.height, batch.shape.width}},
            {"step", batch.step},
            {"seed", batch.seed},
            {"concept", batch.concept_id},
            {"config_hash", config_hash},
            {"completed_steps", completed_steps},
            {"rng_state", rng_state},
            {"trace", json::parse(trace.to_json())}};
  c.meta_json = meta.dump();
  write_container(c, path);
}

RunState RunState::load(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const json meta = json::parse(c.meta_json);
  if (meta.value("kind", "") != "dma-run-state") throw IoError(path.string() + " is not a run state");
  RunState s;
  const auto shape = meta.at("shape").get<std::vector<int>>();
  s.batch.shape = {shape.at(0), shape.at(1), shape.at(2)};
  const auto& latents = c.at("latents");
  if (latents.shape.size() != 2 || latents.shape[1] != s.batch.shape.size()) {
    throw IoError(path.string() + ": latent tensor does not match the recorded shape");
  }
  s.batch.latents = Batch(latents.shape[0], latents.shape[1], latents.as_f64());
  s.batch.step = meta.at("step").get<int>();
  s.batch.seed = meta.at("seed").get<std::uint64_t>();
  s.batch.concept_id = meta.at("concept").get<int>();
  s.config_hash = meta.at("config_hash").get<std::string>();
  s.completed_steps = meta.at("completed_steps").get<int>();
  s.rng_state = meta.at("rng_state").get<Rng::State>();
  for (const auto& j : meta.at("trace")) s.trace.steps.push_back(step_from_json(j));
  if (!all_finite(s.batch.latents.values())) throw IoError(path.string() + ": non-finite latents");
  return s;
}

LatentBatch init_latents(int count, LatentShape shape, std::uint64_t seed) {
  if (count < 1) throw InvalidArgument("latent count must be >= 1, got " + std::to_string(count));
  if (shape.size() == 0) throw InvalidArgument("latent shape is empty");
  LatentBatch b;
  b.shape = shape;
  b.seed = seed;
  b.latents = Batch(static_cast<std::size_t>(count), shape.size());
  Rng rng(derive_seed(seed, "latents"));
  for (double& v : b.latents.values()) v = rng.normal();
  return b;
}

std::vector<double> mean_activation(const Denoiser& model, const Batch& latents, const DiffusionSchedule& schedule,
                                    int step, const ConditioningSpec& cond, const GuidanceSpec& guidance,
                                    std::string_view tap, ActivationBranch branch) {
  if (latents.empty()) throw InvalidArgument("cannot average an empty latent batch");
  const auto out = predict_with_activation(model, latents, schedule, step, cond, guidance, tap, branch);
  if (!all_finite(out.activation.values())) {
    throw NumericFailure("non-finite activation at step " + std::to_string(step));
  }
  return row_mean(out.activation);
}

namespace {

struct BranchPart {
  int concept_id;
  double coef;
};

std::vector<BranchPart> branch_parts(const AlignmentProblem& p) {
  const int c = p.cond->concept_id;
  const int u = p.cond->negative.value_or(kUnconditional);
  switch (p.branch) {
    case ActivationBranch::conditional:
      return {{c, 1.0}};
    case ActivationBranch::unconditional:
      return {{u, 1.0}};
    case ActivationBranch::guided:
      break;
  }
  const double w = p.guidance.scale;
  if (p.guidance.conditional_only()) return {{c, 1.0}};
  if (p.guidance.convention == CfgConvention::conventional) return {{c, w}, {u, 1.0 - w}};
  return {{c, 1.0 - w}, {u, -w}};
}

double evaluate(const AlignmentProblem& p, std::span<const double> z, std::span<const double> target,
                std::span<double> gradient, std::vector<double>* activation) {
  if (!p.model || !p.cond) throw InvalidArgument("alignment problem is missing the model or conditioning");
  const auto parts = branch_parts(p);
  std::vector<std::unique_ptr<ActivationTape>> tapes;
  for (const auto& part : parts) tapes.push_back(p.model->record(z, p.timestep, part.concept_id, *p.cond, p.tap));

  std::vector<double> act;
  if (tapes.size() == 1) {
    const auto a = tapes[0]->activation();
    act.assign(a.begin(), a.end());
  } else {
    act.resize(tapes[0]->activation().size());
    cfg_combine(tapes[0]->activation(), tapes[1]->activation(), p.guidance, act);
  }
  if (act.size() != target.size()) {
    throw InvalidArgument("target has " + std::to_string(target.size()) + " values, tap '" + p.tap + "' has " +
                          std::to_string(act.size()));
  }
  double loss = 0.0;
  std::vector<double> cot(act.size());
  for (std::size_t i = 0; i < act.size(); ++i) {
    const double r = act[i] - target[i];
    loss += r * r;
    cot[i] = 2.0 * r;
  }
  if (!gradient.empty()) {
    if (gradient.size() != z.size()) throw InvalidArgument("gradient buffer size mismatch");
    std::fill(gradient.begin(), gradient.end(), 0.0);
    std::vector<double> scaled(cot.size());
    for (std::size_t k = 0; k < parts.size(); ++k) {
      for (std::size_t i = 0; i < cot.size(); ++i) scaled[i] = parts[k].coef * cot[i];
      tapes[k]->pullback(scaled, gradient);
    }
  }
  if (activation) *activation = std::move(act);
  return loss;
}

std::string site(const AlignmentProblem& p, int iteration) {
  return "step " + std::to_string(p.step) + ", latent " + std::to_string(p.latent_index) + ", iteration " +
         std::to_string(iteration);
}

}  // namespace

double alignment_loss(const AlignmentProblem& problem, std::span<const double> latent,
                      std::span<const double> target, std::span<double> gradient) {
  return evaluate(problem, latent, target, gradient, nullptr);
}

AlignResult align_latent(const AlignmentProblem& problem, std::span<const double> latent,
                         std::span<const double> target) {
  if (problem.iterations < 0) throw InvalidArgument("iterations must be >= 0");
  if (!(problem.learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;

  AlignResult out;
  out.latent.assign(latent.begin(), latent.end());
  const std::size_t n = out.latent.size();
  std::vector<double> m(n, 0.0);
  std::vector<double> v(n, 0.0);
  std::vector<double> g(n);
  double b1t = 1.0;
  double b2t = 1.0;
  for (int i = 0; i < problem.iterations; ++i) {
    const double loss = evaluate(problem, out.latent, target, g, nullptr);
    if (!std::isfinite(loss) || !all_finite(g)) {
      throw NumericFailure("non-finite alignment loss at " + site(problem, i));
    }
    if (i == 0) out.loss_before = loss;
    b1t *= kBeta1;
    b2t *= kBeta2;
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
      const double mhat = m[j] / (1.0 - b1t);
      const double vhat = v[j] / (1.0 - b2t);
      out.latent[j] -= problem.learning_rate * mhat / (std::sqrt(vhat) + kEps);
    }
  }
  out.loss_after = evaluate(problem, out.latent, target, {}, &out.activation);
  if (!std::isfinite(out.loss_after)) {
    throw NumericFailure("non-finite alignment loss at " + site(problem, problem.iterations));
  }
  if (problem.iterations == 0) out.loss_before = out.loss_after;
  return out;
}

Batch sample_ddim(const Denoiser& model, Batch latents, const DiffusionSchedule& schedule,
                  const ConditioningSpec& cond, const GuidanceSpec& guidance, int start_step) {
  if (start_step < 0 || start_step > schedule.num_steps()) {
    throw InvalidArgument("start step " + std::to_string(start_step) + " out of range");
  }
  for (int s = start_step; s < schedule.num_steps(); ++s) {
    const Batch eps = predict_noise(model, latents, schedule, s, cond, guidance);
    latents = ddim_step(schedule, s, latents, eps);
  }
  return latents;
}

DiffusionSchedule schedule_for(const Denoiser& model, int num_steps) {
  return build_schedule(num_steps, model.train_steps(), model.beta_spec());
}

namespace {

void require_valid(const DmaConfig& config) {
  const auto violations = config.validate();
  if (!violations.empty()) {
    std::string msg = "invalid DMA config:";
    for (const auto& v : violations) msg += " " + v + ";";
    throw InvalidArgument(msg);
  }
}

}  // namespace

DmaRunner::DmaRunner(DenoiserHandle model, ConditioningSpec cond, DmaConfig config, DmaVariant variant)
    : DmaRunner(model, cond, config, init_latents(config.latent_count, model->latent_shape(), config.seed),
                std::move(variant)) {}

DmaRunner::DmaRunner(DenoiserHandle model, ConditioningSpec cond, DmaConfig config, LatentBatch initial,
                     DmaVariant variant)
    : model_(std::move(model)),
      cond_(std::move(cond)),
      config_(std::move(config)),
      variant_(std::move(variant)),
      schedule_(schedule_for(*model_, config_.num_steps)) {
  if (initial.latents.rows() == 0 || initial.latents.cols() != model_->latent_shape().size()) {
    throw InvalidArgument("initial latents do not match the model's latent shape");
  }
  config_.latent_count = static_cast<int>(initial.latents.rows());
  require_valid(config_);
  check_conditioning(*model_, cond_);
  tap_ = config_.tap.empty() ? model_->bottleneck_tap() : config_.tap;
  check_tap(*model_, tap_);
  if (variant_.single_step && (*variant_.single_step < 0 || *variant_.single_step >= config_.num_steps)) {
    throw InvalidArgument("single alignment step out of range");
  }
  state_.batch = std::move(initial);
  state_.batch.shape = model_->latent_shape();
  state_.batch.concept_id = cond_.concept_id;
  state_.batch.step = 0;
  state_.config_hash = config_.hash();
  state_.rng_state = Rng(derive_seed(config_.seed, "latents")).state();
}

DmaRunner::DmaRunner(DenoiserHandle model, ConditioningSpec cond, DmaConfig config, RunState resume,
                     DmaVariant variant)
    : model_(std::move(model)),
      cond_(std::move(cond)),
      config_(std::move(config)),
      variant_(std::move(variant)),
      schedule_(schedule_for(*model_, config_.num_steps)) {
  require_valid(config_);
  check_conditioning(*model_, cond_);
  tap_ = config_.tap.empty() ? model_->bottleneck_tap() : config_.tap;
  check_tap(*model_, tap_);
  if (resume.config_hash != config_.hash()) {
    throw InvalidArgument("run state was produced by a different config");
  }
  if (resume.completed_steps < 0 || resume.completed_steps > config_.num_steps ||
      resume.batch.latents.cols() != model_->latent_shape().size() ||
      static_cast<int>(resume.batch.latents.rows()) != config_.latent_count) {
    throw InvalidArgument("run state does not match the model or config");
  }
  state_ = std::move(resume);
}

bool DmaRunner::aligns_at(int step) const {
  if (variant_.single_step) return step == *variant_.single_step;
  return step <= config_.t_stop;
}

void DmaRunner::align_batch(int step, std::span<const double> target, StepTrace& trace) {
  Batch& latents = state_.batch.latents;
  const int k = static_cast<int>(latents.rows());
  std::vector<AlignResult> results(static_cast<std::size_t>(k));
  auto solve = [&](int i) {
    AlignmentProblem p;
    p.model = model_.get();
    p.cond = &cond_;
    p.guidance = config_.guidance;
    p.branch = config_.activation_branch;
    p.tap = tap_;
    p.timestep = schedule_.timestep(step);
    p.iterations = config_.iterations;
    p.learning_rate = config_.learning_rate;
    p.step = step;
    p.latent_index = i;
    results[static_cast<std::size_t>(i)] = align_latent(p, latents.row(static_cast<std::size_t>(i)), target);
  };

  const int workers = std::min(config_.workers, k);
  if (workers <= 1) {
    for (int i = 0; i < k; ++i) solve(i);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(k));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (int i = w; i < k; i += workers) {
          try {
            solve(i);
          } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  double before = 0.0;
  double after = 0.0;
  for (int i = 0; i < k; ++i) {
    const auto& r = results[static_cast<std::size_t>(i)];
    std::copy(r.latent.begin(), r.latent.end(), latents.row(static_cast<std::size_t>(i)).begin());
    before += r.loss_before;
    after += r.loss_after;
  }
  trace.aligned = true;
  trace.loss_before = before / k;
  trace.loss_after = after / k;
}

void DmaRunner::step() {
  if (finished()) throw InvalidArgument("run has already completed every step");
  const int s = state_.completed_steps;
  StepTrace tr;
  tr.step = s;
  tr.timestep = schedule_.timestep(s);
  Batch& latents = state_.batch.latents;
  if (aligns_at(s)) {
    std::vector<double> target;
    if (variant_.frozen_targets.empty()) {
      target = mean_activation(*model_, latents, schedule_, s, cond_, config_.guidance, tap_,
                               config_.activation_branch);
      tr.mean_evaluations = 1;
    } else {
      target = variant_.frozen_targets.at(static_cast<std::size_t>(s));
    }
    align_batch(s, target, tr);
  }
  const auto pred =
      predict_with_activation(*model_, latents, schedule_, s, cond_, config_.guidance, tap_, config_.activation_branch);
  tr.spread_after = mean_squared_deviation(pred.activation);
  latents = ddim_step(schedule_, s, latents, pred.noise);
  if (!all_finite(latents.values())) {
    throw NumericFailure("non-finite latents after sampler step " + std::to_string(s));
  }
  state_.completed_steps = s + 1;
  state_.batch.step = s + 1;
  state_.trace.steps.push_back(tr);
}

void DmaRunner::run() {
  while (!finished()) step();
}

DmaResult DmaRunner::result() const {
  if (!finished()) throw InvalidArgument("run has not finished");
  DmaResult r;
  r.prototype_indices = config_.prototype_indices();
  r.prototypes = decode_prototypes(*model_, state_.batch, r.prototype_indices);
  r.state = state_;
  r.trace = state_.trace;
  return r;
}

DmaResult dma_run(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config) {
  DmaRunner runner(model, cond, config);
  runner.run();
  return runner.result();
}

DmaResult dma_run(const DenoiserHandle& model, const ConditioningSpec& cond, const DmaConfig& config,
                  LatentBatch initial) {
  DmaRunner runner(model, cond, config, std::move(initial));
  runner.run();
  return runner.result();
}

Batch decode_prototypes(const Denoiser& model, const LatentBatch& batch, std::span<const int> indices) {
  if (indices.empty()) throw InvalidArgument("no prototype indices given");
  for (int i : indices) {
    if (i < 0 || i >= batch.size()) {
      throw InvalidArgument("prototype index " + std::to_string(i) + " out of range [0, " +
                            std::to_string(batch.size()) + ")");
    }
  }
  return decode_image(model, batch.latents.select(indices));
}

}  // namespace dmavg
