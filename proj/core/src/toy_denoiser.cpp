// SPDX-License-Identifier: Apache-2.0
#include "dmavg/toy_denoiser.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "dmavg/container.hpp"
#include "dmavg/errors.hpp"
#include "dmavg/random.hpp"
#include "toy_network.hpp"

namespace dmavg {

using json = nlohmann::json;
using detail::kNumBlocks;
using detail::kOutputLayer;

namespace detail {

ToyLayout ToyLayout::build(const ToyDenoiserConfig& cfg) {
  if (cfg.num_concepts <= 0 || cfg.time_features <= 0 || cfg.time_features % 2 != 0 || cfg.cond_dim <= 0 ||
      cfg.enc1 <= 0 || cfg.enc2 <= 0 || cfg.bottleneck <= 0 || cfg.train_steps <= 0 || cfg.shape.size() == 0) {
    throw InvalidArgument("invalid toy denoiser configuration");
  }
  ToyLayout l;
  l.dim = static_cast<int>(cfg.shape.size());
  l.cond_dim = cfg.cond_dim;
  l.time_features = cfg.time_features;
  l.train_steps = cfg.train_steps;
  l.class_rows = cfg.num_concepts + 1;
  l.widths = {cfg.enc1, cfg.enc2, cfg.bottleneck, cfg.enc2, cfg.enc1};
  std::size_t offset = 0;
  auto dense = [&](int in, int out, bool bias) {
    DenseSlot s;
    s.in = in;
    s.out = out;
    s.w = offset;
    offset += static_cast<std::size_t>(in) * static_cast<std::size_t>(out);
    if (bias) {
      s.b = offset;
      offset += static_cast<std::size_t>(out);
    }
    return s;
  };
  l.time_in = dense(cfg.time_features, cfg.cond_dim, true);
  l.class_table = offset;
  offset += static_cast<std::size_t>(l.class_rows) * static_cast<std::size_t>(cfg.cond_dim);
  l.enc1 = dense(l.dim, cfg.enc1, true);
  l.enc2 = dense(cfg.enc1, cfg.enc2, true);
  l.bott = dense(cfg.enc2, cfg.bottleneck, true);
  l.dec2 = dense(cfg.bottleneck, cfg.enc2, true);
  l.skip2 = dense(cfg.enc2, cfg.enc2, false);
  l.dec1 = dense(cfg.enc2, cfg.enc1, true);
  l.skip1 = dense(cfg.enc1, cfg.enc1, false);
  l.out = dense(cfg.enc1, l.dim, true);
  for (int b = 0; b < kNumBlocks; ++b) {
    l.proj[static_cast<std::size_t>(b)] = dense(cfg.cond_dim, l.widths[static_cast<std::size_t>(b)], false);
  }
  l.total = offset;
  for (double a : training_alpha_bars(cfg.beta, cfg.train_steps)) {
    l.signal.push_back(std::sqrt(a));
    l.noise.push_back(std::sqrt(1.0 - a));
  }
  return l;
}

void sinusoidal_features(int timestep, int count, double* out) {
  const int half = count / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(static_cast<double>(timestep) * freq);
    out[half + i] = std::cos(static_cast<double>(timestep) * freq);
  }
}

}  // namespace detail

namespace {

template <class T>
std::vector<T> cast_vector(std::span<const double> v) {
  return std::vector<T>(v.begin(), v.end());
}

int block_index(std::string_view tap) {
  const auto& names = detail::block_names();
  for (int b = 0; b < kNumBlocks; ++b) {
    if (tap == names[static_cast<std::size_t>(b)]) return b;
  }
  throw InvalidArgument("unknown activation tap '" + std::string(tap) + "'");
}

std::shared_ptr<ToyWeights> make_weights(const ToyDenoiserConfig& config, std::vector<float> params) {
  auto w = std::make_shared<ToyWeights>();
  w->config = config;
  w->layout = detail::ToyLayout::build(config);
  if (params.size() != w->layout.total) {
    throw InvalidArgument("toy denoiser expects " + std::to_string(w->layout.total) + " parameters, got " +
                          std::to_string(params.size()));
  }
  w->f32 = std::move(params);
  w->f64.assign(w->f32.begin(), w->f32.end());
  return w;
}

template <class T>
class ToyTape final : public ActivationTape {
 public:
  ToyTape(std::shared_ptr<const ToyWeights> weights, std::vector<T> z, detail::CondCache<T> cc,
          detail::BodyCache<T> body, int block)
      : weights_(std::move(weights)), z_(std::move(z)), cc_(std::move(cc)), body_(std::move(body)), block_(block) {
    const auto& act = body_.act[static_cast<std::size_t>(block_)];
    activation_.assign(act.begin(), act.end());
  }

  std::span<const double> activation() const override { return activation_; }

  void pullback(std::span<const double> cotangent, std::span<double> grad_latent) const override {
    const auto& l = weights_->layout;
    if (cotangent.size() != activation_.size() || grad_latent.size() != static_cast<std::size_t>(l.dim)) {
      throw InvalidArgument("pullback: shape mismatch");
    }
    detail::ToyNet<T> net(l, weights_->data<T>());
    std::vector<T> cot(cotangent.begin(), cotangent.end());
    std::vector<T> gz(static_cast<std::size_t>(l.dim), T(0));
    detail::Gradients<T> g;
    g.latent = gz.data();
    net.body_backward(z_.data(), body_, nullptr, block_, cot.data(), g);
    std::copy(gz.begin(), gz.end(), grad_latent.begin());
  }

 private:
  std::shared_ptr<const ToyWeights> weights_;
  std::vector<T> z_;
  detail::CondCache<T> cc_;
  detail::BodyCache<T> body_;
  int block_;
  std::vector<double> activation_;
};

// Resolution of (concept, spec, handle refinement) into network inputs.
struct Refinement {
  std::optional<int> concept_id;
  const std::optional<std::vector<double>>* embedding;
  const std::optional<LowRankAdapter>* adapter;
};

template <class T>
detail::ResolvedCond<T> resolve(const ToyWeights& w, int concept_id, const ConditioningSpec& spec,
                                const Refinement& handle) {
  detail::ResolvedCond<T> rc;
  const auto& l = w.layout;
  const int n = w.config.num_concepts;
  const std::vector<double>* emb = nullptr;
  if (concept_id != kUnconditional) {
    if (spec.learned_embedding && concept_id == spec.concept_id) {
      emb = &*spec.learned_embedding;
    } else if (*handle.embedding && handle.concept_id && concept_id == *handle.concept_id) {
      emb = &**handle.embedding;
    }
  }
  if (emb) {
    if (emb->size() != static_cast<std::size_t>(l.cond_dim)) {
      throw InvalidArgument("learned embedding size mismatch");
    }
    rc.concept_row = cast_vector<T>(*emb);
  } else {
    const int row = concept_id == kUnconditional ? n : concept_id;
    if (row < 0 || row > n) {
      throw InvalidArgument("unknown concept id " + std::to_string(concept_id));
    }
    const auto* base = w.f64.data() + l.class_table + static_cast<std::size_t>(row) * l.cond_dim;
    rc.concept_row = cast_vector<T>(std::span<const double>(base, static_cast<std::size_t>(l.cond_dim)));
    rc.table_row = row;
  }
  const LowRankAdapter* adapter = spec.adapter ? &*spec.adapter : (*handle.adapter ? &**handle.adapter : nullptr);
  if (adapter) {
    if (adapter->factors.size() != static_cast<std::size_t>(kNumBlocks)) {
      throw InvalidArgument("adapter does not match the conditioning projections");
    }
    for (const auto& f : adapter->factors) {
      detail::AdapterFactorT<T> t;
      t.rank = f.rank;
      t.down = cast_vector<T>(f.down);
      t.up = cast_vector<T>(f.up);
      rc.adapter.push_back(std::move(t));
    }
  }
  return rc;
}

template <class T>
Batch forward_impl(const ToyWeights& w, const Batch& z, int timestep, const detail::ResolvedCond<T>& rc,
                   const TapRequest* tap) {
  const auto& l = w.layout;
  detail::ToyNet<T> net(l, w.data<T>());
  detail::CondCache<T> cc;
  net.conditioning(timestep, rc, cc);

  int block = -1;
  if (tap) {
    block = block_index(tap->tap);
  }
  const std::size_t width = block >= 0 ? static_cast<std::size_t>(l.widths[static_cast<std::size_t>(block)]) : 0;
  std::vector<T> substitute;
  const bool broadcast = tap && tap->substitute && tap->substitute->rows() == 1;
  if (tap && tap->substitute) {
    if (tap->substitute->cols() != width || (!broadcast && tap->substitute->rows() != z.rows())) {
      throw InvalidArgument("tap substitute has the wrong shape");
    }
    if (broadcast) {
      substitute = cast_vector<T>(tap->substitute->row(0));
    }
  }
  if (tap && tap->capture) {
    *tap->capture = Batch(z.rows(), width);
  }

  Batch eps(z.rows(), static_cast<std::size_t>(l.dim));
  detail::BodyCache<T> body;
  std::vector<T> zt(static_cast<std::size_t>(l.dim));
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto zr = z.row(r);
    std::copy(zr.begin(), zr.end(), zt.begin());
    const T* sub = nullptr;
    if (tap && tap->substitute) {
      if (!broadcast) {
        substitute = cast_vector<T>(tap->substitute->row(r));
      }
      sub = substitute.data();
    }
    net.body(zt.data(), cc, body, kOutputLayer, sub ? block : -1, sub);
    std::copy(body.eps.begin(), body.eps.end(), eps.row(r).begin());
    if (tap && tap->capture) {
      const auto& act = body.act[static_cast<std::size_t>(block)];
      std::copy(act.begin(), act.end(), tap->capture->row(r).begin());
    }
  }
  return eps;
}

// Mean squared noise-prediction loss with min-SNR weighting (gamma 5) and
// its gradients for a batch. Row r uses its own timestep and conditioning.
constexpr double kSnrGamma = 5.0;

template <class T>
double denoising_gradient(const ToyWeights& w, const T* params, const Batch& noisy, std::span<const int> timesteps,
                          const std::vector<const detail::ResolvedCond<T>*>& conds, const Batch& target,
                          detail::Gradients<T>& g, std::span<const std::uint8_t> drop_skips = {}) {
  const auto& l = w.layout;
  if (noisy.cols() != static_cast<std::size_t>(l.dim) || target.cols() != noisy.cols() ||
      target.rows() != noisy.rows() || timesteps.size() != noisy.rows() || conds.size() != noisy.rows()) {
    throw InvalidArgument("denoising batch has inconsistent shapes");
  }
  detail::ToyNet<T> net(l, params);
  detail::CondCache<T> cc;
  detail::BodyCache<T> body;
  std::vector<T> zt(static_cast<std::size_t>(l.dim));
  std::vector<T> deps(static_cast<std::size_t>(l.dim));
  const double scale = 1.0 / (static_cast<double>(noisy.rows()) * static_cast<double>(l.dim));
  double loss = 0.0;
  for (std::size_t r = 0; r < noisy.rows(); ++r) {
    auto zr = noisy.row(r);
    std::copy(zr.begin(), zr.end(), zt.begin());
    net.conditioning(timesteps[r], *conds[r], cc);
    body.skips = drop_skips.empty() || !drop_skips[r];
    net.body(zt.data(), cc, body, kOutputLayer);
    auto tr = target.row(r);
    const auto ti = static_cast<std::size_t>(timesteps[r]);
    const double snr = l.signal[ti] * l.signal[ti] / (l.noise[ti] * l.noise[ti]);
    const double weight = std::min(snr, kSnrGamma) / snr * scale;
    double row_loss = 0.0;
    for (int i = 0; i < l.dim; ++i) {
      const double diff = static_cast<double>(body.eps[static_cast<std::size_t>(i)]) - tr[static_cast<std::size_t>(i)];
      row_loss += diff * diff;
      deps[static_cast<std::size_t>(i)] = static_cast<T>(2.0 * diff * weight);
    }
    loss += row_loss * weight;
    auto grad_proj = net.body_backward(zt.data(), body, deps.data(), -1, nullptr, g);
    net.conditioning_backward(cc, *conds[r], grad_proj, g);
  }
  return loss;
}

}  // namespace

ToyDenoiser::ToyDenoiser(const ToyDenoiserConfig& config, std::vector<float> parameters, Precision precision)
    : weights_(make_weights(config, std::move(parameters))), precision_(precision) {}

std::shared_ptr<ToyDenoiser> ToyDenoiser::initialize(const ToyDenoiserConfig& config, std::uint64_t seed) {
  const auto layout = detail::ToyLayout::build(config);
  std::vector<float> p(layout.total, 0.0f);
  Rng rng(seed);
  auto fill = [&](const detail::DenseSlot& s, double gain) {
    const double scale = gain / std::sqrt(static_cast<double>(s.in));
    for (std::size_t i = 0; i < static_cast<std::size_t>(s.in) * static_cast<std::size_t>(s.out); ++i) {
      p[s.w + i] = static_cast<float>(scale * rng.normal());
    }
  };
  fill(layout.time_in, 1.0);
  for (std::size_t i = 0; i < static_cast<std::size_t>(layout.class_rows) * layout.cond_dim; ++i) {
    p[layout.class_table + i] = static_cast<float>(rng.normal());
  }
  for (const auto* s : {&layout.enc1, &layout.enc2, &layout.bott, &layout.dec2, &layout.dec1}) {
    fill(*s, 1.0);
  }
  fill(layout.skip2, 0.5);
  fill(layout.skip1, 0.5);
  for (const auto& s : layout.proj) {
    fill(s, 1.0);
  }
  // The output layer starts at zero so the initial prediction is the bias.
  return std::make_shared<ToyDenoiser>(config, std::move(p));
}

const ToyDenoiserConfig& ToyDenoiser::config() const { return weights_->config; }
std::span<const float> ToyDenoiser::parameters() const { return weights_->f32; }

std::shared_ptr<ToyDenoiser> ToyDenoiser::with_precision(Precision precision) const {
  auto copy = std::make_shared<ToyDenoiser>(*this);
  copy->precision_ = precision;
  return copy;
}

LatentShape ToyDenoiser::latent_shape() const { return weights_->config.shape; }
int ToyDenoiser::train_steps() const { return weights_->config.train_steps; }
BetaSpec ToyDenoiser::beta_spec() const { return weights_->config.beta; }
int ToyDenoiser::num_concepts() const { return weights_->config.num_concepts; }
std::size_t ToyDenoiser::embedding_dim() const { return static_cast<std::size_t>(weights_->config.cond_dim); }

std::vector<AdapterTarget> ToyDenoiser::adapter_targets() const {
  std::vector<AdapterTarget> out;
  const auto& l = weights_->layout;
  for (int b = 0; b < kNumBlocks; ++b) {
    out.push_back({detail::projection_names()[static_cast<std::size_t>(b)], l.cond_dim,
                   l.widths[static_cast<std::size_t>(b)]});
  }
  return out;
}

const std::vector<std::string>& ToyDenoiser::taps() const {
  static const std::vector<std::string> names(detail::block_names().begin(), detail::block_names().end());
  return names;
}

std::size_t ToyDenoiser::tap_size(std::string_view tap) const {
  return static_cast<std::size_t>(weights_->layout.widths[static_cast<std::size_t>(block_index(tap))]);
}

Batch ToyDenoiser::forward(const Batch& z, int timestep, int concept_id, const ConditioningSpec& spec,
                           const TapRequest* tap) const {
  if (z.cols() != weights_->config.shape.size()) {
    throw InvalidArgument("toy denoiser: latent size mismatch");
  }
  const Refinement handle{refined_concept_, &embedding_, &adapter_};
  if (precision_ == Precision::f32) {
    return forward_impl<float>(*weights_, z, timestep, resolve<float>(*weights_, concept_id, spec, handle), tap);
  }
  return forward_impl<double>(*weights_, z, timestep, resolve<double>(*weights_, concept_id, spec, handle), tap);
}

std::unique_ptr<ActivationTape> ToyDenoiser::record(std::span<const double> z, int timestep, int concept_id,
                                                    const ConditioningSpec& spec, std::string_view tap) const {
  const auto& l = weights_->layout;
  if (z.size() != static_cast<std::size_t>(l.dim)) {
    throw InvalidArgument("toy denoiser: latent size mismatch");
  }
  const int block = block_index(tap);
  const Refinement handle{refined_concept_, &embedding_, &adapter_};
  auto run = [&]<class T>(T) -> std::unique_ptr<ActivationTape> {
    auto rc = resolve<T>(*weights_, concept_id, spec, handle);
    detail::ToyNet<T> net(l, weights_->data<T>());
    detail::CondCache<T> cc;
    net.conditioning(timestep, rc, cc);
    detail::BodyCache<T> body;
    std::vector<T> zt(z.begin(), z.end());
    net.body(zt.data(), cc, body, block);
    return std::make_unique<ToyTape<T>>(weights_, std::move(zt), std::move(cc), std::move(body), block);
  };
  if (precision_ == Precision::f32) {
    return run(float{});
  }
  return run(double{});
}

Batch ToyDenoiser::decode(const Batch& latents) const {
  Batch out = latents;
  for (double& v : out.values()) {
    v = std::clamp(v, -1.0, 1.0);
  }
  return out;
}

Batch ToyDenoiser::encode(const Batch& images) const { return images; }

std::shared_ptr<const Denoiser> ToyDenoiser::with_conditioning(const ConditioningSpec& spec) const {
  check_conditioning(*this, spec);
  auto copy = std::make_shared<ToyDenoiser>(*this);
  if (spec.learned_embedding) {
    copy->refined_concept_ = spec.concept_id;
    copy->embedding_ = spec.learned_embedding;
  }
  if (spec.adapter) {
    copy->adapter_ = spec.adapter;
  }
  return copy;
}

std::vector<double> ToyDenoiser::concept_embedding(int concept_id) const {
  if (concept_id < 0 || concept_id >= num_concepts()) {
    throw InvalidArgument("unknown concept id " + std::to_string(concept_id));
  }
  if (embedding_ && refined_concept_ && *refined_concept_ == concept_id) {
    return *embedding_;
  }
  const auto& l = weights_->layout;
  const auto* row = weights_->f64.data() + l.class_table + static_cast<std::size_t>(concept_id) * l.cond_dim;
  return std::vector<double>(row, row + l.cond_dim);
}

ConditioningGradient ToyDenoiser::conditioning_gradient(const Batch& noisy, std::span<const int> timesteps,
                                                        const Batch& target_eps, const ConditioningSpec& spec,
                                                        bool want_embedding, bool want_adapter) const {
  check_conditioning(*this, spec);
  const Refinement handle{refined_concept_, &embedding_, &adapter_};
  auto run = [&]<class T>(T) {
    auto rc = resolve<T>(*weights_, spec.concept_id, spec, handle);
    if (want_adapter && rc.adapter.empty()) {
      throw InvalidArgument("adapter gradient requested without an adapter");
    }
    std::vector<const detail::ResolvedCond<T>*> conds(noisy.rows(), &rc);
    std::vector<T> gemb(embedding_dim(), T(0));
    std::vector<detail::AdapterFactorT<T>> gad = rc.adapter;
    for (auto& f : gad) {
      std::fill(f.down.begin(), f.down.end(), T(0));
      std::fill(f.up.begin(), f.up.end(), T(0));
    }
    detail::Gradients<T> g;
    if (want_embedding) g.concept_row = gemb.data();
    if (want_adapter) g.adapter = &gad;
    ConditioningGradient out;
    out.loss = denoising_gradient<T>(*weights_, weights_->data<T>(), noisy, timesteps, conds, target_eps, g);
    if (want_embedding) out.embedding.assign(gemb.begin(), gemb.end());
    if (want_adapter) {
      const LowRankAdapter& src = spec.adapter ? *spec.adapter : *adapter_;
      out.adapter = src;
      for (std::size_t i = 0; i < gad.size(); ++i) {
        out.adapter.factors[i].down.assign(gad[i].down.begin(), gad[i].down.end());
        out.adapter.factors[i].up.assign(gad[i].up.begin(), gad[i].up.end());
      }
    }
    return out;
  };
  if (precision_ == Precision::f32) {
    return run(float{});
  }
  return run(double{});
}

double ToyDenoiser::parameter_gradient(const Batch& noisy, std::span<const int> timesteps,
                                       std::span<const int> concepts, const Batch& target_eps,
                                       std::vector<float>& grad) const {
  if (concepts.size() != noisy.rows()) {
    throw InvalidArgument("parameter_gradient: one concept per row required");
  }
  grad.resize(weights_->layout.total, 0.0f);
  const std::optional<std::vector<double>> no_emb;
  const std::optional<LowRankAdapter> no_adapter;
  const Refinement none{std::nullopt, &no_emb, &no_adapter};
  const ConditioningSpec plain;
  std::vector<detail::ResolvedCond<float>> resolved;
  resolved.reserve(concepts.size());
  for (int c : concepts) {
    resolved.push_back(resolve<float>(*weights_, c, plain, none));
  }
  std::vector<const detail::ResolvedCond<float>*> conds;
  for (const auto& rc : resolved) conds.push_back(&rc);
  detail::Gradients<float> g;
  g.params = grad.data();
  return denoising_gradient<float>(*weights_, weights_->f32.data(), noisy, timesteps, conds, target_eps, g);
}

namespace {

json config_to_json(const ToyDenoiserConfig& c) {
  json beta;
  beta["kind"] = c.beta.kind == BetaSpec::Kind::linear ? "linear" : "explicit";
  beta["start"] = c.beta.start;
  beta["end"] = c.beta.end;
  beta["values"] = c.beta.values;
  return json{{"shape", {c.shape.channels, c.shape.height, c.shape.width}},
              {"num_concepts", c.num_concepts},
              {"time_features", c.time_features},
              {"cond_dim", c.cond_dim},
              {"enc1", c.enc1},
              {"enc2", c.enc2},
              {"bottleneck", c.bottleneck},
              {"train_steps", c.train_steps},
              {"beta", beta}};
}

ToyDenoiserConfig config_from_json(const json& j) {
  ToyDenoiserConfig c;
  const auto shape = j.at("shape").get<std::vector<int>>();
  if (shape.size() != 3) throw IoError("toy denoiser sidecar: bad shape");
  c.shape = {shape[0], shape[1], shape[2]};
  c.num_concepts = j.at("num_concepts").get<int>();
  c.time_features = j.at("time_features").get<int>();
  c.cond_dim = j.at("cond_dim").get<int>();
  c.enc1 = j.at("enc1").get<int>();
  c.enc2 = j.at("enc2").get<int>();
  c.bottleneck = j.at("bottleneck").get<int>();
  c.train_steps = j.at("train_steps").get<int>();
  const auto& beta = j.at("beta");
  if (beta.at("kind").get<std::string>() == "linear") {
    c.beta = BetaSpec::linear(beta.at("start").get<double>(), beta.at("end").get<double>());
  } else {
    c.beta = BetaSpec::explicit_betas(beta.at("values").get<std::vector<double>>());
  }
  return c;
}

}  // namespace

void ToyDenoiser::save(const std::filesystem::path& path) const {
  Container c;
  c.tensors["params"] = TensorEntry::from(weights_->f32);
  json meta;
  meta["model"] = "toy-denoiser";
  meta["config"] = config_to_json(weights_->config);
  meta["taps"] = taps();
  meta["bottleneck_tap"] = bottleneck_tap();
  meta["train_steps"] = train_steps();
  meta["codec"] = "identity-clamp";
  c.meta_json = meta.dump();
  write_container(c, path);
}

std::shared_ptr<ToyDenoiser> ToyDenoiser::load(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const json meta = json::parse(c.meta_json);
  if (meta.value("model", "") != "toy-denoiser") {
    throw IoError(path.string() + " does not hold a toy denoiser");
  }
  return std::make_shared<ToyDenoiser>(config_from_json(meta.at("config")), c.at("params").as_f32());
}

ToyDenoiserConfig toy_config_for(const LabeledImages& data) {
  ToyDenoiserConfig c;
  c.shape = data.shape;
  c.num_concepts = static_cast<int>(data.class_names.size());
  return c;
}

namespace {

struct NoisyBatch {
  Batch noisy;
  Batch target;
  std::vector<int> timesteps;
  std::vector<int> concepts;
};

NoisyBatch make_noisy_batch(const LabeledImages& data, std::span<const int> rows, const std::vector<double>& bars,
                            double dropout, Rng& rng) {
  const std::size_t d = data.pixels.cols();
  NoisyBatch b{Batch(rows.size(), d), Batch(rows.size(), d), {}, {}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int t = static_cast<int>(rng.below(bars.size()));
    const double a = bars[static_cast<std::size_t>(t)];
    const double sa = std::sqrt(a);
    const double sn = std::sqrt(1.0 - a);
    auto x = data.pixels.row(static_cast<std::size_t>(rows[i]));
    auto z = b.noisy.row(i);
    auto e = b.target.row(i);
    for (std::size_t k = 0; k < d; ++k) {
      e[k] = rng.normal();
      z[k] = sa * x[k] + sn * e[k];
    }
    b.timesteps.push_back(t);
    const bool drop = rng.uniform() < dropout;
    b.concepts.push_back(drop ? kUnconditional : data.labels[static_cast<std::size_t>(rows[i])].class_id);
  }
  return b;
}

}  // namespace

double probe_denoising_loss(const ToyDenoiser& model, const LabeledImages& data, std::uint64_t seed, int probe_size) {
  Rng rng(derive_seed(seed, "probe"));
  const auto bars = training_alpha_bars(model.beta_spec(), model.train_steps());
  std::vector<int> rows;
  for (int i = 0; i < probe_size; ++i) {
    rows.push_back(static_cast<int>(rng.below(data.pixels.rows())));
  }
  auto b = make_noisy_batch(data, rows, bars, 0.0, rng);
  std::vector<float> grad;
  // Gradient is discarded; the loss is what matters here.
  return model.parameter_gradient(b.noisy, b.timesteps, b.concepts, b.target, grad);
}

std::shared_ptr<ToyDenoiser> train_toy_denoiser(const LabeledImages& data, const ToyDenoiserConfig& config,
                                                const ToyTrainingConfig& training, TrainingLog* log) {
  if (data.pixels.rows() == 0) {
    throw InvalidArgument("cannot train on an empty dataset");
  }
  if (data.pixels.cols() != config.shape.size()) {
    throw InvalidArgument("dataset image size does not match the model shape");
  }
  if (training.epochs < 0 || training.batch_size <= 0 || !(training.learning_rate > 0.0) ||
      !(training.skip_dropout >= 0.0 && training.skip_dropout < 1.0)) {
    throw InvalidArgument("invalid training configuration");
  }
  const auto start = std::chrono::steady_clock::now();
  auto model = ToyDenoiser::initialize(config, derive_seed(training.seed, "init"));
  const double initial = probe_denoising_loss(*model, data, training.seed);

  std::vector<float> params(model->parameters().begin(), model->parameters().end());
  const auto layout = detail::ToyLayout::build(config);
  auto weights = make_weights(config, params);
  std::vector<float> m(params.size(), 0.0f), v(params.size(), 0.0f), grad(params.size());
  const auto bars = training_alpha_bars(config.beta, config.train_steps);
  Rng rng(derive_seed(training.seed, "train"));
  std::vector<int> order(data.pixels.rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, clip = 1.0;
  long long t = 0;
  const ConditioningSpec plain;
  const std::optional<std::vector<double>> no_emb;
  const std::optional<LowRankAdapter> no_adapter;
  const Refinement empty{std::nullopt, &no_emb, &no_adapter};
  const std::size_t table_begin = layout.class_table;
  const std::size_t table_end = table_begin + static_cast<std::size_t>(layout.class_rows) * layout.cond_dim;

  for (int epoch = 0; epoch < training.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(training.batch_size)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(training.batch_size));
      auto b = make_noisy_batch(data, std::span<const int>(order.data() + s, e - s), bars, training.class_dropout,
                                rng);
      std::vector<detail::ResolvedCond<float>> resolved;
      for (int c : b.concepts) resolved.push_back(resolve<float>(*weights, c, plain, empty));
      std::vector<const detail::ResolvedCond<float>*> conds;
      for (const auto& rc : resolved) conds.push_back(&rc);
      std::fill(grad.begin(), grad.end(), 0.0f);
      detail::Gradients<float> g;
      g.params = grad.data();
      std::vector<std::uint8_t> drop(b.timesteps.size(), 0);
      if (training.skip_dropout > 0.0) {
        for (auto& d : drop) d = rng.uniform() < training.skip_dropout;
      }
      const double loss =
          denoising_gradient<float>(*weights, params.data(), b.noisy, b.timesteps, conds, b.target, g, drop);
      if (!std::isfinite(loss)) {
        throw TrainingFailure("toy denoiser training diverged at epoch " + std::to_string(epoch));
      }
      double norm = 0.0;
      for (float x : grad) norm += static_cast<double>(x) * x;
      norm = std::sqrt(norm);
      const double factor = norm > clip ? clip / norm : 1.0;
      ++t;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
      for (std::size_t k = 0; k < params.size(); ++k) {
        const double gk = grad[k] * factor;
        m[k] = static_cast<float>(beta1 * m[k] + (1.0 - beta1) * gk);
        v[k] = static_cast<float>(beta2 * v[k] + (1.0 - beta2) * gk * gk);
        const double step = training.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + adam_eps);
        params[k] = static_cast<float>(params[k] - step);
      }
      // resolve() reads concept rows from the f64 mirror
      std::copy(params.begin() + static_cast<std::ptrdiff_t>(table_begin),
                params.begin() + static_cast<std::ptrdiff_t>(table_end),
                weights->f64.begin() + static_cast<std::ptrdiff_t>(table_begin));
      epoch_loss += loss;
      ++batches;
    }
    if (log) log->epoch_loss.push_back(batches ? epoch_loss / batches : 0.0);
  }
  auto trained = std::make_shared<ToyDenoiser>(config, std::move(params));
  const double final_loss = probe_denoising_loss(*trained, data, training.seed);
  if (!std::isfinite(final_loss)) {
    throw TrainingFailure("toy denoiser produced a non-finite loss");
  }
  if (log) {
    log->initial_loss = initial;
    log->final_loss = final_loss;
    log->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return trained;
}

}  // namespace dmavg
