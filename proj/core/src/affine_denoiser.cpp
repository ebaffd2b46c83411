// SPDX-License-Identifier: Apache-2.0
#include "dmavg/affine_denoiser.hpp"

#include <cmath>

#include "dmavg/errors.hpp"
#include "dmavg/random.hpp"

namespace dmavg {
namespace {

class LinearTape final : public ActivationTape {
 public:
  LinearTape(std::vector<double> activation, const std::vector<double>& matrix, std::size_t rows, std::size_t cols)
      : activation_(std::move(activation)), matrix_(matrix), rows_(rows), cols_(cols) {}

  std::span<const double> activation() const override { return activation_; }

  void pullback(std::span<const double> cotangent, std::span<double> grad) const override {
    if (cotangent.size() != rows_ || grad.size() != cols_) {
      throw InvalidArgument("pullback: shape mismatch");
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t c = 0; c < cols_; ++c) {
        grad[c] += matrix_[r * cols_ + c] * cotangent[r];
      }
    }
  }

 private:
  std::vector<double> activation_;
  const std::vector<double>& matrix_;
  std::size_t rows_;
  std::size_t cols_;
};

void matvec(const std::vector<double>& m, std::size_t rows, std::size_t cols, std::span<const double> x,
            std::span<double> y) {
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      s += m[r * cols + c] * x[c];
    }
    y[r] = s;
  }
}

}  // namespace

AffineDenoiser::AffineDenoiser(Params params) : params_(std::move(params)) {
  const std::size_t d = params_.shape.size();
  if (params_.matrix.size() != d * d || params_.bias.size() != d || params_.offsets.empty() ||
      params_.projection.size() != params_.bottleneck * d) {
    throw InvalidArgument("affine denoiser parameters have inconsistent sizes");
  }
  for (const auto& o : params_.offsets) {
    if (o.size() != d) {
      throw InvalidArgument("affine denoiser offset has wrong size");
    }
  }
}

std::shared_ptr<AffineDenoiser> AffineDenoiser::random(LatentShape shape, int num_concepts, std::size_t bottleneck,
                                                       std::uint64_t seed) {
  Rng rng(seed);
  Params p;
  p.shape = shape;
  p.bottleneck = bottleneck;
  const std::size_t d = shape.size();
  const double scale = 0.3 / std::sqrt(static_cast<double>(d));
  p.matrix.resize(d * d);
  for (auto& v : p.matrix) {
    v = scale * rng.normal();
  }
  p.bias.resize(d);
  for (auto& v : p.bias) {
    v = 0.1 * rng.normal();
  }
  p.offsets.assign(static_cast<std::size_t>(num_concepts) + 1, std::vector<double>(d));
  for (auto& o : p.offsets) {
    for (auto& v : o) {
      v = 0.1 * rng.normal();
    }
  }
  p.projection.resize(bottleneck * d);
  for (auto& v : p.projection) {
    v = rng.normal() / std::sqrt(static_cast<double>(d));
  }
  return std::make_shared<AffineDenoiser>(std::move(p));
}

std::size_t AffineDenoiser::tap_size(std::string_view tap) const {
  check_tap(*this, tap);
  return tap == "bottleneck" ? params_.bottleneck : params_.shape.size();
}

Batch AffineDenoiser::forward(const Batch& z, int /*timestep*/, int concept_id, const ConditioningSpec& /*spec*/,
                              const TapRequest* tap) const {
  const std::size_t d = params_.shape.size();
  if (z.cols() != d) {
    throw InvalidArgument("affine denoiser: latent size mismatch");
  }
  if (concept_id != kUnconditional && (concept_id < 0 || concept_id >= num_concepts())) {
    throw InvalidArgument("affine denoiser: unknown concept " + std::to_string(concept_id));
  }
  const auto& offset = concept_id == kUnconditional ? params_.offsets.back()
                                                 : params_.offsets[static_cast<std::size_t>(concept_id)];
  Batch eps(z.rows(), d);
  Batch captured;
  if (tap && tap->capture) {
    check_tap(*this, tap->tap);
    captured = Batch(z.rows(), tap_size(tap->tap));
  }
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto out = eps.row(r);
    matvec(params_.matrix, d, d, z.row(r), out);
    for (std::size_t i = 0; i < d; ++i) {
      out[i] += params_.bias[i] + offset[i];
    }
    if (tap && tap->capture) {
      if (tap->tap == "bottleneck") {
        matvec(params_.projection, params_.bottleneck, d, z.row(r), captured.row(r));
      } else {
        std::copy(out.begin(), out.end(), captured.row(r).begin());
      }
    }
  }
  if (tap && tap->capture) {
    *tap->capture = std::move(captured);
  }
  return eps;
}

std::unique_ptr<ActivationTape> AffineDenoiser::record(std::span<const double> z, int timestep, int concept_id,
                                                       const ConditioningSpec& spec, std::string_view tap) const {
  check_tap(*this, tap);
  const std::size_t d = params_.shape.size();
  if (tap == "bottleneck") {
    std::vector<double> act(params_.bottleneck);
    matvec(params_.projection, params_.bottleneck, d, z, act);
    return std::make_unique<LinearTape>(std::move(act), params_.projection, params_.bottleneck, d);
  }
  Batch eps = forward(Batch::from_row(z), timestep, concept_id, spec);
  return std::make_unique<LinearTape>(eps.data(), params_.matrix, d, d);
}

std::shared_ptr<const Denoiser> AffineDenoiser::with_conditioning(const ConditioningSpec& spec) const {
  check_conditioning(*this, spec);
  return std::make_shared<AffineDenoiser>(params_);
}

}  // namespace dmavg
