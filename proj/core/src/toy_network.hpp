// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dmavg/errors.hpp"
#include "dmavg/toy_denoiser.hpp"
#include "kernels.hpp"

namespace dmavg {

namespace detail {

inline constexpr std::size_t kNoBias = static_cast<std::size_t>(-1);
inline constexpr int kNumBlocks = 5;  // enc1, enc2, bottleneck, dec2, dec1
inline constexpr int kOutputLayer = 5;

struct DenseSlot {
  std::size_t w = 0;
  std::size_t b = kNoBias;
  int in = 0;
  int out = 0;
};

struct ToyLayout {
  DenseSlot time_in, enc1, enc2, bott, dec2, skip2, dec1, skip1, out;
  std::array<DenseSlot, kNumBlocks> proj;
  std::size_t class_table = 0;
  int class_rows = 0;
  int cond_dim = 0;
  int time_features = 0;
  int train_steps = 0;
  // sqrt(alpha_bar) and sqrt(1 - alpha_bar) per training timestep.
  std::vector<double> signal;
  std::vector<double> noise;
  std::array<int, kNumBlocks> widths{};
  int dim = 0;
  std::size_t total = 0;

  static ToyLayout build(const ToyDenoiserConfig& config);
};

inline const std::array<const char*, kNumBlocks>& block_names() {
  static const std::array<const char*, kNumBlocks> names{"enc1", "enc2", "bottleneck", "dec2", "dec1"};
  return names;
}

inline const std::array<const char*, kNumBlocks>& projection_names() {
  static const std::array<const char*, kNumBlocks> names{"proj_enc1", "proj_enc2", "proj_bottleneck", "proj_dec2",
                                                         "proj_dec1"};
  return names;
}

void sinusoidal_features(int timestep, int count, double* out);

template <class T>
struct AdapterFactorT {
  int rank = 0;
  std::vector<T> down;  // cond_dim x rank
  std::vector<T> up;    // rank x width
};

// Conditioning resolved for one forward branch.
template <class T>
struct ResolvedCond {
  std::vector<T> concept_row;
  // Index into the class table when concept_row is a table row, else -1.
  int table_row = -1;
  std::vector<AdapterFactorT<T>> adapter;  // empty or kNumBlocks entries
};

template <class T>
struct CondCache {
  std::vector<T> feat, tpre, temb, cond;
  int timestep = 0;
  std::array<std::vector<T>, kNumBlocks> lora_hidden;
  std::array<std::vector<T>, kNumBlocks> projected;
};

template <class T>
struct BodyCache {
  std::array<std::vector<T>, kNumBlocks> pre;
  std::array<std::vector<T>, kNumBlocks> act;
  std::vector<T> eps;
  // Noise-level coefficients of the last full pass.
  T signal = 0;
  T noise = 1;
  // Training-time skip dropout clears this for a row.
  bool skips = true;
  int reached = -1;
};

template <class T>
struct Gradients {
  T* params = nullptr;       // same layout as the parameter vector
  T* latent = nullptr;       // dim
  T* concept_row = nullptr;  // cond_dim
  std::vector<AdapterFactorT<T>>* adapter = nullptr;
};

template <class T>
class ToyNet {
 public:
  ToyNet(const ToyLayout& layout, const T* params) : l_(layout), p_(params) {}

  void conditioning(int timestep, const ResolvedCond<T>& rc, CondCache<T>& c) const {
    if (timestep < 0 || timestep >= l_.train_steps) {
      throw InvalidArgument("timestep " + std::to_string(timestep) + " out of range [0, " +
                            std::to_string(l_.train_steps) + ")");
    }
    const int F = l_.time_features;
    const int C = l_.cond_dim;
    std::vector<double> f(static_cast<std::size_t>(F));
    sinusoidal_features(timestep, F, f.data());
    c.feat.assign(f.begin(), f.end());
    c.timestep = timestep;
    c.tpre.assign(p_ + l_.time_in.b, p_ + l_.time_in.b + C);
    kernels::gemv_acc(p_ + l_.time_in.w, F, C, c.feat.data(), c.tpre.data());
    c.temb.resize(static_cast<std::size_t>(C));
    kernels::silu(c.tpre.data(), C, c.temb.data());
    c.cond.resize(static_cast<std::size_t>(C));
    for (int i = 0; i < C; ++i) {
      c.cond[i] = c.temb[i] + rc.concept_row[static_cast<std::size_t>(i)];
    }
    for (int b = 0; b < kNumBlocks; ++b) {
      const auto& slot = l_.proj[b];
      auto& y = c.projected[b];
      y.assign(static_cast<std::size_t>(slot.out), T(0));
      kernels::gemv_acc(p_ + slot.w, C, slot.out, c.cond.data(), y.data());
      if (!rc.adapter.empty()) {
        const auto& f = rc.adapter[static_cast<std::size_t>(b)];
        auto& h = c.lora_hidden[b];
        h.assign(static_cast<std::size_t>(f.rank), T(0));
        kernels::gemv_acc(f.down.data(), C, f.rank, c.cond.data(), h.data());
        std::vector<T> delta(static_cast<std::size_t>(slot.out), T(0));
        kernels::gemv_acc(f.up.data(), f.rank, slot.out, h.data(), delta.data());
        for (int j = 0; j < slot.out; ++j) {
          y[j] += delta[j];
        }
      }
    }
  }

  // Runs blocks up to and including `stop` (kOutputLayer for the full pass).
  // When substitute is set, block `substitute_block` outputs that vector.
  void body(const T* z, const CondCache<T>& cc, BodyCache<T>& c, int stop, int substitute_block = -1,
            const T* substitute = nullptr) const {
    c.reached = -1;
    auto block = [&](int b, const DenseSlot& main, const T* main_in, const DenseSlot* skip, const T* skip_in) {
      const int n = main.out;
      auto& pre = c.pre[b];
      pre.assign(p_ + main.b, p_ + main.b + n);
      kernels::gemv_acc(p_ + main.w, main.in, n, main_in, pre.data());
      if (skip && c.skips) {
        kernels::gemv_acc(p_ + skip->w, skip->in, n, skip_in, pre.data());
      }
      const auto& pc = cc.projected[b];
      for (int j = 0; j < n; ++j) {
        pre[j] += pc[j];
      }
      auto& act = c.act[b];
      act.resize(static_cast<std::size_t>(n));
      if (b == substitute_block && substitute) {
        std::copy(substitute, substitute + n, act.begin());
      } else {
        kernels::silu(pre.data(), n, act.data());
      }
      c.reached = b;
    };
    block(0, l_.enc1, z, nullptr, nullptr);
    if (stop == 0) return;
    block(1, l_.enc2, c.act[0].data(), nullptr, nullptr);
    if (stop == 1) return;
    block(2, l_.bott, c.act[1].data(), nullptr, nullptr);
    if (stop == 2) return;
    block(3, l_.dec2, c.act[2].data(), &l_.skip2, c.act[1].data());
    if (stop == 3) return;
    block(4, l_.dec1, c.act[3].data(), &l_.skip1, c.act[0].data());
    if (stop == 4) return;
    c.eps.assign(p_ + l_.out.b, p_ + l_.out.b + l_.out.out);
    kernels::gemv_acc(p_ + l_.out.w, l_.out.in, l_.out.out, c.act[4].data(), c.eps.data());
    // The output layer predicts the clean latent; convert it to noise.
    c.signal = static_cast<T>(l_.signal[static_cast<std::size_t>(cc.timestep)]);
    c.noise = static_cast<T>(l_.noise[static_cast<std::size_t>(cc.timestep)]);
    for (int j = 0; j < l_.dim; ++j) {
      c.eps[j] = (z[j] - c.signal * c.eps[j]) / c.noise;
    }
    c.reached = kOutputLayer;
  }

  // Backpropagates d_eps (may be null) and a cotangent on block `tap_block`
  // (may be null). Returns per-block gradients on the projected
  // conditioning terms (empty for blocks not reached).
  std::array<std::vector<T>, kNumBlocks> body_backward(const T* z, const BodyCache<T>& c, const T* d_eps,
                                                       int tap_block, const T* d_tap, Gradients<T>& g) const {
    std::array<std::vector<T>, kNumBlocks> grad_act;
    std::array<std::vector<T>, kNumBlocks> grad_proj;
    for (int b = 0; b < kNumBlocks; ++b) {
      grad_act[b].assign(static_cast<std::size_t>(l_.widths[b]), T(0));
    }
    int top = -1;
    if (d_tap) {
      for (int j = 0; j < l_.widths[tap_block]; ++j) {
        grad_act[tap_block][j] += d_tap[j];
      }
      top = tap_block;
    }
    if (d_eps) {
      const auto& s = l_.out;
      std::vector<T> d_out(static_cast<std::size_t>(s.out));
      for (int j = 0; j < s.out; ++j) d_out[j] = -c.signal / c.noise * d_eps[j];
      if (g.params) {
        kernels::outer_acc(c.act[4].data(), s.in, s.out, d_out.data(), g.params + s.w);
        for (int j = 0; j < s.out; ++j) g.params[s.b + j] += d_out[j];
      }
      kernels::gemv_t_acc(p_ + s.w, s.in, s.out, d_out.data(), grad_act[4].data());
      if (g.latent) {
        for (int j = 0; j < l_.dim; ++j) g.latent[j] += d_eps[j] / c.noise;
      }
      top = kOutputLayer;
    }
    auto dense_back = [&](const DenseSlot& s, const T* in, const T* gpre, T* gin) {
      if (g.params) {
        kernels::outer_acc(in, s.in, s.out, gpre, g.params + s.w);
        if (s.b != kNoBias) {
          for (int j = 0; j < s.out; ++j) g.params[s.b + j] += gpre[j];
        }
      }
      if (gin) {
        kernels::gemv_t_acc(p_ + s.w, s.in, s.out, gpre, gin);
      }
    };
    for (int b = std::min(top, kNumBlocks - 1); b >= 0; --b) {
      const int n = l_.widths[b];
      auto& gpre = grad_proj[b];
      gpre.resize(static_cast<std::size_t>(n));
      kernels::silu_backward(c.pre[b].data(), grad_act[b].data(), n, gpre.data());
      switch (b) {
        case 4:
          dense_back(l_.dec1, c.act[3].data(), gpre.data(), grad_act[3].data());
          if (c.skips) dense_back(l_.skip1, c.act[0].data(), gpre.data(), grad_act[0].data());
          break;
        case 3:
          dense_back(l_.dec2, c.act[2].data(), gpre.data(), grad_act[2].data());
          if (c.skips) dense_back(l_.skip2, c.act[1].data(), gpre.data(), grad_act[1].data());
          break;
        case 2:
          dense_back(l_.bott, c.act[1].data(), gpre.data(), grad_act[1].data());
          break;
        case 1:
          dense_back(l_.enc2, c.act[0].data(), gpre.data(), grad_act[0].data());
          break;
        case 0:
          if (g.params) {
            kernels::outer_acc(z, l_.enc1.in, n, gpre.data(), g.params + l_.enc1.w);
            for (int j = 0; j < n; ++j) g.params[l_.enc1.b + j] += gpre[j];
          }
          if (g.latent) {
            kernels::gemv_t_acc(p_ + l_.enc1.w, l_.enc1.in, n, gpre.data(), g.latent);
          }
          break;
      }
    }
    return grad_proj;
  }

  void conditioning_backward(const CondCache<T>& cc, const ResolvedCond<T>& rc,
                             const std::array<std::vector<T>, kNumBlocks>& grad_proj, Gradients<T>& g) const {
    const int C = l_.cond_dim;
    std::vector<T> gcond(static_cast<std::size_t>(C), T(0));
    bool any = false;
    for (int b = 0; b < kNumBlocks; ++b) {
      const auto& gp = grad_proj[b];
      if (gp.empty()) continue;
      any = true;
      const auto& s = l_.proj[b];
      if (g.params) {
        kernels::outer_acc(cc.cond.data(), C, s.out, gp.data(), g.params + s.w);
      }
      kernels::gemv_t_acc(p_ + s.w, C, s.out, gp.data(), gcond.data());
      if (!rc.adapter.empty()) {
        const auto& f = rc.adapter[static_cast<std::size_t>(b)];
        std::vector<T> gh(static_cast<std::size_t>(f.rank), T(0));
        kernels::gemv_t_acc(f.up.data(), f.rank, s.out, gp.data(), gh.data());
        if (g.adapter) {
          auto& ga = (*g.adapter)[static_cast<std::size_t>(b)];
          kernels::outer_acc(cc.lora_hidden[b].data(), f.rank, s.out, gp.data(), ga.up.data());
          kernels::outer_acc(cc.cond.data(), C, f.rank, gh.data(), ga.down.data());
        }
        kernels::gemv_t_acc(f.down.data(), C, f.rank, gh.data(), gcond.data());
      }
    }
    if (!any) return;
    if (g.concept_row) {
      for (int i = 0; i < C; ++i) g.concept_row[i] += gcond[i];
    }
    if (g.params) {
      if (rc.table_row >= 0) {
        T* row = g.params + l_.class_table + static_cast<std::size_t>(rc.table_row) * static_cast<std::size_t>(C);
        for (int i = 0; i < C; ++i) row[i] += gcond[i];
      }
      std::vector<T> gtpre(static_cast<std::size_t>(C));
      kernels::silu_backward(cc.tpre.data(), gcond.data(), C, gtpre.data());
      kernels::outer_acc(cc.feat.data(), l_.time_features, C, gtpre.data(), g.params + l_.time_in.w);
      for (int i = 0; i < C; ++i) g.params[l_.time_in.b + i] += gtpre[i];
    }
  }

 private:
  const ToyLayout& l_;
  const T* p_;
};

}  // namespace detail

struct ToyWeights {
  ToyDenoiserConfig config;
  detail::ToyLayout layout;
  std::vector<float> f32;
  std::vector<double> f64;

  template <class T>
  const T* data() const {
    if constexpr (std::is_same_v<T, float>) {
      return f32.data();
    } else {
      return f64.data();
    }
  }
};

}  // namespace dmavg
