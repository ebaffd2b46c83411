// SPDX-License-Identifier: Apache-2.0
#include "dmavg/toy_embedder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "dmavg/container.hpp"
#include "dmavg/errors.hpp"
#include "dmavg/hashing.hpp"
#include "dmavg/random.hpp"
#include "kernels.hpp"

namespace dmavg {

using json = nlohmann::json;

namespace {

constexpr double kLogitScale = 8.0;

struct Dense {
  std::size_t w = 0;
  std::size_t b = 0;
  int in = 0;
  int out = 0;
};

void normalize(std::vector<double>& v, double& norm) {
  double s = 0.0;
  for (double x : v) s += x * x;
  norm = std::sqrt(std::max(s, 1e-24));
  for (double& x : v) x /= norm;
}

// Gradient through v = e / ||e||.
void normalize_backward(const std::vector<double>& unit, double norm, const std::vector<double>& dunit,
                        std::vector<double>& de) {
  double dot = 0.0;
  for (std::size_t i = 0; i < unit.size(); ++i) dot += unit[i] * dunit[i];
  de.assign(unit.size(), 0.0);
  for (std::size_t i = 0; i < unit.size(); ++i) de[i] = (dunit[i] - unit[i] * dot) / norm;
}

void softmax_xent_grad(const std::vector<double>& logits, int target, std::vector<double>& grad, double& loss) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    grad[i] = std::exp(logits[i] - m);
    z += grad[i];
  }
  for (double& g : grad) g /= z;
  loss += -std::log(std::max(grad[static_cast<std::size_t>(target)], 1e-300));
  grad[static_cast<std::size_t>(target)] -= 1.0;
}

void apply(const std::vector<double>& p, const Dense& d, std::span<const double> x, std::vector<double>& y) {
  y.assign(p.begin() + static_cast<std::ptrdiff_t>(d.b), p.begin() + static_cast<std::ptrdiff_t>(d.b + d.out));
  kernels::gemv_acc(p.data() + d.w, d.in, d.out, x.data(), y.data());
}

void apply_backward(const std::vector<double>& p, const Dense& d, std::span<const double> x,
                    const std::vector<double>& dy, std::vector<double>& grad, std::vector<double>* dx) {
  kernels::outer_acc(x.data(), d.in, d.out, dy.data(), grad.data() + d.w);
  for (int j = 0; j < d.out; ++j) grad[d.b + static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(j)];
  if (dx) {
    dx->assign(static_cast<std::size_t>(d.in), 0.0);
    kernels::gemv_t_acc(p.data() + d.w, d.in, d.out, dy.data(), dx->data());
  }
}

}  // namespace

struct ToyEmbedder::Layout {
  Dense hidden;
  Dense embed;
  Dense modes;
  Dense regress;
  std::vector<Dense> attr_embed;
  std::vector<Dense> attr_classify;
  std::size_t total = 0;
};

ToyEmbedder::Layout ToyEmbedder::layout() const {
  Layout l;
  std::size_t offset = 0;
  auto dense = [&](int in, int out) {
    Dense d{offset, offset + static_cast<std::size_t>(in) * static_cast<std::size_t>(out), in, out};
    offset = d.b + static_cast<std::size_t>(out);
    return d;
  };
  const int input = static_cast<int>(shape_.size());
  l.hidden = dense(input, config_.hidden);
  l.embed = dense(config_.hidden, config_.embedding_dim);
  l.modes = dense(config_.embedding_dim, static_cast<int>(mode_class_.size()));
  l.regress = dense(config_.embedding_dim, static_cast<int>(continuous_attributes().size()));
  for (const auto& values : attribute_values_) {
    l.attr_embed.push_back(dense(config_.hidden, config_.attribute_dim));
    l.attr_classify.push_back(dense(config_.attribute_dim, static_cast<int>(values.size())));
  }
  l.total = offset;
  return l;
}

void ToyEmbedder::forward_row(std::span<const double> x, std::vector<double>& hidden, std::vector<double>& embedding,
                              std::vector<double>& logits) const {
  const Layout l = layout();
  std::vector<double> pre;
  apply(params_, l.hidden, x, pre);
  hidden.resize(pre.size());
  kernels::silu(pre.data(), static_cast<int>(pre.size()), hidden.data());
  apply(params_, l.embed, hidden, embedding);
  double norm = 0.0;
  normalize(embedding, norm);
  apply(params_, l.modes, embedding, logits);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    logits[i] = kLogitScale * logits[i];
  }
}

std::string ToyEmbedder::id() const {
  ContentHasher h;
  h.update(std::string_view("toy-embedder"));
  h.update(std::span<const double>(params_));
  return "toy-embedder-" + h.hex();
}

Batch ToyEmbedder::embed(const Batch& images, const std::optional<std::string>& attribute) const {
  if (params_.empty()) throw InvalidArgument("embedder is not trained");
  if (images.cols() != shape_.size()) throw InvalidArgument("image size does not match embedder input");
  std::optional<std::size_t> head;
  if (attribute) {
    const auto it = std::find(attribute_names_.begin(), attribute_names_.end(), *attribute);
    if (it == attribute_names_.end()) throw InvalidArgument("unknown attribute '" + *attribute + "'");
    head = static_cast<std::size_t>(it - attribute_names_.begin());
  }
  const Layout l = layout();
  Batch out(images.rows(), static_cast<std::size_t>(head ? config_.attribute_dim : config_.embedding_dim));
  std::vector<double> hidden;
  std::vector<double> embedding;
  std::vector<double> logits;
  for (std::size_t i = 0; i < images.rows(); ++i) {
    forward_row(images.row(i), hidden, embedding, logits);
    if (head) {
      apply(params_, l.attr_embed[*head], hidden, embedding);
      double norm = 0.0;
      normalize(embedding, norm);
    }
    std::copy(embedding.begin(), embedding.end(), out.row(i).begin());
  }
  return out;
}

std::vector<int> ToyEmbedder::classify_modes(const Batch& images) const {
  if (params_.empty()) throw InvalidArgument("embedder is not trained");
  if (images.cols() != shape_.size()) throw InvalidArgument("image size does not match embedder input");
  std::vector<int> out;
  std::vector<double> hidden;
  std::vector<double> embedding;
  std::vector<double> logits;
  for (std::size_t i = 0; i < images.rows(); ++i) {
    forward_row(images.row(i), hidden, embedding, logits);
    out.push_back(static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin()));
  }
  return out;
}

std::vector<int> ToyEmbedder::classify_classes(const Batch& images) const {
  auto modes = classify_modes(images);
  for (int& m : modes) m = class_of_mode(m);
  return modes;
}

void ToyEmbedder::save(const std::filesystem::path& path) const {
  Container c;
  c.tensors["params"] = TensorEntry::from(params_);
  json meta;
  meta["model"] = "toy-embedder";
  meta["config"] = {{"hidden", config_.hidden},
                    {"embedding_dim", config_.embedding_dim},
                    {"attribute_dim", config_.attribute_dim},
                    {"epochs", config_.epochs},
                    {"batch_size", config_.batch_size},
                    {"learning_rate", config_.learning_rate},
                    {"seed", config_.seed}};
  meta["shape"] = {shape_.channels, shape_.height, shape_.width};
  meta["mode_class"] = mode_class_;
  meta["attribute_names"] = attribute_names_;
  meta["attribute_values"] = attribute_values_;
  c.meta_json = meta.dump();
  write_container(c, path);
}

ToyEmbedder ToyEmbedder::load(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const json meta = json::parse(c.meta_json);
  if (meta.value("model", "") != "toy-embedder") {
    throw IoError(path.string() + " is not a toy embedder");
  }
  ToyEmbedder e;
  const auto& cfg = meta.at("config");
  e.config_.hidden = cfg.at("hidden").get<int>();
  e.config_.embedding_dim = cfg.at("embedding_dim").get<int>();
  e.config_.attribute_dim = cfg.at("attribute_dim").get<int>();
  e.config_.epochs = cfg.at("epochs").get<int>();
  e.config_.batch_size = cfg.at("batch_size").get<int>();
  e.config_.learning_rate = cfg.at("learning_rate").get<double>();
  e.config_.seed = cfg.at("seed").get<std::uint64_t>();
  const auto s = meta.at("shape").get<std::vector<int>>();
  e.shape_ = {s.at(0), s.at(1), s.at(2)};
  e.mode_class_ = meta.at("mode_class").get<std::vector<int>>();
  e.attribute_names_ = meta.at("attribute_names").get<std::vector<std::string>>();
  e.attribute_values_ = meta.at("attribute_values").get<std::vector<std::vector<std::string>>>();
  e.params_ = c.at("params").as_f64();
  if (e.params_.size() != e.layout().total) throw IoError(path.string() + ": parameter count mismatch");
  return e;
}

ToyEmbedder train_toy_embedder(const LabeledImages& data, const ToyEmbedderConfig& config) {
  if (data.labels.empty()) throw InvalidArgument("cannot train an embedder on an empty dataset");
  if (config.hidden <= 0 || config.embedding_dim <= 0 || config.attribute_dim <= 0 || config.epochs < 0 ||
      config.batch_size <= 0 || !(config.learning_rate > 0.0)) {
    throw InvalidArgument("invalid embedder config");
  }
  ToyEmbedder e;
  e.config_ = config;
  e.shape_ = data.shape;
  e.mode_class_.assign(static_cast<std::size_t>(data.total_modes), -1);
  for (const auto& l : data.labels) e.mode_class_.at(static_cast<std::size_t>(l.global_mode)) = l.class_id;
  for (int& c : e.mode_class_) {
    if (c < 0) c = 0;
  }
  e.attribute_names_ = categorical_attributes();
  for (const auto& name : e.attribute_names_) {
    std::vector<std::string> values;
    for (const auto& l : data.labels) {
      const auto& v = l.categorical.at(name);
      if (std::find(values.begin(), values.end(), v) == values.end()) values.push_back(v);
    }
    std::sort(values.begin(), values.end());
    e.attribute_values_.push_back(std::move(values));
  }

  const auto l = e.layout();
  Rng rng(derive_seed(config.seed, "embedder-init"));
  e.params_.assign(l.total, 0.0);
  auto init = [&](const Dense& d) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(d.in));
    for (std::size_t i = d.w; i < d.b; ++i) e.params_[i] = scale * rng.normal();
  };
  init(l.hidden);
  init(l.embed);
  init(l.modes);
  init(l.regress);
  for (const auto& d : l.attr_embed) init(d);
  for (const auto& d : l.attr_classify) init(d);

  const auto& cont = continuous_attributes();
  std::vector<double> cmean(cont.size(), 0.0);
  std::vector<double> cstd(cont.size(), 0.0);
  for (std::size_t k = 0; k < cont.size(); ++k) {
    for (const auto& lab : data.labels) cmean[k] += lab.continuous.at(cont[k]);
    cmean[k] /= static_cast<double>(data.labels.size());
    for (const auto& lab : data.labels) cstd[k] += std::pow(lab.continuous.at(cont[k]) - cmean[k], 2);
    cstd[k] = std::sqrt(cstd[k] / static_cast<double>(data.labels.size())) + 1e-6;
  }
  std::vector<std::vector<int>> attr_target(e.attribute_names_.size());
  for (std::size_t a = 0; a < e.attribute_names_.size(); ++a) {
    const auto& values = e.attribute_values_[a];
    for (const auto& lab : data.labels) {
      const auto& v = lab.categorical.at(e.attribute_names_[a]);
      attr_target[a].push_back(static_cast<int>(std::find(values.begin(), values.end(), v) - values.begin()));
    }
  }

  std::vector<double> grad(l.total);
  std::vector<double> m1(l.total, 0.0);
  std::vector<double> m2(l.total, 0.0);
  std::vector<int> order(data.labels.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(derive_seed(config.seed, "embedder-shuffle"));
  long long t = 0;
  std::vector<double> pre, hidden, emb, logits, g, dh, de, du, dtmp, apre, aunit;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.below(i))]);
    }
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const auto idx = static_cast<std::size_t>(order[b]);
        const auto& lab = data.labels[idx];
        const auto x = data.pixels.row(idx);
        apply(e.params_, l.hidden, x, pre);
        hidden.resize(pre.size());
        kernels::silu(pre.data(), static_cast<int>(pre.size()), hidden.data());
        apply(e.params_, l.embed, hidden, emb);
        double norm = 0.0;
        normalize(emb, norm);

        dh.assign(hidden.size(), 0.0);
        du.assign(emb.size(), 0.0);
        apply(e.params_, l.modes, emb, logits);
        for (double& v : logits) v *= kLogitScale;
        softmax_xent_grad(logits, lab.global_mode, g, loss);
        for (double& v : g) v *= kLogitScale;
        apply_backward(e.params_, l.modes, emb, g, grad, &dtmp);
        for (std::size_t k = 0; k < du.size(); ++k) du[k] += dtmp[k];

        apply(e.params_, l.regress, emb, logits);
        g.resize(logits.size());
        for (std::size_t k = 0; k < cont.size(); ++k) {
          const double target = (lab.continuous.at(cont[k]) - cmean[k]) / cstd[k];
          const double diff = logits[k] - target;
          loss += diff * diff;
          g[k] = 2.0 * diff;
        }
        apply_backward(e.params_, l.regress, emb, g, grad, &dtmp);
        for (std::size_t k = 0; k < du.size(); ++k) du[k] += dtmp[k];

        normalize_backward(emb, norm, du, de);
        apply_backward(e.params_, l.embed, hidden, de, grad, &dtmp);
        for (std::size_t k = 0; k < dh.size(); ++k) dh[k] += dtmp[k];

        for (std::size_t a = 0; a < l.attr_embed.size(); ++a) {
          apply(e.params_, l.attr_embed[a], hidden, aunit);
          double anorm = 0.0;
          normalize(aunit, anorm);
          apply(e.params_, l.attr_classify[a], aunit, logits);
          for (double& v : logits) v *= kLogitScale;
          softmax_xent_grad(logits, attr_target[a][idx], g, loss);
          for (double& v : g) v *= kLogitScale;
          apply_backward(e.params_, l.attr_classify[a], aunit, g, grad, &dtmp);
          normalize_backward(aunit, anorm, dtmp, de);
          apply_backward(e.params_, l.attr_embed[a], hidden, de, grad, &dtmp);
          for (std::size_t k = 0; k < dh.size(); ++k) dh[k] += dtmp[k];
        }

        g.resize(pre.size());
        kernels::silu_backward(pre.data(), dh.data(), static_cast<int>(pre.size()), g.data());
        apply_backward(e.params_, l.hidden, x, g, grad, nullptr);
      }
      if (!std::isfinite(loss)) throw TrainingFailure("embedder loss diverged");
      ++t;
      const double inv = 1.0 / static_cast<double>(end - start);
      const double b1 = 0.9;
      const double b2 = 0.999;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
      for (std::size_t k = 0; k < l.total; ++k) {
        const double gk = grad[k] * inv;
        m1[k] = b1 * m1[k] + (1.0 - b1) * gk;
        m2[k] = b2 * m2[k] + (1.0 - b2) * gk * gk;
        e.params_[k] -= config.learning_rate * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + 1e-8);
      }
    }
  }
  return e;
}

}  // namespace dmavg
