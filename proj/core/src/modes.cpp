// SPDX-License-Identifier: Apache-2.0
#include "dmavg/modes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "dmavg/container.hpp"
#include "dmavg/errors.hpp"

namespace dmavg {

using json = nlohmann::json;

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Mat to_eigen(const Batch& b) {
  Mat m(b.rows(), b.cols());
  for (std::size_t i = 0; i < b.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = b.row(i)[j];
  }
  return m;
}

Batch from_eigen(const Mat& m) {
  Batch b(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) b.row(static_cast<std::size_t>(i))[static_cast<std::size_t>(j)] = m(i, j);
  }
  return b;
}

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double log_sum_exp(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

Batch PcaResult::project(const Batch& data) const {
  if (data.cols() != mean.size()) throw InvalidArgument("PCA input dimension mismatch");
  Batch out(data.rows(), components.rows());
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto x = data.row(i);
    for (std::size_t k = 0; k < components.rows(); ++k) {
      const auto c = components.row(k);
      double s = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) s += (x[j] - mean[j]) * c[j];
      out.row(i)[k] = s;
    }
  }
  return out;
}

PcaResult fit_pca(const Batch& data, int dims) {
  if (data.empty()) throw InvalidArgument("PCA needs at least one row");
  if (dims < 1 || static_cast<std::size_t>(dims) > data.cols()) {
    throw InvalidArgument("pca_dims must lie in [1, " + std::to_string(data.cols()) + "], got " +
                          std::to_string(dims));
  }
  PcaResult r;
  r.mean = row_mean(data);
  Mat x = to_eigen(data);
  const Vec mu = Eigen::Map<const Vec>(r.mean.data(), static_cast<Eigen::Index>(r.mean.size()));
  x.rowwise() -= mu.transpose();
  const Mat cov = (x.transpose() * x) / static_cast<double>(data.rows());
  Eigen::SelfAdjointEigenSolver<Mat> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericFailure("PCA eigendecomposition failed");
  const Vec evals = solver.eigenvalues();
  const Mat evecs = solver.eigenvectors();
  const double total = cov.trace();
  const Eigen::Index d = evals.size();
  Mat comps(dims, d);
  for (int k = 0; k < dims; ++k) {
    const Eigen::Index col = d - 1 - k;
    Vec c = evecs.col(col);
    // Orient so the first clearly nonzero projection is positive.
    const Vec proj = x * c;
    const double scale = proj.cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < proj.size(); ++i) {
      if (std::abs(proj(i)) > 1e-9 * scale) {
        if (proj(i) < 0) c = -c;
        break;
      }
    }
    comps.row(k) = c.transpose();
    const double ev = std::max(0.0, evals(col));
    r.explained_variance.push_back(ev);
    r.explained_variance_ratio.push_back(total > 0.0 ? ev / total : 0.0);
  }
  r.components = from_eigen(comps);
  return r;
}

namespace {

struct Fit {
  GaussianMixture gmm;
};

// Per-component log densities, rows = points.
Mat log_densities(const GaussianMixture& g, const Mat& x, std::vector<std::string>* notes) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Mat out(n, g.components());
  for (int k = 0; k < g.components(); ++k) {
    Mat cov = Eigen::Map<const Mat>(g.covariances[static_cast<std::size_t>(k)].data(), d, d);
    Eigen::LLT<Mat> llt(cov);
    double jitter = 1e-9;
    while (llt.info() != Eigen::Success) {
      cov += jitter * Mat::Identity(d, d);
      llt.compute(cov);
      if (notes) notes->push_back("component " + std::to_string(k) + ": covariance jitter " + std::to_string(jitter));
      jitter *= 10.0;
      if (jitter > 1e3) throw NumericFailure("GMM covariance could not be regularized");
    }
    const Mat l = llt.matrixL();
    const double log_det = 2.0 * l.diagonal().array().log().sum();
    Vec mu(d);
    for (Eigen::Index j = 0; j < d; ++j) mu(j) = g.means.row(static_cast<std::size_t>(k))[static_cast<std::size_t>(j)];
    const double lw = std::log(g.weights[static_cast<std::size_t>(k)]);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec diff = x.row(i).transpose() - mu;
      const Vec sol = llt.matrixL().solve(diff);
      out(i, k) = lw - 0.5 * (static_cast<double>(d) * kLog2Pi + log_det + sol.squaredNorm());
    }
  }
  return out;
}

std::vector<int> kmeanspp(const Mat& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  std::vector<int> centers{static_cast<int>(rng.below(static_cast<std::uint64_t>(n)))};
  Vec d2 = Vec::Constant(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    const Vec c = x.row(centers.back()).transpose();
    for (Eigen::Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (x.row(i).transpose() - c).squaredNorm());
    const double total = d2.sum();
    int pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      pick = static_cast<int>(n - 1);
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= d2(i);
        if (u < 0.0) {
          pick = static_cast<int>(i);
          break;
        }
      }
    } else {
      pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centers.push_back(pick);
  }
  return centers;
}

GaussianMixture em(const Mat& x, int k, Rng& rng, const GmmOptions& opt) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  GaussianMixture g;
  const auto centers = kmeanspp(x, k, rng);
  Vec gmean = x.colwise().mean().transpose();
  Mat centered = x.rowwise() - gmean.transpose();
  Mat gcov = (centered.transpose() * centered) / static_cast<double>(n);
  gcov += opt.covariance_floor * Mat::Identity(d, d);
  g.weights.assign(static_cast<std::size_t>(k), 1.0 / k);
  g.means = Batch(static_cast<std::size_t>(k), static_cast<std::size_t>(d));
  for (int c = 0; c < k; ++c) {
    for (Eigen::Index j = 0; j < d; ++j) g.means.row(static_cast<std::size_t>(c))[static_cast<std::size_t>(j)] = x(centers[static_cast<std::size_t>(c)], j);
    g.covariances.emplace_back(gcov.data(), gcov.data() + d * d);
  }

  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < opt.max_iterations; ++it) {
    const Mat ld = log_densities(g, x, &g.notes);
    Mat resp(n, k);
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec row = ld.row(i).transpose();
      const double lse = log_sum_exp(row);
      ll += lse;
      resp.row(i) = (row.array() - lse).exp().transpose();
    }
    ll /= static_cast<double>(n);
    g.log_likelihood = ll;
    g.iterations = it + 1;
    if (it > 0 && std::abs(ll - prev) < opt.tolerance) {
      g.converged = true;
      break;
    }
    prev = ll;

    const Vec nk = resp.colwise().sum().transpose();
    double wsum = 0.0;
    for (int c = 0; c < k; ++c) {
      const double count = nk(c);
      if (count < 1e-10) {
        g.notes.push_back("component " + std::to_string(c) + " lost its support");
        g.weights[static_cast<std::size_t>(c)] = 1e-12;
        wsum += 1e-12;
        continue;
      }
      const Vec mu = (resp.col(c).transpose() * x).transpose() / count;
      const Mat diff = x.rowwise() - mu.transpose();
      Mat cov = (diff.transpose() * resp.col(c).asDiagonal() * diff) / count;
      cov += opt.covariance_floor * Mat::Identity(d, d);
      g.weights[static_cast<std::size_t>(c)] = count / static_cast<double>(n);
      wsum += g.weights[static_cast<std::size_t>(c)];
      for (Eigen::Index j = 0; j < d; ++j) g.means.row(static_cast<std::size_t>(c))[static_cast<std::size_t>(j)] = mu(j);
      g.covariances[static_cast<std::size_t>(c)].assign(cov.data(), cov.data() + d * d);
    }
    for (double& w : g.weights) w /= wsum;
  }
  return g;
}

}  // namespace

Batch GaussianMixture::responsibilities(const Batch& points) const {
  if (components() == 0) throw InvalidArgument("empty mixture");
  if (points.cols() != means.cols()) throw InvalidArgument("point dimension does not match the mixture");
  const Mat ld = log_densities(*this, to_eigen(points), nullptr);
  Mat resp(ld.rows(), ld.cols());
  for (Eigen::Index i = 0; i < ld.rows(); ++i) {
    const Vec row = ld.row(i).transpose();
    resp.row(i) = (row.array() - log_sum_exp(row)).exp().transpose();
  }
  return from_eigen(resp);
}

std::vector<int> GaussianMixture::predict(const Batch& points) const {
  const Batch r = responsibilities(points);
  std::vector<int> out;
  for (std::size_t i = 0; i < r.rows(); ++i) {
    const auto row = r.row(i);
    out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

GaussianMixture fit_gmm(const Batch& points, int n_clusters, std::uint64_t seed, const GmmOptions& options) {
  if (n_clusters < 1) throw InvalidArgument("n_clusters must be >= 1");
  if (points.rows() < static_cast<std::size_t>(n_clusters)) {
    throw InvalidArgument("need at least n_clusters points, got " + std::to_string(points.rows()));
  }
  if (points.cols() == 0) throw InvalidArgument("points have no dimensions");
  if (options.restarts < 1 || options.max_iterations < 1 || !(options.tolerance > 0.0) ||
      !(options.covariance_floor >= 0.0)) {
    throw InvalidArgument("invalid GMM options");
  }
  if (!all_finite(points.values())) throw NumericFailure("non-finite points passed to the GMM");
  const Mat x = to_eigen(points);
  std::optional<GaussianMixture> best;
  for (int r = 0; r < options.restarts; ++r) {
    Rng rng(derive_seed(seed, "gmm-restart", static_cast<std::uint64_t>(r)));
    auto g = em(x, n_clusters, rng, options);
    if (!best || g.log_likelihood > best->log_likelihood) best = std::move(g);
  }
  return *best;
}

std::string ClusterAssignment::to_json() const {
  json j;
  j["labels"] = labels;
  j["embedder_id"] = embedder_id;
  j["pca_dims"] = pca_dims;
  j["n_clusters"] = n_clusters;
  j["seed"] = seed;
  j["pca"] = {{"mean", pca.mean},
              {"components", pca.components.data()},
              {"explained_variance", pca.explained_variance},
              {"explained_variance_ratio", pca.explained_variance_ratio}};
  j["gmm"] = {{"weights", gmm.weights},
              {"means", gmm.means.data()},
              {"covariances", gmm.covariances},
              {"log_likelihood", gmm.log_likelihood},
              {"iterations", gmm.iterations},
              {"converged", gmm.converged},
              {"notes", gmm.notes}};
  return j.dump(2);
}

ClusterAssignment ClusterAssignment::from_json(const std::string& text) {
  const json j = json::parse(text);
  ClusterAssignment a;
  a.labels = j.at("labels").get<std::vector<int>>();
  a.embedder_id = j.at("embedder_id").get<std::string>();
  a.pca_dims = j.at("pca_dims").get<int>();
  a.n_clusters = j.at("n_clusters").get<int>();
  a.seed = j.at("seed").get<std::uint64_t>();
  const auto& p = j.at("pca");
  a.pca.mean = p.at("mean").get<std::vector<double>>();
  a.pca.components = Batch(static_cast<std::size_t>(a.pca_dims), a.pca.mean.size(),
                           p.at("components").get<std::vector<double>>());
  a.pca.explained_variance = p.at("explained_variance").get<std::vector<double>>();
  a.pca.explained_variance_ratio = p.at("explained_variance_ratio").get<std::vector<double>>();
  const auto& g = j.at("gmm");
  a.gmm.weights = g.at("weights").get<std::vector<double>>();
  a.gmm.means = Batch(a.gmm.weights.size(), static_cast<std::size_t>(a.pca_dims),
                      g.at("means").get<std::vector<double>>());
  a.gmm.covariances = g.at("covariances").get<std::vector<std::vector<double>>>();
  a.gmm.log_likelihood = g.at("log_likelihood").get<double>();
  a.gmm.iterations = g.at("iterations").get<int>();
  a.gmm.converged = g.at("converged").get<bool>();
  a.gmm.notes = g.at("notes").get<std::vector<std::string>>();
  for (int l : a.labels) {
    if (l < 0 || l >= a.n_clusters) throw InvalidArgument("cluster label out of range");
  }
  return a;
}

ClusterAssignment cluster_samples(const Batch& embeddings, int pca_dims, int n_clusters, std::uint64_t seed,
                                  const GmmOptions& options) {
  if (embeddings.rows() < static_cast<std::size_t>(std::max(n_clusters, 1))) {
    throw InvalidArgument("need at least n_clusters embeddings");
  }
  ClusterAssignment a;
  a.pca_dims = pca_dims;
  a.n_clusters = n_clusters;
  a.seed = seed;
  a.pca = fit_pca(embeddings, pca_dims);
  const Batch projected = a.pca.project(embeddings);
  a.gmm = fit_gmm(projected, n_clusters, seed, options);
  a.labels = a.gmm.predict(projected);
  return a;
}

std::vector<std::vector<int>> map_labels_to_latents(const ClusterAssignment& assignment,
                                                    std::span<const int> sample_to_latent) {
  const std::size_t n = assignment.labels.size();
  if (sample_to_latent.size() != n) {
    throw InvalidArgument("sample-to-latent map has " + std::to_string(sample_to_latent.size()) +
                          " entries, expected " + std::to_string(n));
  }
  std::vector<bool> seen(n, false);
  for (int l : sample_to_latent) {
    if (l < 0 || static_cast<std::size_t>(l) >= n || seen[static_cast<std::size_t>(l)]) {
      throw InvalidArgument("sample-to-latent map is not a bijection (latent " + std::to_string(l) + ")");
    }
    seen[static_cast<std::size_t>(l)] = true;
  }
  std::vector<std::vector<int>> parts(static_cast<std::size_t>(assignment.n_clusters));
  for (std::size_t i = 0; i < n; ++i) {
    const int label = assignment.labels[i];
    if (label < 0 || label >= assignment.n_clusters) throw InvalidArgument("cluster label out of range");
    parts[static_cast<std::size_t>(label)].push_back(sample_to_latent[i]);
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

const char* to_string(RefinementKind kind) {
  switch (kind) {
    case RefinementKind::none:
      return "none";
    case RefinementKind::inversion_embedding:
      return "inversion-embedding";
    case RefinementKind::low_rank_adapter:
      return "low-rank-adapter";
  }
  return "?";
}

RefinementKind refinement_from_string(const std::string& name) {
  for (auto k : {RefinementKind::none, RefinementKind::inversion_embedding, RefinementKind::low_rank_adapter}) {
    if (name == to_string(k)) return k;
  }
  throw InvalidArgument("unknown refinement kind '" + name + "'");
}

ConditioningSpec RefinementArtifact::conditioning() const {
  ConditioningSpec spec = ConditioningSpec::for_concept(concept_id);
  if (kind == RefinementKind::inversion_embedding) spec.learned_embedding = embedding;
  if (kind == RefinementKind::low_rank_adapter) spec.adapter = adapter;
  return spec;
}

void RefinementArtifact::save(const std::filesystem::path& path) const {
  Container c;
  json factors = json::array();
  if (kind == RefinementKind::inversion_embedding) c.tensors["embedding"] = TensorEntry::from(embedding);
  for (const auto& f : adapter.factors) {
    c.tensors["adapter." + f.target + ".down"] =
        TensorEntry::from(f.down, {static_cast<std::uint64_t>(f.in), static_cast<std::uint64_t>(f.rank)});
    c.tensors["adapter." + f.target + ".up"] =
        TensorEntry::from(f.up, {static_cast<std::uint64_t>(f.rank), static_cast<std::uint64_t>(f.out)});
    factors.push_back({{"target", f.target}, {"in", f.in}, {"out", f.out}, {"rank", f.rank}});
  }
  json meta{{"kind", to_string(kind)},
            {"concept", concept_id},
            {"source_cluster", source_cluster},
            {"factors", factors},
            {"log",
             {{"steps", log.steps},
              {"learning_rate", log.learning_rate},
              {"initial_loss", log.initial_loss},
              {"final_loss", log.final_loss},
              {"losses", log.losses}}}};
  c.meta_json = meta.dump();
  write_container(c, path);
}

RefinementArtifact RefinementArtifact::load(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const json meta = json::parse(c.meta_json);
  RefinementArtifact a;
  a.kind = refinement_from_string(meta.at("kind").get<std::string>());
  a.concept_id = meta.at("concept").get<int>();
  a.source_cluster = meta.at("source_cluster").get<int>();
  if (c.contains("embedding")) a.embedding = c.at("embedding").as_f64();
  for (const auto& f : meta.at("factors")) {
    LowRankFactor factor;
    factor.target = f.at("target").get<std::string>();
    factor.in = f.at("in").get<int>();
    factor.out = f.at("out").get<int>();
    factor.rank = f.at("rank").get<int>();
    factor.down = c.at("adapter." + factor.target + ".down").as_f64();
    factor.up = c.at("adapter." + factor.target + ".up").as_f64();
    a.adapter.factors.push_back(std::move(factor));
  }
  const auto& l = meta.at("log");
  a.log.steps = l.at("steps").get<int>();
  a.log.learning_rate = l.at("learning_rate").get<double>();
  a.log.initial_loss = l.at("initial_loss").get<double>();
  a.log.final_loss = l.at("final_loss").get<double>();
  a.log.losses = l.at("losses").get<std::vector<double>>();
  return a;
}

namespace {

// Adam over a flat parameter view.
struct Adam {
  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
  void step(std::vector<double*>& params, const std::vector<double>& grad, double lr) {
    ++t;
    const double c1 = 1.0 - std::pow(0.9, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(0.999, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grad[i];
      v[i] = 0.999 * v[i] + 0.001 * grad[i] * grad[i];
      *params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8);
    }
  }
  std::vector<double> m;
  std::vector<double> v;
  long long t = 0;
};

void check_refinement(const Denoiser& model, const Batch& images, const RefinementOptions& o) {
  if (images.empty()) throw InvalidArgument("refinement needs a non-empty cluster");
  if (o.steps < 0) throw InvalidArgument("refinement steps must be >= 0");
  if (!(o.learning_rate > 0.0)) throw InvalidArgument("refinement learning rate must be positive");
  if (o.batch_size < 1) throw InvalidArgument("refinement batch size must be >= 1");
  if (images.cols() != model.latent_shape().size()) throw InvalidArgument("cluster images do not match the model");
}

struct NoisyBatch {
  Batch noisy;
  Batch eps;
  std::vector<int> timesteps;
};

NoisyBatch draw(const Batch& clean, const std::vector<double>& alpha_bars, int batch, Rng& rng) {
  NoisyBatch b;
  b.noisy = Batch(static_cast<std::size_t>(batch), clean.cols());
  b.eps = Batch(static_cast<std::size_t>(batch), clean.cols());
  for (int i = 0; i < batch; ++i) {
    const auto src = clean.row(static_cast<std::size_t>(rng.below(clean.rows())));
    const int t = static_cast<int>(rng.below(alpha_bars.size()));
    const double ab = alpha_bars[static_cast<std::size_t>(t)];
    auto z = b.noisy.row(static_cast<std::size_t>(i));
    auto e = b.eps.row(static_cast<std::size_t>(i));
    for (std::size_t j = 0; j < z.size(); ++j) {
      e[j] = rng.normal();
      z[j] = std::sqrt(ab) * src[j] + std::sqrt(1.0 - ab) * e[j];
    }
    b.timesteps.push_back(t);
  }
  return b;
}

template <class Fn>
void train_loop(const Denoiser& model, const Batch& images, const RefinementOptions& o, RefinementArtifact& a,
                std::vector<double*> params, Fn grad_fn) {
  const Batch clean = encode_image(model, images);
  const auto alpha_bars = training_alpha_bars(model.beta_spec(), model.train_steps());
  Rng rng(derive_seed(o.seed, "refinement"));
  Adam adam(params.size());
  a.log.steps = o.steps;
  a.log.learning_rate = o.learning_rate;
  for (int s = 0; s < o.steps; ++s) {
    const auto b = draw(clean, alpha_bars, o.batch_size, rng);
    std::vector<double> grad;
    const double loss = grad_fn(b, grad);
    if (!std::isfinite(loss) || !all_finite(grad)) {
      throw TrainingFailure("refinement diverged at step " + std::to_string(s));
    }
    if (s == 0) a.log.initial_loss = loss;
    a.log.final_loss = loss;
    a.log.losses.push_back(loss);
    adam.step(params, grad, o.learning_rate);
  }
}

}  // namespace

RefinementArtifact train_inversion_embedding(const Denoiser& model, const Batch& cluster_images, int concept_id,
                                             const RefinementOptions& options) {
  check_refinement(model, cluster_images, options);
  RefinementArtifact a;
  a.kind = RefinementKind::inversion_embedding;
  a.concept_id = concept_id;
  a.source_cluster = options.source_cluster;
  a.embedding = model.concept_embedding(concept_id);
  std::vector<double*> params;
  for (double& v : a.embedding) params.push_back(&v);
  train_loop(model, cluster_images, options, a, params, [&](const NoisyBatch& b, std::vector<double>& grad) {
    ConditioningSpec spec = ConditioningSpec::for_concept(concept_id);
    spec.learned_embedding = a.embedding;
    auto g = model.conditioning_gradient(b.noisy, b.timesteps, b.eps, spec, true, false);
    grad = std::move(g.embedding);
    return g.loss;
  });
  return a;
}

RefinementArtifact train_lowrank_adapter(const Denoiser& model, const Batch& cluster_images, int concept_id,
                                         const RefinementOptions& options) {
  check_refinement(model, cluster_images, options);
  RefinementArtifact a;
  a.kind = RefinementKind::low_rank_adapter;
  a.concept_id = concept_id;
  a.source_cluster = options.source_cluster;
  a.adapter = model.make_adapter(options.rank, derive_seed(options.seed, "adapter-init"));
  std::vector<double*> params;
  for (auto& f : a.adapter.factors) {
    for (double& v : f.down) params.push_back(&v);
    for (double& v : f.up) params.push_back(&v);
  }
  train_loop(model, cluster_images, options, a, params, [&](const NoisyBatch& b, std::vector<double>& grad) {
    ConditioningSpec spec = ConditioningSpec::for_concept(concept_id);
    spec.adapter = a.adapter;
    auto g = model.conditioning_gradient(b.noisy, b.timesteps, b.eps, spec, false, true);
    grad.clear();
    for (const auto& f : g.adapter.factors) {
      grad.insert(grad.end(), f.down.begin(), f.down.end());
      grad.insert(grad.end(), f.up.begin(), f.up.end());
    }
    return g.loss;
  });
  return a;
}

std::vector<ClusterPrototypes> dma_per_cluster(const DenoiserHandle& model, const ConditioningSpec& cond,
                                               const LatentBatch& latents,
                                               const std::vector<std::vector<int>>& partition,
                                               const Batch& sample_images, const DmaConfig& config,
                                               const PerClusterOptions& options) {
  if (options.kind != RefinementKind::none && sample_images.rows() != latents.latents.rows()) {
    throw InvalidArgument("refinement needs one sample image per latent");
  }
  std::vector<ClusterPrototypes> out;
  for (std::size_t c = 0; c < partition.size(); ++c) {
    const auto& idx = partition[c];
    if (idx.empty()) throw InvalidArgument("cluster " + std::to_string(c) + " has no latents");
    for (int i : idx) {
      if (i < 0 || i >= latents.size()) throw InvalidArgument("cluster latent index out of range");
    }
    ClusterPrototypes p;
    p.cluster = static_cast<int>(c);
    p.latent_indices = idx;
    ConditioningSpec cluster_cond = cond;
    DmaConfig cfg = config;
    if (options.kind != RefinementKind::none) {
      const Batch images = sample_images.select(idx);
      const bool inversion = options.kind == RefinementKind::inversion_embedding;
      RefinementOptions ro = inversion ? options.inversion : options.adapter;
      ro.seed = derive_seed(ro.seed, "cluster", c);
      ro.source_cluster = static_cast<int>(c);
      auto artifact = inversion ? train_inversion_embedding(*model, images, cond.concept_id, ro)
                                : train_lowrank_adapter(*model, images, cond.concept_id, ro);
      const auto refined = artifact.conditioning();
      cluster_cond.learned_embedding = refined.learned_embedding;
      cluster_cond.adapter = refined.adapter;
      cfg.guidance.scale = inversion ? options.inversion_guidance : options.adapter_guidance;
      p.refinement = std::move(artifact);
    }
    p.guidance_scale = cfg.guidance.scale;
    LatentBatch sub;
    sub.shape = latents.shape;
    sub.seed = latents.seed;
    sub.concept_id = cond.concept_id;
    sub.latents = latents.latents.select(idx);
    cfg.latent_count = sub.size();
    if (!cfg.decode_indices.empty()) {
      std::vector<int> kept;
      for (int i : cfg.decode_indices) {
        if (i < sub.size()) kept.push_back(i);
      }
      cfg.decode_indices = kept;
      if (kept.empty()) cfg.decode_count = 1;
    }
    cfg.decode_count = std::min(cfg.decode_count, sub.size());
    p.result = dma_run(model, cluster_cond, cfg, std::move(sub));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace dmavg
