// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmavg/dma.hpp"

namespace dmavg {

struct PcaResult {
  std::vector<double> mean;
  Batch components;  // dims x input_dim, orthonormal rows
  std::vector<double> explained_variance;
  std::vector<double> explained_variance_ratio;

  Batch project(const Batch& data) const;
};

PcaResult fit_pca(const Batch& data, int dims);

struct GmmOptions {
  int restarts = 5;
  double tolerance = 1e-4;
  int max_iterations = 200;
  double covariance_floor = 1e-6;
};

struct GaussianMixture {
  std::vector<double> weights;
  Batch means;                                  // components x dims
  std::vector<std::vector<double>> covariances;  // full, dims x dims each
  double log_likelihood = 0.0;                  // mean per sample
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> notes;

  int components() const { return static_cast<int>(weights.size()); }
  Batch responsibilities(const Batch& points) const;
  std::vector<int> predict(const Batch& points) const;
};

// Full-covariance EM with k-means++ seeding; best of options.restarts by
// likelihood. Singular covariances get diagonal jitter, recorded in notes.
GaussianMixture fit_gmm(const Batch& points, int n_clusters, std::uint64_t seed, const GmmOptions& options = {});

struct ClusterAssignment {
  std::vector<int> labels;
  GaussianMixture gmm;
  PcaResult pca;
  std::string embedder_id;
  int pca_dims = 2;
  int n_clusters = 2;
  std::uint64_t seed = 0;

  std::string to_json() const;
  static ClusterAssignment from_json(const std::string& text);
};

ClusterAssignment cluster_samples(const Batch& embeddings, int pca_dims, int n_clusters, std::uint64_t seed,
                                  const GmmOptions& options = {});

// Partition of latent indices by cluster. sample_to_latent must be a
// bijection onto 0..n-1.
std::vector<std::vector<int>> map_labels_to_latents(const ClusterAssignment& assignment,
                                                    std::span<const int> sample_to_latent);

enum class RefinementKind { none, inversion_embedding, low_rank_adapter };

const char* to_string(RefinementKind kind);
RefinementKind refinement_from_string(const std::string& name);

struct RefinementLog {
  int steps = 0;
  double learning_rate = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> losses;
};

struct RefinementArtifact {
  RefinementKind kind = RefinementKind::none;
  int concept_id = 0;
  int source_cluster = -1;
  std::vector<double> embedding;
  LowRankAdapter adapter;
  RefinementLog log;

  ConditioningSpec conditioning() const;
  void save(const std::filesystem::path& path) const;
  static RefinementArtifact load(const std::filesystem::path& path);
};

struct RefinementOptions {
  int steps = 3000;
  double learning_rate = 1e-2;
  int batch_size = 8;
  int rank = 1;
  std::uint64_t seed = 0;
  int source_cluster = -1;
};

inline RefinementOptions inversion_defaults() { return {3000, 1e-2, 8, 1, 0, -1}; }
inline RefinementOptions adapter_defaults() { return {2000, 1e-4, 8, 1, 0, -1}; }

// Learns a replacement concept embedding on the cluster's images with the
// model frozen (mean squared noise-prediction loss).
RefinementArtifact train_inversion_embedding(const Denoiser& model, const Batch& cluster_images, int concept_id,
                                             const RefinementOptions& options = inversion_defaults());

// Learns low-rank deltas on the conditioning projections; up factors start
// at zero so step 0 equals the base model.
RefinementArtifact train_lowrank_adapter(const Denoiser& model, const Batch& cluster_images, int concept_id,
                                         const RefinementOptions& options = adapter_defaults());

struct ClusterPrototypes {
  int cluster = 0;
  std::vector<int> latent_indices;
  std::optional<RefinementArtifact> refinement;
  double guidance_scale = 0.0;
  DmaResult result;
};

struct PerClusterOptions {
  RefinementKind kind = RefinementKind::none;
  RefinementOptions inversion = inversion_defaults();
  RefinementOptions adapter = adapter_defaults();
  double inversion_guidance = 7.0;
  double adapter_guidance = 3.0;
};

// For each cluster: optional refinement on the cluster's sample images, then
// DMA over the cluster's latents only.
std::vector<ClusterPrototypes> dma_per_cluster(const DenoiserHandle& model, const ConditioningSpec& cond,
                                               const LatentBatch& latents,
                                               const std::vector<std::vector<int>>& partition,
                                               const Batch& sample_images, const DmaConfig& config,
                                               const PerClusterOptions& options);

}  // namespace dmavg
