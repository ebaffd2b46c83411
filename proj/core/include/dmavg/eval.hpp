// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dmavg/batch.hpp"

namespace dmavg {

enum class DistanceKind { cosine, perceptual_adapter, pixel_mse };

const char* to_string(DistanceKind kind);

class DistanceBackend {
 public:
  virtual ~DistanceBackend() = default;
  virtual std::string id() const = 0;
  virtual DistanceKind kind() const = 0;
  // a.rows() x b.rows() distances, row-major.
  virtual std::vector<double> cross_distances(const Batch& a, const Batch& b) const = 0;
};

// 1 - cos between embeddings produced by `embed`.
class CosineBackend final : public DistanceBackend {
 public:
  using EmbedFn = std::function<Batch(const Batch&)>;
  CosineBackend(std::string id, EmbedFn embed) : id_(std::move(id)), embed_(std::move(embed)) {}

  std::string id() const override { return id_; }
  DistanceKind kind() const override { return DistanceKind::cosine; }
  std::vector<double> cross_distances(const Batch& a, const Batch& b) const override;

 private:
  std::string id_;
  EmbedFn embed_;
};

class PixelMseBackend final : public DistanceBackend {
 public:
  std::string id() const override { return "pixel-mse"; }
  DistanceKind kind() const override { return DistanceKind::pixel_mse; }
  std::vector<double> cross_distances(const Batch& a, const Batch& b) const override;
};

// Slot for externally hosted perceptual metrics (LPIPS, DreamSim, ...).
class PairwiseAdapterBackend final : public DistanceBackend {
 public:
  using PairFn = std::function<double(std::span<const double>, std::span<const double>)>;
  PairwiseAdapterBackend(std::string id, PairFn fn) : id_(std::move(id)), fn_(std::move(fn)) {}

  std::string id() const override { return id_; }
  DistanceKind kind() const override { return DistanceKind::perceptual_adapter; }
  std::vector<double> cross_distances(const Batch& a, const Batch& b) const override;

 private:
  std::string id_;
  PairFn fn_;
};

// Throws NotAvailable for reserved ids with no bundled implementation
// ("imagereward", "clip", "dreamsim", "lpips").
std::unique_ptr<DistanceBackend> reserved_backend(const std::string& id);

double cosine_distance(std::span<const double> a, std::span<const double> b);

// Mean distance over all unordered prototype pairs.
double consistency(const Batch& prototypes, const DistanceBackend& backend);

// Mean distance from one prototype to every sample.
double representativeness(std::span<const double> prototype, const Batch& samples, const DistanceBackend& backend);

struct MetricEntry {
  std::string concept_id;
  std::string category;
  std::string method;
  std::string set_id;
  std::string backend;
  double consistency = 0.0;
  // One value per prototype.
  std::vector<double> representativeness;

  double mean_representativeness() const;
};

struct GroupAggregate {
  std::string concept_id;
  std::string category;
  std::string method;
  std::string backend;
  int sets = 0;
  double consistency = 0.0;
  double representativeness = 0.0;
};

struct MethodAggregate {
  std::string method;
  std::string backend;
  int groups = 0;
  double consistency = 0.0;
  double representativeness = 0.0;
};

struct MetricsReport {
  int schema_version = 1;
  std::vector<MetricEntry> entries;
  // Means within (concept, category, method, backend).
  std::vector<GroupAggregate> groups;
  // Means of group aggregates within (method, backend).
  std::vector<MethodAggregate> methods;

  std::string to_json() const;
  std::string to_csv() const;
  static MetricsReport from_json(const std::string& text);
};

// Deterministic regardless of entry order. Every (concept, category, method,
// set) must be reported under the same backend set.
MetricsReport aggregate_report(std::vector<MetricEntry> entries);

struct GridImage {
  LatentShape shape;
  std::vector<double> pixels;
};

// Tiles images row-major into `columns` columns with a one-pixel white border.
GridImage compose_grid(const Batch& images, LatentShape tile, int columns);
void render_grid(const Batch& images, LatentShape tile, int columns, const std::filesystem::path& path);

}  // namespace dmavg
