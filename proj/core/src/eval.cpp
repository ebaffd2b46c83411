// SPDX-License-Identifier: Apache-2.0
#include "dmavg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "dmavg/errors.hpp"
#include "dmavg/image_io.hpp"

namespace dmavg {

using json = nlohmann::json;

const char* to_string(DistanceKind kind) {
  switch (kind) {
    case DistanceKind::cosine:
      return "cosine";
    case DistanceKind::perceptual_adapter:
      return "perceptual-adapter";
    case DistanceKind::pixel_mse:
      return "pixel-mse";
  }
  return "?";
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw InvalidArgument("cosine distance needs equal, non-empty vectors");
  if (std::equal(a.begin(), a.end(), b.begin())) return 0.0;
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw InvalidArgument("cosine distance of a zero vector");
  return std::clamp(1.0 - dot / std::sqrt(na * nb), 0.0, 2.0);
}

std::vector<double> CosineBackend::cross_distances(const Batch& a, const Batch& b) const {
  const Batch ea = embed_(a);
  const Batch eb = embed_(b);
  if (ea.rows() != a.rows() || eb.rows() != b.rows()) throw InvalidArgument("embedder changed the row count");
  std::vector<double> out(a.rows() * b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out[i * b.rows() + j] = cosine_distance(ea.row(i), eb.row(j));
  }
  return out;
}

std::vector<double> PixelMseBackend::cross_distances(const Batch& a, const Batch& b) const {
  if (a.cols() != b.cols() || a.cols() == 0) throw InvalidArgument("pixel distance needs equal image sizes");
  std::vector<double> out(a.rows() * b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      out[i * b.rows() + j] = squared_distance(a.row(i), b.row(j)) / static_cast<double>(a.cols());
    }
  }
  return out;
}

std::vector<double> PairwiseAdapterBackend::cross_distances(const Batch& a, const Batch& b) const {
  std::vector<double> out(a.rows() * b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out[i * b.rows() + j] = fn_(a.row(i), b.row(j));
  }
  return out;
}

std::unique_ptr<DistanceBackend> reserved_backend(const std::string& id) {
  static const std::set<std::string> reserved{"imagereward", "clip", "dreamsim", "lpips"};
  if (reserved.count(id)) {
    throw NotAvailable("backend '" + id + "' needs an external model that is not bundled");
  }
  throw InvalidArgument("unknown distance backend '" + id + "'");
}

double consistency(const Batch& prototypes, const DistanceBackend& backend) {
  const std::size_t n = prototypes.rows();
  if (n < 2) throw InvalidArgument("consistency needs at least two prototypes");
  const auto d = backend.cross_distances(prototypes, prototypes);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) sum += d[i * n + j];
  }
  return sum / static_cast<double>(n * (n - 1) / 2);
}

double representativeness(std::span<const double> prototype, const Batch& samples, const DistanceBackend& backend) {
  if (samples.empty()) throw InvalidArgument("representativeness needs at least one sample");
  const auto d = backend.cross_distances(Batch::from_row(prototype), samples);
  double sum = 0.0;
  for (double v : d) sum += v;
  return sum / static_cast<double>(d.size());
}

double MetricEntry::mean_representativeness() const {
  if (representativeness.empty()) return 0.0;
  double s = 0.0;
  for (double v : representativeness) s += v;
  return s / static_cast<double>(representativeness.size());
}

namespace {

auto entry_key(const MetricEntry& e) { return std::tie(e.concept_id, e.category, e.method, e.set_id, e.backend); }

json entry_json(const MetricEntry& e) {
  return {{"concept", e.concept_id},   {"category", e.category},   {"method", e.method},
          {"set_id", e.set_id},     {"backend", e.backend},     {"consistency", e.consistency},
          {"representativeness", e.representativeness}};
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

MetricsReport aggregate_report(std::vector<MetricEntry> entries) {
  std::sort(entries.begin(), entries.end(),
            [](const MetricEntry& a, const MetricEntry& b) { return entry_key(a) < entry_key(b); });
  using SetKey = std::tuple<std::string, std::string, std::string, std::string>;
  std::map<SetKey, std::set<std::string>> backends;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (i > 0 && entry_key(entries[i - 1]) == entry_key(e)) {
      throw InvalidArgument("duplicate metric entry for set '" + e.set_id + "' backend '" + e.backend + "'");
    }
    backends[{e.concept_id, e.category, e.method, e.set_id}].insert(e.backend);
  }
  if (!backends.empty()) {
    const auto& first = backends.begin()->second;
    for (const auto& [key, set] : backends) {
      if (set != first) {
        throw InvalidArgument("inconsistent backends across entries (set '" + std::get<3>(key) + "')");
      }
    }
  }

  MetricsReport r;
  r.entries = entries;
  using GroupKey = std::tuple<std::string, std::string, std::string, std::string>;
  std::map<GroupKey, GroupAggregate> groups;
  for (const auto& e : entries) {
    auto& g = groups[{e.concept_id, e.category, e.method, e.backend}];
    g.concept_id = e.concept_id;
    g.category = e.category;
    g.method = e.method;
    g.backend = e.backend;
    g.sets += 1;
    g.consistency += e.consistency;
    g.representativeness += e.mean_representativeness();
  }
  std::map<std::pair<std::string, std::string>, MethodAggregate> methods;
  for (auto& [key, g] : groups) {
    g.consistency /= g.sets;
    g.representativeness /= g.sets;
    r.groups.push_back(g);
    auto& m = methods[{g.method, g.backend}];
    m.method = g.method;
    m.backend = g.backend;
    m.groups += 1;
    m.consistency += g.consistency;
    m.representativeness += g.representativeness;
  }
  for (auto& [key, m] : methods) {
    m.consistency /= m.groups;
    m.representativeness /= m.groups;
    r.methods.push_back(m);
  }
  return r;
}

std::string MetricsReport::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["entries"] = json::array();
  for (const auto& e : entries) j["entries"].push_back(entry_json(e));
  j["groups"] = json::array();
  for (const auto& g : groups) {
    j["groups"].push_back({{"concept", g.concept_id},
                           {"category", g.category},
                           {"method", g.method},
                           {"backend", g.backend},
                           {"sets", g.sets},
                           {"consistency", g.consistency},
                           {"representativeness", g.representativeness}});
  }
  j["methods"] = json::array();
  for (const auto& m : methods) {
    j["methods"].push_back({{"method", m.method},
                            {"backend", m.backend},
                            {"groups", m.groups},
                            {"consistency", m.consistency},
                            {"representativeness", m.representativeness}});
  }
  return j.dump(2);
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "level,concept,category,method,backend,set_id,count,consistency,representativeness\n";
  for (const auto& e : entries) {
    os << "entry," << e.concept_id << ',' << e.category << ',' << e.method << ',' << e.backend << ',' << e.set_id
       << ',' << e.representativeness.size() << ',' << num(e.consistency) << ',' << num(e.mean_representativeness())
       << '\n';
  }
  for (const auto& g : groups) {
    os << "group," << g.concept_id << ',' << g.category << ',' << g.method << ',' << g.backend << ",," << g.sets << ','
       << num(g.consistency) << ',' << num(g.representativeness) << '\n';
  }
  for (const auto& m : methods) {
    os << "method,,," << m.method << ',' << m.backend << ",," << m.groups << ',' << num(m.consistency) << ','
       << num(m.representativeness) << '\n';
  }
  return os.str();
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("schema_version", 0) != 1) throw InvalidArgument("unsupported metrics schema version");
  std::vector<MetricEntry> entries;
  for (const auto& e : j.at("entries")) {
    MetricEntry m;
    m.concept_id = e.at("concept").get<std::string>();
    m.category = e.at("category").get<std::string>();
    m.method = e.at("method").get<std::string>();
    m.set_id = e.at("set_id").get<std::string>();
    m.backend = e.at("backend").get<std::string>();
    m.consistency = e.at("consistency").get<double>();
    m.representativeness = e.at("representativeness").get<std::vector<double>>();
    entries.push_back(std::move(m));
  }
  return aggregate_report(std::move(entries));
}

GridImage compose_grid(const Batch& images, LatentShape tile, int columns) {
  if (images.empty()) throw InvalidArgument("grid needs at least one image");
  if (images.cols() != tile.size()) throw InvalidArgument("image size does not match the tile shape");
  if (columns < 1) throw InvalidArgument("grid needs at least one column");
  const int n = static_cast<int>(images.rows());
  const int cols = std::min(columns, n);
  const int rows = (n + cols - 1) / cols;
  GridImage g;
  g.shape = {tile.channels, rows * (tile.height + 1) + 1, cols * (tile.width + 1) + 1};
  g.pixels.assign(g.shape.size(), 1.0);
  for (int k = 0; k < n; ++k) {
    const int oy = (k / cols) * (tile.height + 1) + 1;
    const int ox = (k % cols) * (tile.width + 1) + 1;
    const auto src = images.row(static_cast<std::size_t>(k));
    for (int c = 0; c < tile.channels; ++c) {
      for (int y = 0; y < tile.height; ++y) {
        for (int x = 0; x < tile.width; ++x) {
          g.pixels[static_cast<std::size_t>((c * g.shape.height + oy + y) * g.shape.width + ox + x)] =
              src[static_cast<std::size_t>((c * tile.height + y) * tile.width + x)];
        }
      }
    }
  }
  return g;
}

void render_grid(const Batch& images, LatentShape tile, int columns, const std::filesystem::path& path) {
  const auto g = compose_grid(images, tile, columns);
  write_png(path, g.pixels, g.shape);
}

}  // namespace dmavg
