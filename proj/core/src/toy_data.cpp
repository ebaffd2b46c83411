// SPDX-License-Identifier: Apache-2.0
#include "dmavg/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "dmavg/errors.hpp"
#include "dmavg/image_io.hpp"
#include "dmavg/random.hpp"

namespace dmavg {

using json = nlohmann::json;

const char* to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::circle:
      return "circle";
    case ShapeKind::square:
      return "square";
    case ShapeKind::triangle:
      return "triangle";
    case ShapeKind::ring:
      return "ring";
    case ShapeKind::cross:
      return "cross";
  }
  return "?";
}

ShapeKind shape_from_string(const std::string& name) {
  for (auto k : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle, ShapeKind::ring, ShapeKind::cross}) {
    if (name == to_string(k)) return k;
  }
  throw InvalidArgument("unknown shape '" + name + "'");
}

int ToyDatasetSpec::total_modes() const {
  int n = 0;
  for (const auto& c : classes) n += static_cast<int>(c.modes.size());
  return n;
}

int ToyDatasetSpec::mode_index(int class_id, int mode) const {
  int n = 0;
  for (int c = 0; c < class_id; ++c) n += static_cast<int>(classes[static_cast<std::size_t>(c)].modes.size());
  return n + mode;
}

ToyDatasetSpec desk_dataset_spec(int side, int samples_per_class, std::uint64_t seed) {
  ToyDatasetSpec spec;
  spec.shape = {3, side, side};
  spec.samples_per_class = samples_per_class;
  spec.seed = seed;

  RenderProgram sun;
  sun.name = "sun";
  sun.shape = ShapeKind::circle;
  sun.color_name = "yellow";
  sun.color = {1.0, 0.85, 0.1};
  sun.color_jitter = 0.12;
  sun.background = {0.1, 0.1, 0.35};
  sun.position_jitter = 0.18;
  sun.size = 0.45;
  sun.size_jitter = 0.12;

  RenderProgram bird;
  bird.name = "bird";
  bird.shape = ShapeKind::triangle;
  bird.color_name = "white";
  bird.color = {0.95, 0.95, 0.95};
  bird.color_jitter = 0.05;
  bird.background = {0.3, 0.5, 0.85};
  bird.center_x = 0.35;
  bird.center_y = 0.4;
  bird.position_jitter = 0.1;
  bird.size = 0.4;
  bird.size_jitter = 0.08;
  bird.weight = 0.5;

  RenderProgram machine;
  machine.name = "machine";
  machine.shape = ShapeKind::cross;
  machine.color_name = "orange";
  machine.color = {1.0, 0.5, 0.0};
  machine.color_jitter = 0.08;
  machine.background = {0.4, 0.4, 0.4};
  machine.center_x = 0.62;
  machine.center_y = 0.6;
  machine.position_jitter = 0.1;
  machine.size = 0.5;
  machine.size_jitter = 0.08;
  machine.weight = 0.5;

  RenderProgram block;
  block.name = "block";
  block.shape = ShapeKind::square;
  block.color_name = "red";
  block.color = {0.85, 0.15, 0.15};
  block.color_jitter = 0.1;
  block.background = {0.15, 0.45, 0.2};
  block.position_jitter = 0.18;
  block.size = 0.35;
  block.size_jitter = 0.1;

  spec.classes = {ClassSpec{"sun", {sun}}, ClassSpec{"crane", {bird, machine}}, ClassSpec{"block", {block}}};
  return spec;
}

namespace {

bool inside(ShapeKind kind, double dx, double dy, double r) {
  switch (kind) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::square:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::triangle:
      return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    case ShapeKind::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
    case ShapeKind::cross:
      return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
  }
  return false;
}

std::vector<int> mode_counts(const ClassSpec& cls, int total) {
  double weight_sum = 0.0;
  for (const auto& m : cls.modes) {
    if (!(m.weight > 0.0)) throw InvalidArgument("mode weights must be positive");
    weight_sum += m.weight;
  }
  std::vector<int> counts;
  std::vector<std::pair<double, int>> remainders;
  int assigned = 0;
  for (std::size_t i = 0; i < cls.modes.size(); ++i) {
    const double exact = total * cls.modes[i].weight / weight_sum;
    const int n = static_cast<int>(std::floor(exact));
    counts.push_back(n);
    assigned += n;
    remainders.emplace_back(exact - n, static_cast<int>(i));
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; assigned < total; ++i, ++assigned) {
    ++counts[static_cast<std::size_t>(remainders[static_cast<std::size_t>(i)].second)];
  }
  return counts;
}

}  // namespace

std::vector<double> render_sample(const RenderProgram& program, LatentShape shape, std::uint64_t seed,
                                  SampleLabel* label) {
  if (shape.channels != 3 || shape.height <= 0 || shape.width <= 0) {
    throw InvalidArgument("toy images are 3-channel with positive size");
  }
  Rng rng(seed);
  std::array<double, 3> color{};
  for (int c = 0; c < 3; ++c) {
    color[static_cast<std::size_t>(c)] =
        std::clamp(program.color[static_cast<std::size_t>(c)] + program.color_jitter * rng.uniform(-1.0, 1.0), 0.0,
                   1.0);
  }
  const double cx = program.center_x + program.position_jitter * rng.uniform(-1.0, 1.0);
  const double cy = program.center_y + program.position_jitter * rng.uniform(-1.0, 1.0);
  const double size = std::max(0.05, program.size + program.size_jitter * rng.uniform(-1.0, 1.0));
  const double r = 0.5 * size;

  constexpr int kSuper = 4;
  const int h = shape.height;
  const int w = shape.width;
  std::vector<double> image(shape.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = (x + (sx + 0.5) / kSuper) / w;
          const double py = (y + (sy + 0.5) / kSuper) / h;
          hits += inside(program.shape, px - cx, py - cy, r) ? 1 : 0;
        }
      }
      const double cov = static_cast<double>(hits) / (kSuper * kSuper);
      for (int c = 0; c < 3; ++c) {
        const double v = program.background[static_cast<std::size_t>(c)] * (1.0 - cov) +
                         color[static_cast<std::size_t>(c)] * cov;
        image[static_cast<std::size_t>((c * h + y) * w + x)] = from_byte(to_byte(2.0 * v - 1.0));
      }
    }
  }
  if (label) {
    label->categorical["shape"] = to_string(program.shape);
    label->categorical["color"] = program.color_name;
    label->continuous["x"] = cx;
    label->continuous["y"] = cy;
    label->continuous["size"] = size;
    label->continuous["r"] = color[0];
    label->continuous["g"] = color[1];
    label->continuous["b"] = color[2];
  }
  return image;
}

LabeledImages generate_dataset(const ToyDatasetSpec& spec) {
  if (spec.classes.empty()) {
    throw InvalidArgument("dataset spec has no classes");
  }
  if (spec.samples_per_class <= 0) {
    throw InvalidArgument("samples_per_class must be positive");
  }
  LabeledImages out;
  out.shape = spec.shape;
  out.total_modes = spec.total_modes();
  out.pixels = Batch(0, spec.shape.size());
  std::uint64_t index = 0;
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    const auto& cls = spec.classes[c];
    if (cls.modes.empty()) {
      throw InvalidArgument("class '" + cls.name + "' has no modes");
    }
    out.class_names.push_back(cls.name);
    const auto counts = mode_counts(cls, spec.samples_per_class);
    for (std::size_t m = 0; m < cls.modes.size(); ++m) {
      for (int i = 0; i < counts[m]; ++i, ++index) {
        SampleLabel label;
        label.class_id = static_cast<int>(c);
        label.mode = static_cast<int>(m);
        label.global_mode = spec.mode_index(static_cast<int>(c), static_cast<int>(m));
        const auto image = render_sample(cls.modes[m], spec.shape, derive_seed(spec.seed, "sample", index), &label);
        out.pixels.append_row(image);
        out.labels.push_back(std::move(label));
      }
    }
  }
  return out;
}

std::vector<int> indices_of_class(const LabeledImages& data, int class_id) {
  std::vector<int> out;
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    if (data.labels[i].class_id == class_id) out.push_back(static_cast<int>(i));
  }
  return out;
}

void save_dataset(const LabeledImages& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream labels(dir / "labels.jsonl", std::ios::trunc);
  if (!labels) throw IoError("cannot write labels in " + dir.string());
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".png";
    write_png(dir / name.str(), data.pixels.row(i), data.shape);
    const auto& l = data.labels[i];
    json attrs = json::object();
    for (const auto& [k, v] : l.categorical) attrs[k] = v;
    for (const auto& [k, v] : l.continuous) attrs[k] = v;
    json line{{"path", name.str()},
              {"class", l.class_id},
              {"class_name", data.class_names.at(static_cast<std::size_t>(l.class_id))},
              {"mode", l.mode},
              {"global_mode", l.global_mode},
              {"attributes", attrs}};
    labels << line.dump() << '\n';
  }
  json meta{{"shape", {data.shape.channels, data.shape.height, data.shape.width}},
            {"class_names", data.class_names},
            {"total_modes", data.total_modes},
            {"count", data.labels.size()}};
  std::ofstream(dir / "dataset.json", std::ios::trunc) << meta.dump(2) << '\n';
}

LabeledImages load_dataset(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "dataset.json");
  if (!meta_in) throw IoError("no dataset.json in " + dir.string());
  const json meta = json::parse(meta_in);
  LabeledImages out;
  const auto shape = meta.at("shape").get<std::vector<int>>();
  out.shape = {shape.at(0), shape.at(1), shape.at(2)};
  out.class_names = meta.at("class_names").get<std::vector<std::string>>();
  out.total_modes = meta.at("total_modes").get<int>();
  out.pixels = Batch(0, out.shape.size());
  std::ifstream labels(dir / "labels.jsonl");
  if (!labels) throw IoError("no labels.jsonl in " + dir.string());
  std::string line;
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    LatentShape s;
    out.pixels.append_row(read_png(dir / j.at("path").get<std::string>(), &s));
    if (!(s == out.shape)) throw IoError("image shape mismatch in " + dir.string());
    SampleLabel l;
    l.class_id = j.at("class").get<int>();
    l.mode = j.at("mode").get<int>();
    l.global_mode = j.at("global_mode").get<int>();
    for (const auto& [k, v] : j.at("attributes").items()) {
      if (v.is_string()) {
        l.categorical[k] = v.get<std::string>();
      } else {
        l.continuous[k] = v.get<double>();
      }
    }
    out.labels.push_back(std::move(l));
  }
  return out;
}

}  // namespace dmavg
