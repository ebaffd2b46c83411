// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dmavg/batch.hpp"

namespace dmavg {

enum class ShapeKind { circle, square, triangle, ring, cross };

const char* to_string(ShapeKind kind);
ShapeKind shape_from_string(const std::string& name);

// How one mode of a class is drawn. Colors are RGB in [0, 1]; positions and
// sizes are fractions of the image side.
struct RenderProgram {
  std::string name;
  ShapeKind shape = ShapeKind::circle;
  std::string color_name = "white";
  std::array<double, 3> color{1.0, 1.0, 1.0};
  double color_jitter = 0.0;
  std::array<double, 3> background{0.0, 0.0, 0.0};
  double center_x = 0.5;
  double center_y = 0.5;
  double position_jitter = 0.0;
  double size = 0.3;
  double size_jitter = 0.0;
  // Relative frequency of the mode within its class.
  double weight = 1.0;
};

struct ClassSpec {
  std::string name;
  std::vector<RenderProgram> modes;
};

struct ToyDatasetSpec {
  LatentShape shape{3, 32, 32};
  std::vector<ClassSpec> classes;
  int samples_per_class = 256;
  std::uint64_t seed = 0;

  int total_modes() const;
  // Global mode index of (class, mode).
  int mode_index(int class_id, int mode) const;
};

// Small three-class preset: a single-mode class, a two-mode class with far
// separated modes, and a second single-mode class.
ToyDatasetSpec desk_dataset_spec(int side = 32, int samples_per_class = 256, std::uint64_t seed = 0);

struct SampleLabel {
  int class_id = 0;
  int mode = 0;
  int global_mode = 0;
  std::map<std::string, std::string> categorical;  // shape, color
  std::map<std::string, double> continuous;         // x, y, size, r, g, b
};

// Categorical attributes carried by every sample.
inline const std::vector<std::string>& categorical_attributes() {
  static const std::vector<std::string> names{"shape", "color"};
  return names;
}
inline const std::vector<std::string>& continuous_attributes() {
  static const std::vector<std::string> names{"x", "y", "size", "r", "g", "b"};
  return names;
}

struct LabeledImages {
  LatentShape shape;
  Batch pixels;  // rows in [-1, 1], quantized to 8-bit levels
  std::vector<SampleLabel> labels;
  std::vector<std::string> class_names;
  int total_modes = 0;
};

LabeledImages generate_dataset(const ToyDatasetSpec& spec);

// Renders one sample; exposed for tests and previews.
std::vector<double> render_sample(const RenderProgram& program, LatentShape shape, std::uint64_t seed,
                                  SampleLabel* label = nullptr);

// Images as PNG files plus labels.jsonl (path, class, mode, attributes).
void save_dataset(const LabeledImages& data, const std::filesystem::path& dir);
LabeledImages load_dataset(const std::filesystem::path& dir);

// Rows of `data` belonging to a class.
std::vector<int> indices_of_class(const LabeledImages& data, int class_id);

}  // namespace dmavg
