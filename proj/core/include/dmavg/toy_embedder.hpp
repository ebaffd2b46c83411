// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmavg/batch.hpp"
#include "dmavg/toy_data.hpp"

namespace dmavg {

struct ToyEmbedderConfig {
  int hidden = 128;
  int embedding_dim = 32;
  int attribute_dim = 16;
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
};

// Semantic stand-in for an image-text embedding model. A shared hidden layer
// feeds a unit-norm embedding trained to predict the mode label and the
// continuous render attributes, plus one unit-norm head per categorical
// attribute for grounded (attribute-focused) embeddings.
class ToyEmbedder {
 public:
  ToyEmbedder() = default;

  LatentShape shape() const { return shape_; }
  int embedding_dim() const { return config_.embedding_dim; }
  const std::vector<std::string>& attributes() const { return attribute_names_; }
  std::string id() const;

  // Unit-norm rows. With an attribute, rows come from that attribute's head.
  Batch embed(const Batch& images, const std::optional<std::string>& attribute = std::nullopt) const;

  std::vector<int> classify_modes(const Batch& images) const;
  std::vector<int> classify_classes(const Batch& images) const;
  int class_of_mode(int global_mode) const { return mode_class_.at(static_cast<std::size_t>(global_mode)); }
  int num_modes() const { return static_cast<int>(mode_class_.size()); }

  void save(const std::filesystem::path& path) const;
  static ToyEmbedder load(const std::filesystem::path& path);

  friend ToyEmbedder train_toy_embedder(const LabeledImages& data, const ToyEmbedderConfig& config);

 private:
  struct Layout;
  Layout layout() const;
  void forward_row(std::span<const double> x, std::vector<double>& hidden, std::vector<double>& embedding,
                   std::vector<double>& logits) const;

  ToyEmbedderConfig config_;
  LatentShape shape_;
  std::vector<int> mode_class_;
  std::vector<std::string> attribute_names_;
  std::vector<std::vector<std::string>> attribute_values_;
  std::vector<double> params_;
};

ToyEmbedder train_toy_embedder(const LabeledImages& data, const ToyEmbedderConfig& config);

}  // namespace dmavg
