// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace dmavg {

// Channel-major image/latent geometry.
struct LatentShape {
  int channels = 3;
  int height = 32;
  int width = 32;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

// Dense row-major matrix of doubles. Rows are latents, activations, images or
// embeddings depending on context.
class Batch {
 public:
  Batch() = default;
  Batch(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Batch(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Batch from_row(std::span<const double> row);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& data() const { return data_; }

  void append_row(std::span<const double> row);
  // Rows picked in the given order.
  Batch select(std::span<const int> indices) const;

  friend bool operator==(const Batch&, const Batch&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Row mean accumulated in extended precision in index order. Identical rows
// reduce to exactly that row.
std::vector<double> row_mean(const Batch& batch);

// Mean over rows of squared distance to the row mean.
double mean_squared_deviation(const Batch& batch);

double squared_distance(std::span<const double> a, std::span<const double> b);

bool all_finite(std::span<const double> values);

}  // namespace dmavg
