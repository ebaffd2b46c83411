// SPDX-License-Identifier: Apache-2.0
#include "dmavg/batch.hpp"

#include <cmath>

#include "dmavg/errors.hpp"

namespace dmavg {

Batch::Batch(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw InvalidArgument("batch data size does not match rows x cols");
  }
}

Batch Batch::from_row(std::span<const double> row) {
  return Batch(1, row.size(), std::vector<double>(row.begin(), row.end()));
}

void Batch::append_row(std::span<const double> row) {
  if (rows_ == 0 && cols_ == 0) {
    cols_ = row.size();
  }
  if (row.size() != cols_) {
    throw InvalidArgument("appended row has " + std::to_string(row.size()) + " columns, expected " +
                          std::to_string(cols_));
  }
  data_.insert(data_.end(), row.begin(), row.end());
  ++rows_;
}

Batch Batch::select(std::span<const int> indices) const {
  Batch out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= rows_) {
      throw InvalidArgument("row index " + std::to_string(idx) + " out of range [0, " + std::to_string(rows_) +
                            ")");
    }
    auto src = row(static_cast<std::size_t>(idx));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

std::vector<double> row_mean(const Batch& batch) {
  if (batch.rows() == 0) {
    throw InvalidArgument("mean of an empty batch");
  }
  std::vector<long double> acc(batch.cols(), 0.0L);
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto row = batch.row(r);
    for (std::size_t c = 0; c < acc.size(); ++c) {
      acc[c] += row[c];
    }
  }
  const auto n = static_cast<long double>(batch.rows());
  std::vector<double> mean(acc.size());
  for (std::size_t c = 0; c < acc.size(); ++c) {
    mean[c] = static_cast<double>(acc[c] / n);
  }
  return mean;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw InvalidArgument("squared_distance: size mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double mean_squared_deviation(const Batch& batch) {
  const auto mean = row_mean(batch);
  double total = 0.0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    total += squared_distance(batch.row(r), mean);
  }
  return total / static_cast<double>(batch.rows());
}

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

}  // namespace dmavg
