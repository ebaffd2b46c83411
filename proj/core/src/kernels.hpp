// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>

// Row kernels shared by the toy networks. Each output row is produced by the
// same instruction sequence regardless of batch size, so batched and
// single-row evaluations agree bitwise.
namespace dmavg::kernels {

// y[j] += sum_i x[i] * w[i * out + j]
template <class T>
inline void gemv_acc(const T* __restrict w, int in, int out, const T* __restrict x, T* __restrict y) {
  for (int i = 0; i < in; ++i) {
    const T xi = x[i];
    const T* __restrict row = w + static_cast<std::size_t>(i) * static_cast<std::size_t>(out);
    for (int j = 0; j < out; ++j) {
      y[j] += xi * row[j];
    }
  }
}

// dx[i] += sum_j w[i * out + j] * dy[j]
template <class T>
inline void gemv_t_acc(const T* __restrict w, int in, int out, const T* __restrict dy, T* __restrict dx) {
  for (int i = 0; i < in; ++i) {
    const T* __restrict row = w + static_cast<std::size_t>(i) * static_cast<std::size_t>(out);
    T s = 0;
#pragma omp simd reduction(+ : s)
    for (int j = 0; j < out; ++j) {
      s += row[j] * dy[j];
    }
    dx[i] += s;
  }
}

// dw[i * out + j] += x[i] * dy[j]
template <class T>
inline void outer_acc(const T* __restrict x, int in, int out, const T* __restrict dy, T* __restrict dw) {
  for (int i = 0; i < in; ++i) {
    const T xi = x[i];
    T* __restrict row = dw + static_cast<std::size_t>(i) * static_cast<std::size_t>(out);
    for (int j = 0; j < out; ++j) {
      row[j] += xi * dy[j];
    }
  }
}

template <class T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
inline void silu(const T* __restrict pre, int n, T* __restrict out) {
  for (int i = 0; i < n; ++i) {
    out[i] = pre[i] * sigmoid(pre[i]);
  }
}

// grad_pre[i] = grad_out[i] * silu'(pre[i])
template <class T>
inline void silu_backward(const T* __restrict pre, const T* __restrict grad_out, int n, T* __restrict grad_pre) {
  for (int i = 0; i < n; ++i) {
    const T s = sigmoid(pre[i]);
    grad_pre[i] = grad_out[i] * s * (T(1) + pre[i] * (T(1) - s));
  }
}

}  // namespace dmavg::kernels
