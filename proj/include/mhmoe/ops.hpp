// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>

#include "mhmoe/tensor.hpp"

namespace mhmoe {

// ---------------------------------------------------------------------------
// Matrix products. Every output element is accumulated over the inner index in
// increasing order starting from zero, so a row's result never depends on how
// many other rows are in the batch.
// ---------------------------------------------------------------------------

/// a[m x k] * b[k x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c.data() + i * n;
    const T* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  return c;
}

/// a[m x k] * b[n x k]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_nt lhs");
  require_rank(b, 2, "matmul_nt rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b.data() + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] = acc;
    }
  }
  return c;
}

/// a[k x m]^T * b[k x n]
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_tn lhs");
  require_rank(b, 2, "matmul_tn rhs");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul_tn: inner dimensions differ " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  }
  Tensor<T> c({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a.data() + p * m;
    const T* bp = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ap[i];
      T* ci = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  return c;
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(dst.shape()) + " vs " +
                         shape_str(src.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Rows [r0, r0 + count) of a matrix.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& m, std::size_t r0, std::size_t count) {
  require_rank(m, 2, "slice_rows");
  if (r0 + count > m.dim(0)) throw DimensionError("slice_rows: row range out of bounds");
  const std::size_t cols = m.dim(1);
  return Tensor<T>({count, cols}, std::vector<T>(m.data() + r0 * cols, m.data() + (r0 + count) * cols));
}

/// Columns [c0, c0 + width) of a matrix as a new [rows x width] tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& m, std::size_t c0, std::size_t width) {
  require_rank(m, 2, "slice_cols");
  if (c0 + width > m.dim(1)) throw DimensionError("slice_cols: column range out of bounds");
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  Tensor<T> out({rows, width});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(m.data() + r * cols + c0, width, out.data() + r * width);
  return out;
}

/// dst[:, c0:c0+width] (+)= src.
template <typename T>
void write_cols(Tensor<T>& dst, const Tensor<T>& src, std::size_t c0, bool accumulate = false) {
  require_rank(dst, 2, "write_cols dst");
  require_rank(src, 2, "write_cols src");
  const std::size_t rows = dst.dim(0), cols = dst.dim(1), width = src.dim(1);
  if (src.dim(0) != rows || c0 + width > cols) throw DimensionError("write_cols: shape mismatch");
  for (std::size_t r = 0; r < rows; ++r) {
    T* d = dst.data() + r * cols + c0;
    const T* s = src.data() + r * width;
    for (std::size_t c = 0; c < width; ++c) d[c] = accumulate ? d[c] + s[c] : s[c];
  }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Exact GELU, x * Phi(x), with Phi the standard normal CDF in erf form.
template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
  return y;
}

/// Lower bound of exact GELU over the reals (attained near x = -0.7518).
inline constexpr double kGeluMinimum = -0.16997120747988387;

/// Max-subtracted softmax along `axis`. Entries equal to -inf get weight 0.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      T sum{0};
      for (std::size_t j = 0; j < n; ++j) {
        const T v = x[base + j * inner];
        const T e = v == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(v - mx);
        y[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= sum;
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Verification helpers
// ---------------------------------------------------------------------------

/// Central finite differences of a scalar function, evaluated in FP64.
inline Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                       const Tensor<double>& x, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_grad: eps must be positive");
  Tensor<double> grad(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

template <typename A, typename B>
double max_abs_diff(const Tensor<A>& a, const Tensor<B>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <typename T>
double max_abs(const Tensor<T>& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i])));
  return m;
}

/// Normwise relative error max|a - ref| / max|ref|; falls back to the absolute
/// error when the reference is identically zero.
template <typename A, typename B>
double rel_error(const Tensor<A>& a, const Tensor<B>& ref) {
  const double diff = max_abs_diff(a, ref);
  const double scale = max_abs(ref);
  return scale > 0.0 ? diff / scale : diff;
}

}  // namespace mhmoe
