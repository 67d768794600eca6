// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Independent oracles for the test suites. Everything here is written from
// the math directly in FP64 scalar loops and shares no code with the library
// kernels beyond the Tensor container.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mhmoe/tensor.hpp"

namespace oracle {

using mhmoe::Tensor;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// C = A B by the triple loop.
template <typename T>
Tensor<double> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < p; ++q) s += double(a[i * p + q]) * double(b[q * n + j]);
      c[i * n + j] = s;
    }
  return c;
}

struct Routed {
  std::vector<std::int32_t> experts;  // biased order
  std::vector<double> scores;         // unbiased
  std::vector<double> gates;
};

/// Dense scores for one sub-token, full sort on (biased desc, index asc).
/// w_r is [d_h, N_e] for the head, bias [N_e].
template <typename T>
Routed route(const T* x, const T* w_r, const T* bias, std::size_t d_h, std::size_t n_e, std::size_t k) {
  std::vector<double> s(n_e);
  for (std::size_t e = 0; e < n_e; ++e) {
    double a = 0.0;
    for (std::size_t p = 0; p < d_h; ++p) a += double(x[p]) * double(w_r[p * n_e + e]);
    s[e] = a;
  }
  std::vector<std::int32_t> order(n_e);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    const double ba = s[a] + double(bias[a]), bb = s[b] + double(bias[b]);
    return ba != bb ? ba > bb : a < b;
  });
  Routed r;
  r.experts.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  double mx = -INFINITY;
  for (auto e : r.experts) {
    r.scores.push_back(s[e]);
    mx = std::max(mx, s[e]);
  }
  double z = 0.0;
  for (double v : r.scores) z += std::exp(v - mx);
  for (double v : r.scores) r.gates.push_back(std::exp(v - mx) / z);
  return r;
}

/// E_e(x) = gelu(x W_in[e]^T) W_out[e]; banks are [N_e, d_e, d_h].
template <typename T>
std::vector<double> expert(const T* x, const T* w_in, const T* w_out, std::size_t e, std::size_t d_e,
                           std::size_t d_h) {
  std::vector<double> y(d_h, 0.0);
  for (std::size_t j = 0; j < d_e; ++j) {
    double a = 0.0;
    for (std::size_t p = 0; p < d_h; ++p) a += double(w_in[(e * d_e + j) * d_h + p]) * double(x[p]);
    const double h = gelu(a);
    for (std::size_t c = 0; c < d_h; ++c) y[c] += h * double(w_out[(e * d_e + j) * d_h + c]);
  }
  return y;
}

/// Single-head MoE over rows of x [n, d_h]; route_x (optional) feeds the router.
template <typename T>
Tensor<double> moe(const Tensor<T>& x, const Tensor<T>* route_x, const Tensor<T>& w_r, const Tensor<T>& bias,
                   const Tensor<T>& w_in, const Tensor<T>& w_out, std::size_t k) {
  const std::size_t n = x.dim(0), d_h = x.dim(1), n_e = w_in.dim(0), d_e = w_in.dim(1);
  Tensor<double> out({n, d_h});
  for (std::size_t t = 0; t < n; ++t) {
    const T* rx = (route_x ? route_x->data() : x.data()) + t * d_h;
    const Routed r = route(rx, w_r.data(), bias.data(), d_h, n_e, k);
    for (std::size_t j = 0; j < k; ++j) {
      const auto y = expert(x.data() + t * d_h, w_in.data(), w_out.data(), r.experts[j], d_e, d_h);
      for (std::size_t c = 0; c < d_h; ++c) out[t * d_h + c] += r.gates[j] * y[c];
    }
  }
  return out;
}

/// Multi-head layer straight from its definition: u = W_in x, split into
/// N_h sub-tokens, per-head MoE, concatenate, W_out. Parameters are passed
/// as raw tensors; heads are given as parallel vectors.
template <typename T>
Tensor<double> mh_layer(const Tensor<T>& x_rows, const Tensor<T>& w_in, const Tensor<T>& w_out,
                        const std::vector<const Tensor<T>*>& w_r, const std::vector<const Tensor<T>*>& bias,
                        const std::vector<const Tensor<T>*>& e_in, const std::vector<const Tensor<T>*>& e_out,
                        std::size_t k, bool separate) {
  const std::size_t n = x_rows.dim(0), d = x_rows.dim(1), heads = w_r.size(), d_h = e_in[0]->dim(2);
  const std::size_t latent = heads * d_h;
  std::vector<double> u(w_in.dim(0));
  Tensor<double> out({n, d});
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t r = 0; r < u.size(); ++r) {
      double a = 0.0;
      for (std::size_t q = 0; q < d; ++q) a += double(w_in[r * d + q]) * double(x_rows[t * d + q]);
      u[r] = a;
    }
    std::vector<double> cat(latent, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* sub = u.data() + h * d_h;
      const double* rsub = separate ? u.data() + latent + h * d_h : sub;
      std::vector<double> wr(w_r[h]->vec().begin(), w_r[h]->vec().end());
      std::vector<double> b(bias[h]->vec().begin(), bias[h]->vec().end());
      std::vector<double> wi(e_in[h]->vec().begin(), e_in[h]->vec().end());
      std::vector<double> wo(e_out[h]->vec().begin(), e_out[h]->vec().end());
      const std::size_t n_e = e_in[h]->dim(0), d_e = e_in[h]->dim(1);
      const Routed rt = route(rsub, wr.data(), b.data(), d_h, n_e, k);
      for (std::size_t j = 0; j < k; ++j) {
        const auto y = expert(sub, wi.data(), wo.data(), rt.experts[j], d_e, d_h);
        for (std::size_t c = 0; c < d_h; ++c) cat[h * d_h + c] += rt.gates[j] * y[c];
      }
    }
    for (std::size_t r = 0; r < d; ++r) {
      double a = 0.0;
      for (std::size_t c = 0; c < latent; ++c) a += double(w_out[r * latent + c]) * cat[c];
      out[t * d + r] = a;
    }
  }
  return out;
}

/// Router backward by a dense masked matrix: G[t, e] holds dL/dscore for the
/// selected experts and zero elsewhere; dW_r = X^T G, dX = G W_r^T.
/// x: [n, d_h], w_r: [d_h, N_e], indices/d_scores: [n, k].
template <typename T>
void router_backward_dense(const Tensor<T>& x, const Tensor<T>& w_r, const Tensor<std::int32_t>& indices,
                           const Tensor<T>& d_scores, Tensor<double>& dx, Tensor<double>& dw) {
  const std::size_t n = x.dim(0), d_h = x.dim(1), n_e = w_r.dim(1), k = indices.dim(1);
  Tensor<double> g({n, n_e});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < k; ++j) g[t * n_e + std::size_t(indices[t * k + j])] += double(d_scores[t * k + j]);
  dx = Tensor<double>({n, d_h});
  dw = Tensor<double>({d_h, n_e});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t p = 0; p < d_h; ++p)
      for (std::size_t e = 0; e < n_e; ++e) {
        dw[p * n_e + e] += double(x[t * d_h + p]) * g[t * n_e + e];
        dx[t * d_h + p] += g[t * n_e + e] * double(w_r[p * n_e + e]);
      }
}

/// Generalized harmonic number H_n(s) = sum_{i=1..n} i^-s.
inline double harmonic(std::size_t n, double s) {
  double h = 0.0;
  for (std::size_t i = n; i >= 1; --i) h += std::pow(double(i), -s);
  return h;
}

/// Probability mass of the first N_e/P expert ranks under Zipf(s): the share
/// of single-expert replicas that land on worker 0.
inline double zipf_worker0_share(std::size_t n_e, std::size_t p, double s) {
  return harmonic(n_e / p, s) / harmonic(n_e, s);
}

/// Bytes each worker sends in the HP dispatch round (same amount received):
/// its n/P tokens carry N_h/P * d_h words for each of the P-1 other workers.
inline std::uint64_t hp_dispatch_bytes(std::uint64_t n, std::uint64_t heads, std::uint64_t d_h, std::uint64_t p,
                                       std::uint64_t ws) {
  return (n / p) * (heads / p) * d_h * (p - 1) * ws;
}

/// Max abs difference between tensors of possibly different element types.
template <typename A, typename B>
double max_diff(const Tensor<A>& a, const Tensor<B>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename A>
double max_abs(const Tensor<A>& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i])));
  return m;
}

template <typename A, typename B>
double rel(const Tensor<A>& a, const Tensor<B>& ref) {
  const double s = oracle::max_abs(ref);
  return s > 0 ? oracle::max_diff(a, ref) / s : oracle::max_diff(a, ref);
}

}  // namespace oracle
