// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Per-token reference for the multi-head layer: every head is evaluated
// directly from its definition on hand-split sub-tokens, with a dense score
// vector, a full sort, and per-token expert evaluation. No tiling, clustering
// or traffic accounting.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "mhmoe/moe.hpp"

namespace mhmoe::reference {

template <typename T>
struct TokenRoute {
  std::vector<std::size_t> experts;  // selected, in biased order
  std::vector<T> scores;             // unbiased
  std::vector<T> gates;
};

/// Dense scores, full sort by (biased score desc, index asc).
template <typename T>
TokenRoute<T> route_token(const MoEModule<T>& m, const T* x) {
  const std::size_t D = m.model_dim(), E = m.experts();
  std::vector<T> s(E), biased(E);
  for (std::size_t e = 0; e < E; ++e) {
    T acc{0};
    for (std::size_t p = 0; p < D; ++p) acc += x[p] * m.router.w_r[p * E + e];
    s[e] = acc;
    biased[e] = acc + m.router.bias[e];
  }
  std::vector<std::size_t> order(E);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return biased[a] > biased[b]; });
  TokenRoute<T> r;
  r.experts.assign(order.begin(), order.begin() + m.k);
  for (auto e : r.experts) r.scores.push_back(s[e]);
  const T mx = *std::max_element(r.scores.begin(), r.scores.end());
  T sum{0};
  for (auto v : r.scores) sum += std::exp(v - mx);
  for (auto v : r.scores) r.gates.push_back(std::exp(v - mx) / sum);
  return r;
}

/// gelu(W_in[e] x) and its pre-activation.
template <typename T>
void expert_hidden(const ExpertBank<T>& b, std::size_t e, const T* x, std::vector<T>& pre, std::vector<T>& h) {
  const std::size_t D = b.model_dim(), H = b.hidden();
  pre.assign(H, T{0});
  h.assign(H, T{0});
  for (std::size_t j = 0; j < H; ++j) {
    T a{0};
    for (std::size_t p = 0; p < D; ++p) a += b.w_in[(e * H + j) * D + p] * x[p];
    pre[j] = a;
    h[j] = gelu(a);
  }
}

template <typename T>
Tensor<T> moe_forward(const MoEModule<T>& m, const Tensor<T>& x, const Tensor<T>* route_x = nullptr) {
  const std::size_t n = x.dim(0), D = x.dim(1), H = m.hidden();
  Tensor<T> out({n, D});
  std::vector<T> pre, h;
  for (std::size_t t = 0; t < n; ++t) {
    const auto r = route_token(m, (route_x ? *route_x : x).data() + t * D);
    for (std::size_t j = 0; j < m.k; ++j) {
      const std::size_t e = r.experts[j];
      expert_hidden(m.bank, e, x.data() + t * D, pre, h);
      for (std::size_t c = 0; c < D; ++c) {
        T y{0};
        for (std::size_t q = 0; q < H; ++q) y += h[q] * m.bank.w_out[(e * H + q) * D + c];
        out[t * D + c] += r.gates[j] * y;
      }
    }
  }
  return out;
}

template <typename T>
MoEGrads<T> moe_backward(const MoEModule<T>& m, const Tensor<T>& x, const Tensor<T>* route_x,
                         const Tensor<T>& d_out) {
  const std::size_t n = x.dim(0), D = x.dim(1), H = m.hidden(), E = m.experts();
  const Tensor<T>& rx = route_x ? *route_x : x;
  MoEGrads<T> g{Tensor<T>({n, D}), Tensor<T>({n, D}), Tensor<T>(m.router.w_r.shape()),
                Tensor<T>(m.bank.w_in.shape()), Tensor<T>(m.bank.w_out.shape())};
  std::vector<T> pre, h, dg(m.k);
  for (std::size_t t = 0; t < n; ++t) {
    const T* xt = x.data() + t * D;
    const T* dy = d_out.data() + t * D;
    const auto r = route_token(m, rx.data() + t * D);
    for (std::size_t j = 0; j < m.k; ++j) {
      const std::size_t e = r.experts[j];
      expert_hidden(m.bank, e, xt, pre, h);
      T dgj{0};
      for (std::size_t c = 0; c < D; ++c) {
        T yc{0};
        for (std::size_t q = 0; q < H; ++q) yc += h[q] * m.bank.w_out[(e * H + q) * D + c];
        dgj += dy[c] * yc;
      }
      dg[j] = dgj;
      const T gate = r.gates[j];
      for (std::size_t q = 0; q < H; ++q) {
        T dh{0};
        for (std::size_t c = 0; c < D; ++c) {
          dh += gate * dy[c] * m.bank.w_out[(e * H + q) * D + c];
          g.dw_out[(e * H + q) * D + c] += h[q] * gate * dy[c];
        }
        const T da = dh * gelu_grad(pre[q]);
        for (std::size_t p = 0; p < D; ++p) {
          g.dw_in[(e * H + q) * D + p] += da * xt[p];
          g.dx[t * D + p] += da * m.bank.w_in[(e * H + q) * D + p];
        }
      }
    }
    T dot{0};
    for (std::size_t j = 0; j < m.k; ++j) dot += r.gates[j] * dg[j];
    Tensor<T>& d_rx = route_x ? g.d_route_x : g.dx;
    for (std::size_t j = 0; j < m.k; ++j) {
      const T ds = r.gates[j] * (dg[j] - dot);
      const std::size_t e = r.experts[j];
      for (std::size_t p = 0; p < D; ++p) {
        d_rx[t * D + p] += ds * m.router.w_r[p * E + e];
        g.dw_r[p * E + e] += ds * rx[t * D + p];
      }
    }
  }
  return g;
}

/// Per-head decomposition: split W_in x by hand, run each head on its own,
/// concatenate and project.
template <typename T>
Tensor<T> mh_latentmoe_forward(const MHLatentMoEParams<T>& p, const Tensor<T>& x) {
  p.validate();
  const std::size_t d = p.model_dim(), Dh = p.head_dim(), NH = p.num_heads(), L = p.latent_dim();
  const std::size_t n = x.size() / d;
  Tensor<T> concat({n, L});
  for (std::size_t h = 0; h < NH; ++h) {
    Tensor<T> xh({n, Dh}), rh({n, Dh});
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t c = 0; c < Dh; ++c) {
        T a{0}, b{0};
        for (std::size_t q = 0; q < d; ++q) {
          a += p.w_in[(h * Dh + c) * d + q] * x[t * d + q];
          if (p.separate_routing) b += p.w_in[(L + h * Dh + c) * d + q] * x[t * d + q];
        }
        xh[t * Dh + c] = a;
        rh[t * Dh + c] = b;
      }
    }
    const Tensor<T> yh = moe_forward(p.heads[h], xh, p.separate_routing ? &rh : nullptr);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < Dh; ++c) concat[t * L + h * Dh + c] = yh[t * Dh + c];
  }
  Tensor<T> out(x.shape());
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t r = 0; r < d; ++r) {
      T a{0};
      for (std::size_t c = 0; c < L; ++c) a += p.w_out[r * L + c] * concat[t * L + c];
      out[t * d + r] = a;
    }
  return out;
}

template <typename T>
MHGrads<T> mh_latentmoe_backward(const MHLatentMoEParams<T>& p, const Tensor<T>& x, const Tensor<T>& d_out) {
  p.validate();
  const std::size_t d = p.model_dim(), Dh = p.head_dim(), L = p.latent_dim();
  const Tensor<T> rows = x.reshaped({x.size() / d, d});
  const Tensor<T> dy = d_out.reshaped(rows.shape());
  const Tensor<T> latent = matmul_nt(rows, p.w_in);
  Tensor<T> concat({rows.dim(0), L});
  std::vector<Tensor<T>> xs, rs;
  for (std::size_t h = 0; h < p.num_heads(); ++h) {
    xs.push_back(slice_cols(latent, h * Dh, Dh));
    rs.push_back(p.separate_routing ? slice_cols(latent, L + h * Dh, Dh) : Tensor<T>());
    write_cols(concat, moe_forward(p.heads[h], xs[h], p.separate_routing ? &rs[h] : nullptr), h * Dh);
  }
  MHGrads<T> g;
  g.dw_out = matmul_tn(dy, concat);
  const Tensor<T> d_concat = matmul(dy, p.w_out);
  Tensor<T> d_latent(latent.shape());
  for (std::size_t h = 0; h < p.num_heads(); ++h) {
    g.heads.push_back(moe_backward(p.heads[h], xs[h], p.separate_routing ? &rs[h] : nullptr,
                                   slice_cols(d_concat, h * Dh, Dh)));
    write_cols(d_latent, g.heads.back().dx, h * Dh);
    if (p.separate_routing) write_cols(d_latent, g.heads.back().d_route_x, L + h * Dh);
  }
  g.dw_in = matmul_tn(d_latent, rows);
  g.dx = matmul(d_latent, p.w_in).reshaped(d_out.shape());
  return g;
}

}  // namespace mhmoe::reference
