// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Routing: a dense reference router, the IO-aware streaming forward pass, the
// sparse IO-aware backward pass, gating and aux-loss-free load balancing.
//
// Sub-tokens are laid out as [B, T, N_h, d_h], router weights as
// [N_h, d_h, N_e] and the balancing bias as [N_h, N_e]. The bias takes part in
// expert selection only; returned scores never include it.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <utility>
#include <vector>

#include "mhmoe/errors.hpp"
#include "mhmoe/memory.hpp"
#include "mhmoe/packing.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

template <typename T>
struct RouterParams {
  Tensor<T> w_r;   // [N_h, d_h, N_e]
  Tensor<T> bias;  // [N_h, N_e]

  std::size_t heads() const { return w_r.dim(0); }
  std::size_t head_dim() const { return w_r.dim(1); }
  std::size_t experts() const { return w_r.dim(2); }

  void validate() const {
    require_rank(w_r, 3, "router weights");
    require_shape(bias, {heads(), experts()}, "router bias");
  }

  template <typename U>
  RouterParams<U> cast() const {
    return {w_r.template cast<U>(), bias.template cast<U>()};
  }
};

template <typename T>
struct TopKResult {
  Tensor<T> scores;     // [B, T, N_h, k], bias removed, listed in biased order
  IndexTensor indices;  // [B, T, N_h, k]

  std::size_t k() const { return scores.dim(3); }
};

template <typename T>
struct RouterGrads {
  Tensor<T> dx;    // [B, T, N_h, d_h]
  Tensor<T> dw_r;  // [N_h, d_h, N_e]
};

namespace detail {

struct RouteDims {
  std::size_t batch, tokens, heads, head_dim, experts, k;
};

template <typename T>
RouteDims route_dims(const Tensor<T>& x, const RouterParams<T>& params, std::size_t k) {
  params.validate();
  require_rank(x, 4, "router input");
  if (x.dim(2) != params.heads() || x.dim(3) != params.head_dim()) {
    throw DimensionError("router input " + shape_str(x.shape()) + " does not match weights " +
                         shape_str(params.w_r.shape()));
  }
  if (k == 0 || k > params.experts()) {
    throw ConfigError("router: k = " + std::to_string(k) + " must be in [1, N_e = " +
                      std::to_string(params.experts()) + "]");
  }
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), params.experts(), k};
}

inline std::size_t row_offset(const RouteDims& d, std::size_t b, std::size_t t, std::size_t h,
                              std::size_t width) {
  return ((b * d.tokens + t) * d.heads + h) * width;
}

}  // namespace detail

/// Default tiling for the dense reference router's score GEMM.
struct NaiveRouteTiling {
  std::size_t block_n = 64;
  std::size_t block_m = 64;
};

/// Dense reference: materializes S = X W_r + b in HBM, then selects the top-k
/// per row by (biased score desc, expert index asc).
template <typename T>
TopKResult<T> route_naive(const Tensor<T>& x, const RouterParams<T>& params, std::size_t k,
                          Arena& arena, NaiveRouteTiling tiling = {}) {
  const auto d = detail::route_dims(x, params, k);
  const std::size_t D = d.head_dim, E = d.experts, H = d.heads;
  auto scores = arena.hbm_scratch<T>({d.batch, d.tokens, H, E});
  Tensor<T>& s = scores.tensor;

  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t0 = 0; t0 < d.tokens; t0 += tiling.block_n) {
        const std::size_t n = std::min(tiling.block_n, d.tokens - t0);
        for (std::size_t e0 = 0; e0 < E; e0 += tiling.block_m) {
          const std::size_t m = std::min(tiling.block_m, E - e0);
          auto xt = arena.load("x_tile", region(x, detail::row_offset(d, b, t0, h, D), n, D, H * D));
          auto wt = arena.load("w_r_tile", region(params.w_r, h * D * E + e0, D, m, E));
          auto bt = arena.load("bias_tile", region(params.bias, h * E + e0, 1, m, m));
          auto st = arena.alloc<T>("score_tile", n, m);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
              T acc{0};
              for (std::size_t p = 0; p < D; ++p) acc += xt(i, p) * wt(p, j);
              st(i, j) = acc + bt[j];
            }
          }
          arena.store(st, region(s, detail::row_offset(d, b, t0, h, E) + e0, n, m, H * E),
                      HbmClass::scratch);
        }
      }
    }
  }

  TopKResult<T> out{Tensor<T>({d.batch, d.tokens, H, k}), IndexTensor({d.batch, d.tokens, H, k})};
  std::vector<std::uint32_t> order(E);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      auto bias_row = arena.load("bias_row", region(params.bias, h * E, 1, E, E));
      for (std::size_t t = 0; t < d.tokens; ++t) {
        const std::size_t off = detail::row_offset(d, b, t, h, E);
        auto row = arena.load("score_row", region(std::as_const(s), off, 1, E, E), HbmClass::scratch);
        for (std::size_t e = 0; e < E; ++e) {
          if (std::isnan(row[e])) throw NumericError("route_naive: NaN routing score");
        }
        std::iota(order.begin(), order.end(), 0u);
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [&](std::uint32_t a, std::uint32_t c) {
                            return row[a] > row[c] || (row[a] == row[c] && a < c);
                          });
        auto st = arena.alloc<T>("topk_scores", 1, k);
        auto it = arena.alloc<std::int32_t>("topk_indices", 1, k);
        for (std::size_t j = 0; j < k; ++j) {
          st[j] = row[order[j]] - bias_row[order[j]];
          it[j] = static_cast<std::int32_t>(order[j]);
        }
        const std::size_t out_off = detail::row_offset(d, b, t, h, k);
        arena.store(st, region(out.scores, out_off, 1, k, k));
        arena.store(it, region(out.indices, out_off, 1, k, k));
      }
    }
  }
  return out;
}

/// IO-aware forward pass. Streams expert blocks through on-chip memory and
/// keeps a running top-k of packed (score, index) keys per token, so the full
/// score tensor never reaches HBM.
template <typename T>
TopKResult<T> route_ioaware_fwd(const Tensor<T>& x, const RouterParams<T>& params, std::size_t k,
                                std::size_t block_n, std::size_t block_m, Arena& arena) {
  using Key = PackedKey<T>;
  const auto d = detail::route_dims(x, params, k);
  if (block_n == 0 || block_m == 0) throw ConfigError("route_ioaware_fwd: block sizes must be >= 1");
  const std::size_t D = d.head_dim, E = d.experts, H = d.heads;

  TopKResult<T> out{Tensor<T>({d.batch, d.tokens, H, k}), IndexTensor({d.batch, d.tokens, H, k})};
  std::vector<Key> candidates;
  candidates.reserve(2 * k);

  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t t0 = 0; t0 < d.tokens; t0 += block_n) {
      const std::size_t n = std::min(block_n, d.tokens - t0);
      for (std::size_t h = 0; h < H; ++h) {
        auto xt = arena.load("x_block", region(x, detail::row_offset(d, b, t0, h, D), n, D, H * D));
        // Key 0 is below every packed real score, so it marks an empty slot.
        auto acc = arena.alloc<Key>("topk_accumulator", n, k, Key{0});

        for (std::size_t e0 = 0; e0 < E; e0 += block_m) {
          const std::size_t m = std::min(block_m, E - e0);
          const std::size_t local_k = std::min(k, m);
          auto wt = arena.load("w_r_block", region(params.w_r, h * D * E + e0, D, m, E));
          auto bt = arena.load("bias_block", region(params.bias, h * E + e0, 1, m, m));
          auto packed = arena.alloc<Key>("packed_block", n, m);
          {
            auto st = arena.alloc<T>("score_block", n, m);
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t j = 0; j < m; ++j) {
                T s{0};
                for (std::size_t p = 0; p < D; ++p) s += xt(i, p) * wt(p, j);
                st(i, j) = s + bt[j];
              }
            }
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < m; ++j)
                packed(i, j) = pack_score_index<T>(st(i, j), static_cast<std::uint32_t>(e0 + j));
          }
          for (std::size_t i = 0; i < n; ++i) {
            Key* row = packed.row(i);
            std::partial_sort(row, row + local_k, row + m, std::greater<Key>{});
            candidates.assign(acc.row(i), acc.row(i) + k);
            candidates.insert(candidates.end(), row, row + local_k);
            std::sort(candidates.begin(), candidates.end(), std::greater<Key>{});
            std::copy_n(candidates.begin(), k, acc.row(i));
          }
        }

        auto top_scores = arena.alloc<T>("topk_scores", n, k);
        auto top_idx = arena.alloc<std::int32_t>("topk_indices", n, k);
        for (std::size_t i = 0; i < n * k; ++i) {
          const auto [s, e] = unpack_score_index<T>(acc[i]);
          top_scores[i] = s;
          top_idx[i] = static_cast<std::int32_t>(e);
        }
        auto bias_sel = arena.load_gather<T>("bias_gather", n, k, [&](std::size_t r, std::size_t c) {
          return params.bias[h * E + static_cast<std::size_t>(top_idx(r, c))];
        });
        for (std::size_t i = 0; i < n * k; ++i) top_scores[i] -= bias_sel[i];

        const std::size_t out_off = detail::row_offset(d, b, t0, h, k);
        arena.store(top_scores, region(out.scores, out_off, n, k, H * k));
        arena.store(top_idx, region(out.indices, out_off, n, k, H * k));
      }
    }
  }
  return out;
}

/// IO-aware backward pass. Only the k selected columns of W_r are touched per
/// token; every other column of dW_r stays exactly zero and the bias gets no
/// gradient.
template <typename T>
RouterGrads<T> route_ioaware_bwd(const Tensor<T>& x, const RouterParams<T>& params,
                                 const TopKResult<T>& topk, const Tensor<T>& d_scores,
                                 Arena& arena, std::size_t block_n = 64) {
  const std::size_t k = topk.indices.rank() == 4 ? topk.indices.dim(3) : 0;
  const auto d = detail::route_dims(x, params, k);
  if (block_n == 0) throw ConfigError("route_ioaware_bwd: block size must be >= 1");
  const std::size_t D = d.head_dim, E = d.experts, H = d.heads;
  const Shape topk_shape{d.batch, d.tokens, H, k};
  require_shape(topk.indices, topk_shape, "route_ioaware_bwd indices");
  require_shape(d_scores, topk_shape, "route_ioaware_bwd d_scores");
  for (std::size_t i = 0; i < topk.indices.size(); ++i) {
    if (topk.indices[i] < 0 || static_cast<std::size_t>(topk.indices[i]) >= E) {
      throw ConfigError("route_ioaware_bwd: expert index " + std::to_string(topk.indices[i]) +
                        " out of range [0, " + std::to_string(E) + ")");
    }
  }

  RouterGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(params.w_r.shape())};
  arena.charge_hbm_write(arena.words_for<T>(g.dw_r.size()));

  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t t0 = 0; t0 < d.tokens; t0 += block_n) {
      const std::size_t n = std::min(block_n, d.tokens - t0);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t x_off = detail::row_offset(d, b, t0, h, D);
        const std::size_t k_off = detail::row_offset(d, b, t0, h, k);
        auto xt = arena.load("x_block", region(x, x_off, n, D, H * D));
        auto dx_acc = arena.alloc<T>("dx_accumulator", n, D, T{0});
        for (std::size_t i = 0; i < k; ++i) {
          auto ids = arena.load("expert_ids", region(topk.indices, k_off + i, n, 1, H * k));
          auto ds = arena.load("d_scores", region(d_scores, k_off + i, n, 1, H * k));
          auto wg = arena.load_gather<T>("w_r_gather", n, D, [&](std::size_t r, std::size_t c) {
            return params.w_r[(h * D + c) * E + static_cast<std::size_t>(ids[r])];
          });
          auto contrib = arena.alloc<T>("dw_contribution", n, D);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < D; ++c) {
              dx_acc(r, c) += ds[r] * wg(r, c);
              contrib(r, c) = xt(r, c) * ds[r];
            }
          }
          for (std::size_t r = 0; r < n; ++r) {
            arena.accumulate(contrib, r * D,
                             region(g.dw_r, h * D * E + static_cast<std::size_t>(ids[r]), D, 1, E));
          }
        }
        arena.store(dx_acc, region(g.dx, x_off, n, D, H * D));
      }
    }
  }
  return g;
}

/// Gating values: softmax over the k selected (unbiased) scores.
template <typename T>
Tensor<T> gate_from_scores(const TopKResult<T>& topk) {
  const Tensor<T>& s = topk.scores;
  const std::size_t k = s.dim(s.rank() - 1);
  Tensor<T> g(s.shape());
  for (std::size_t base = 0; base < s.size(); base += k) {
    T mx = s[base];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, s[base + j]);
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) sum += (g[base + j] = std::exp(s[base + j] - mx));
    for (std::size_t j = 0; j < k; ++j) g[base + j] /= sum;
  }
  return g;
}

/// Vector-Jacobian product of gate_from_scores.
template <typename T>
Tensor<T> gate_backward(const Tensor<T>& gates, const Tensor<T>& d_gates) {
  if (gates.shape() != d_gates.shape()) throw DimensionError("gate_backward: shape mismatch");
  const std::size_t k = gates.dim(gates.rank() - 1);
  Tensor<T> ds(gates.shape());
  for (std::size_t base = 0; base < gates.size(); base += k) {
    T dot{0};
    for (std::size_t j = 0; j < k; ++j) dot += gates[base + j] * d_gates[base + j];
    for (std::size_t j = 0; j < k; ++j) ds[base + j] = gates[base + j] * (d_gates[base + j] - dot);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Aux-loss-free global load balancing
// ---------------------------------------------------------------------------

struct LoadBalanceState {
  Tensor<std::int64_t> expert_load;  // [N_h, N_e], tokens routed this step
  double update_rate = 1e-3;

  std::size_t heads() const { return expert_load.dim(0); }
  std::size_t experts() const { return expert_load.dim(1); }
};

/// Tally per-expert load over every token of the step.
template <typename T>
LoadBalanceState tally_expert_load(const TopKResult<T>& topk, std::size_t num_experts,
                                   double update_rate = 1e-3) {
  const std::size_t H = topk.indices.dim(2), k = topk.indices.dim(3);
  LoadBalanceState st{Tensor<std::int64_t>({H, num_experts}), update_rate};
  for (std::size_t i = 0; i < topk.indices.size(); ++i) {
    const std::size_t h = (i / k) % H;
    st.expert_load[h * num_experts + static_cast<std::size_t>(topk.indices[i])] += 1;
  }
  return st;
}

/// Merge tallies from several steps or workers.
inline void add_load(LoadBalanceState& into, const LoadBalanceState& other) {
  if (into.expert_load.shape() != other.expert_load.shape()) {
    throw DimensionError("add_load: shape mismatch");
  }
  for (std::size_t i = 0; i < into.expert_load.size(); ++i) into.expert_load[i] += other.expert_load[i];
}

/// bias[e] -= rate * sign(load[e] - mean_load), per head.
template <typename T>
RouterParams<T> update_balance_bias(const LoadBalanceState& state, const RouterParams<T>& params) {
  require_shape(state.expert_load, params.bias.shape(), "update_balance_bias load");
  RouterParams<T> out = params;
  const std::size_t H = state.heads(), E = state.experts();
  for (std::size_t h = 0; h < H; ++h) {
    std::int64_t total = 0;
    for (std::size_t e = 0; e < E; ++e) total += state.expert_load[h * E + e];
    for (std::size_t e = 0; e < E; ++e) {
      // load - mean compared exactly as load * E - total.
      const std::int64_t diff = state.expert_load[h * E + e] * static_cast<std::int64_t>(E) - total;
      const int sign = (diff > 0) - (diff < 0);
      out.bias[h * E + e] -= static_cast<T>(state.update_rate * sign);
    }
  }
  return out;
}

/// Largest max/mean expert-load ratio over heads.
inline double load_imbalance_ratio(const LoadBalanceState& state) {
  const std::size_t H = state.heads(), E = state.experts();
  double worst = 0.0;
  for (std::size_t h = 0; h < H; ++h) {
    std::int64_t total = 0, mx = 0;
    for (std::size_t e = 0; e < E; ++e) {
      total += state.expert_load[h * E + e];
      mx = std::max(mx, state.expert_load[h * E + e]);
    }
    if (total > 0) worst = std::max(worst, static_cast<double>(mx) * static_cast<double>(E) / static_cast<double>(total));
  }
  return worst;
}

}  // namespace mhmoe
