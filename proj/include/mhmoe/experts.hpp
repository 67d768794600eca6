// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Dropless expert computation over clustered replicas.
//
// Expert e maps a row x to gelu(x W_in[e]^T) W_out[e]. Two forward kernels
// compute it: a grouped GEMM that materializes the hidden activations, and a
// block-sparse attention kernel where queries are replicas, keys are rows of
// W_in and values are rows of W_out, with score_mod(s) = log(gelu(s) + 1).
// The attention kernel returns O' and log(l); O' * l - sum_j V_j recovers the
// expert output exactly.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "mhmoe/cluster.hpp"
#include "mhmoe/errors.hpp"
#include "mhmoe/memory.hpp"
#include "mhmoe/ops.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

template <typename T>
struct ExpertBank {
  Tensor<T> w_in;   // [N_e, d_e, d_h]
  Tensor<T> w_out;  // [N_e, d_e, d_h]

  std::size_t experts() const { return w_in.dim(0); }
  std::size_t hidden() const { return w_in.dim(1); }
  std::size_t model_dim() const { return w_in.dim(2); }

  void validate() const {
    require_rank(w_in, 3, "expert w_in");
    require_shape(w_out, w_in.shape(), "expert w_out");
  }

  template <typename U>
  ExpertBank<U> cast() const {
    return {w_in.template cast<U>(), w_out.template cast<U>()};
  }
};

template <typename T>
struct ExpertGrads {
  Tensor<T> dx;     // [replicas, d_h], clustered order
  Tensor<T> dw_in;  // [N_e, d_e, d_h]
  Tensor<T> dw_out;
};

struct ExpertTiling {
  std::size_t row_block = 64;     // replicas per tile
  std::size_t hidden_block = 64;  // expert hidden units per tile (grouped GEMM, backward)
  std::size_t key_block = 64;     // expert rows per key tile (block-sparse)
};

/// Sum of value rows per expert, [N_e, d_h]. Gathered per token to remove the
/// +1 offset from the attention output.
template <typename T>
Tensor<T> value_row_sums(const ExpertBank<T>& bank) {
  const std::size_t E = bank.experts(), H = bank.hidden(), D = bank.model_dim();
  Tensor<T> sums({E, D});
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t j = 0; j < H; ++j)
      for (std::size_t c = 0; c < D; ++c) sums[e * D + c] += bank.w_out[(e * H + j) * D + c];
  return sums;
}

namespace detail {

template <typename T>
void check_expert_inputs(const Tensor<T>& x, const ClusterPlan& plan, const ExpertBank<T>& bank) {
  bank.validate();
  require_rank(x, 2, "clustered replicas");
  if (x.dim(0) != plan.replicas()) {
    throw DimensionError("expert input has " + std::to_string(x.dim(0)) + " rows, plan has " +
                         std::to_string(plan.replicas()) + " replicas");
  }
  if (x.dim(1) != bank.model_dim()) throw DimensionError("expert input width does not match the bank");
  if (plan.experts() != bank.experts()) {
    throw ConfigError("cluster plan covers " + std::to_string(plan.experts()) + " experts, bank has " +
                      std::to_string(bank.experts()));
  }
  if (plan.expert_offsets.back() != plan.replicas()) throw ConfigError("cluster plan offsets are inconsistent");
}

}  // namespace detail

/// Grouped GEMM reference. Hidden activations go through an HBM scratch
/// buffer of [replicas, d_e] words.
template <typename T>
Tensor<T> experts_naive(const Tensor<T>& x, const ClusterPlan& plan, const ExpertBank<T>& bank,
                        Arena& arena, ExpertTiling tiling = {}) {
  detail::check_expert_inputs(x, plan, bank);
  const std::size_t D = bank.model_dim(), HD = bank.hidden(), N = plan.replicas();
  const std::size_t RB = tiling.row_block, HB = tiling.hidden_block;
  auto hidden = arena.hbm_scratch<T>({N, HD});
  Tensor<T>& h = hidden.tensor;
  Tensor<T> out({N, D});

  for (std::size_t e = 0; e < bank.experts(); ++e) {
    const std::size_t p0 = plan.segment_begin(e), p1 = plan.segment_end(e);
    // H = gelu(X W_in^T)
    for (std::size_t r0 = p0; r0 < p1; r0 += RB) {
      const std::size_t n = std::min(RB, p1 - r0);
      for (std::size_t c0 = 0; c0 < HD; c0 += HB) {
        const std::size_t hb = std::min(HB, HD - c0);
        auto xt = arena.load("x_tile", region(x, r0 * D, n, D, D));
        auto wt = arena.load("w_in_tile", region(bank.w_in, (e * HD + c0) * D, hb, D, D));
        auto ht = arena.alloc<T>("hidden_tile", n, hb);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < hb; ++j) {
            T a{0};
            for (std::size_t p = 0; p < D; ++p) a += xt(i, p) * wt(j, p);
            ht(i, j) = gelu(a);
          }
        }
        arena.store(ht, region(h, r0 * HD + c0, n, hb, HD), HbmClass::scratch);
      }
    }
    // O = H W_out
    for (std::size_t r0 = p0; r0 < p1; r0 += RB) {
      const std::size_t n = std::min(RB, p1 - r0);
      auto acc = arena.alloc<T>("out_tile", n, D, T{0});
      for (std::size_t c0 = 0; c0 < HD; c0 += HB) {
        const std::size_t hb = std::min(HB, HD - c0);
        auto ht = arena.load("hidden_tile", region(std::as_const(h), r0 * HD + c0, n, hb, HD), HbmClass::scratch);
        auto wt = arena.load("w_out_tile", region(bank.w_out, (e * HD + c0) * D, hb, D, D));
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < hb; ++j) {
            const T hv = ht(i, j);
            for (std::size_t c = 0; c < D; ++c) acc(i, c) += hv * wt(j, c);
          }
      }
      arena.store(acc, region(out, r0 * D, n, D, D));
    }
  }
  return out;
}

template <typename T>
struct BlockSparseResult {
  Tensor<T> output;           // [replicas, d_h]
  Tensor<T> o_prime;          // attention output, (gelu(s) + 1) V / l
  Tensor<T> log_denominator;  // [replicas], log(l)
};

/// Block-sparse attention form of the expert computation.
template <typename T>
BlockSparseResult<T> experts_blocksparse_detailed(const Tensor<T>& x, const ClusterPlan& plan,
                                                  const ExpertBank<T>& bank, Arena& arena,
                                                  ExpertTiling tiling = {}) {
  detail::check_expert_inputs(x, plan, bank);
  const std::size_t D = bank.model_dim(), HD = bank.hidden(), N = plan.replicas();
  const std::size_t RB = tiling.row_block, KB = tiling.key_block;
  const BlockMask mask = build_block_mask(plan, HD, RB, KB);
  const IndexTensor pos_expert({N}, plan.position_experts());
  const Tensor<T> vsum = value_row_sums(bank);
  constexpr T neg_inf = -std::numeric_limits<T>::infinity();

  auto o_prime = arena.hbm_scratch<T>({N, D});
  auto lse = arena.hbm_scratch<T>({N});

  // Streaming masked softmax with score_mod(s) = log(gelu(s) + 1).
  for (std::size_t rb = 0; rb < mask.row_blocks; ++rb) {
    const std::size_t r0 = rb * RB, n = std::min(RB, N - r0);
    auto q = arena.load("q_tile", region(x, r0 * D, n, D, D));
    auto ids = arena.load("expert_ids", region(pos_expert, r0, 1, n, n));
    auto run_max = arena.alloc<T>("row_max", n, 1, neg_inf);
    auto run_sum = arena.alloc<T>("row_sum", n, 1, T{0});
    auto acc = arena.alloc<T>("acc", n, D, T{0});
    auto z = arena.alloc<T>("score_mod", 1, KB);
    for (std::size_t kb = 0; kb < mask.key_blocks; ++kb) {
      if (!mask.at(rb, kb)) continue;
      const std::size_t j0 = kb * KB, kn = std::min(KB, bank.experts() * HD - j0);
      auto kt = arena.load("k_tile", region(bank.w_in, j0 * D, kn, D, D));
      auto vt = arena.load("v_tile", region(bank.w_out, j0 * D, kn, D, D));
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t e = static_cast<std::size_t>(ids[i]);
        const std::size_t lo = std::max(j0, e * HD), hi = std::min(j0 + kn, (e + 1) * HD);
        if (lo >= hi) continue;
        T block_max = neg_inf;
        for (std::size_t j = lo; j < hi; ++j) {
          T s{0};
          for (std::size_t p = 0; p < D; ++p) s += q(i, p) * kt(j - j0, p);
          z[j - lo] = std::log(gelu(s) + T(1));
          block_max = std::max(block_max, z[j - lo]);
        }
        const T m_new = std::max(run_max[i], block_max);
        const T rescale = run_max[i] == neg_inf ? T(0) : std::exp(run_max[i] - m_new);
        T* a = acc.row(i);
        for (std::size_t c = 0; c < D; ++c) a[c] *= rescale;
        T l = run_sum[i] * rescale;
        for (std::size_t j = lo; j < hi; ++j) {
          const T w = std::exp(z[j - lo] - m_new);
          l += w;
          const T* v = vt.row(j - j0);
          for (std::size_t c = 0; c < D; ++c) a[c] += w * v[c];
        }
        run_sum[i] = l;
        run_max[i] = m_new;
      }
    }
    auto lse_t = arena.alloc<T>("lse_tile", 1, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < D; ++c) acc(i, c) /= run_sum[i];
      lse_t[i] = run_max[i] + std::log(run_sum[i]);
    }
    arena.store(acc, region(o_prime.tensor, r0 * D, n, D, D), HbmClass::scratch);
    arena.store(lse_t, region(lse.tensor, r0, 1, n, n), HbmClass::scratch);
  }

  // Recovery: O = O' * l - sum_j V_j of each replica's expert.
  Tensor<T> out({N, D});
  for (std::size_t r0 = 0; r0 < N; r0 += RB) {
    const std::size_t n = std::min(RB, N - r0);
    auto ot = arena.load("o_prime_tile", region(std::as_const(o_prime.tensor), r0 * D, n, D, D), HbmClass::scratch);
    auto lt = arena.load("lse_tile", region(std::as_const(lse.tensor), r0, 1, n, n), HbmClass::scratch);
    auto vs = arena.load_gather<T>("value_sum_gather", n, D, [&](std::size_t r, std::size_t c) {
      return vsum[static_cast<std::size_t>(pos_expert[r0 + r]) * D + c];
    });
    for (std::size_t i = 0; i < n; ++i) {
      const T l = std::exp(lt[i]);
      for (std::size_t c = 0; c < D; ++c) ot(i, c) = ot(i, c) * l - vs(i, c);
    }
    arena.store(ot, region(out, r0 * D, n, D, D));
  }
  return {std::move(out), std::move(o_prime.tensor), std::move(lse.tensor)};
}

template <typename T>
Tensor<T> experts_blocksparse(const Tensor<T>& x, const ClusterPlan& plan, const ExpertBank<T>& bank,
                              Arena& arena, ExpertTiling tiling = {}) {
  return experts_blocksparse_detailed(x, plan, bank, arena, tiling).output;
}

/// Gradients of the expert computation. Hidden activations are recomputed per
/// tile and never written to HBM.
template <typename T>
ExpertGrads<T> experts_backward(const Tensor<T>& x, const ClusterPlan& plan, const ExpertBank<T>& bank,
                                const Tensor<T>& d_out, Arena& arena, ExpertTiling tiling = {}) {
  detail::check_expert_inputs(x, plan, bank);
  require_shape(d_out, x.shape(), "experts_backward d_out");
  const std::size_t D = bank.model_dim(), HD = bank.hidden(), N = plan.replicas();
  const std::size_t RB = tiling.row_block, HB = tiling.hidden_block;
  ExpertGrads<T> g{Tensor<T>({N, D}), Tensor<T>(bank.w_in.shape()), Tensor<T>(bank.w_out.shape())};
  arena.charge_hbm_write(2 * arena.words_for<T>(g.dw_in.size()));

  for (std::size_t e = 0; e < bank.experts(); ++e) {
    const std::size_t p0 = plan.segment_begin(e), p1 = plan.segment_end(e);
    for (std::size_t r0 = p0; r0 < p1; r0 += RB) {
      const std::size_t n = std::min(RB, p1 - r0);
      auto xt = arena.load("x_tile", region(x, r0 * D, n, D, D));
      auto gt = arena.load("d_out_tile", region(d_out, r0 * D, n, D, D));
      auto dx = arena.alloc<T>("dx_tile", n, D, T{0});
      for (std::size_t c0 = 0; c0 < HD; c0 += HB) {
        const std::size_t hb = std::min(HB, HD - c0);
        const std::size_t w_off = (e * HD + c0) * D;
        auto wi = arena.load("w_in_tile", region(bank.w_in, w_off, hb, D, D));
        auto wo = arena.load("w_out_tile", region(bank.w_out, w_off, hb, D, D));
        auto h = arena.alloc<T>("hidden_tile", n, hb);
        auto da = arena.alloc<T>("d_pre_tile", n, hb);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < hb; ++j) {
            T a{0}, dh{0};
            for (std::size_t p = 0; p < D; ++p) a += xt(i, p) * wi(j, p);
            for (std::size_t c = 0; c < D; ++c) dh += gt(i, c) * wo(j, c);
            h(i, j) = gelu(a);
            da(i, j) = dh * gelu_grad(a);
          }
        }
        auto dwi = arena.alloc<T>("dw_in_tile", hb, D, T{0});
        auto dwo = arena.alloc<T>("dw_out_tile", hb, D, T{0});
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < hb; ++j) {
            const T dav = da(i, j), hv = h(i, j);
            for (std::size_t c = 0; c < D; ++c) {
              dx(i, c) += dav * wi(j, c);
              dwi(j, c) += dav * xt(i, c);
              dwo(j, c) += hv * gt(i, c);
            }
          }
        }
        arena.accumulate(dwi, region(g.dw_in, w_off, hb, D, D));
        arena.accumulate(dwo, region(g.dw_out, w_off, hb, D, D));
      }
      arena.store(dx, region(g.dx, r0 * D, n, D, D));
    }
  }
  return g;
}

/// out[t] = sum_j gates[t, j] * expert_out[position of replica (t, j)].
/// `gates` holds k values per token in slot order; output is [tokens, d_h].
template <typename T>
Tensor<T> aggregate_weighted(const Tensor<T>& expert_out, const Tensor<T>& gates, const ClusterPlan& plan) {
  require_rank(expert_out, 2, "aggregate_weighted expert_out");
  if (expert_out.dim(0) != plan.replicas() || gates.size() != plan.replicas()) {
    throw DimensionError("aggregate_weighted: replica count mismatch");
  }
  const std::size_t D = expert_out.dim(1), k = plan.k;
  Tensor<T> out({plan.tokens(), D});
  for (std::size_t t = 0; t < plan.tokens(); ++t) {
    T* o = out.data() + t * D;
    for (std::size_t j = 0; j < k; ++j) {
      const T g = gates[t * k + j];
      const T* src = expert_out.data() + plan.inverse_permutation[t * k + j] * D;
      for (std::size_t c = 0; c < D; ++c) o[c] += g * src[c];
    }
  }
  return out;
}

template <typename T>
struct AggregateGrads {
  Tensor<T> d_expert_out;  // [replicas, d_h], clustered order
  Tensor<T> d_gates;       // same shape as gates
};

template <typename T>
AggregateGrads<T> aggregate_backward(const Tensor<T>& expert_out, const Tensor<T>& gates,
                                     const ClusterPlan& plan, const Tensor<T>& d_out) {
  const std::size_t D = expert_out.dim(1), k = plan.k;
  require_shape(d_out, {plan.tokens(), D}, "aggregate_backward d_out");
  AggregateGrads<T> g{Tensor<T>(expert_out.shape()), Tensor<T>(gates.shape())};
  for (std::size_t t = 0; t < plan.tokens(); ++t) {
    const T* dy = d_out.data() + t * D;
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t p = plan.inverse_permutation[t * k + j];
      const T gate = gates[t * k + j];
      const T* src = expert_out.data() + p * D;
      T* de = g.d_expert_out.data() + p * D;
      T dg{0};
      for (std::size_t c = 0; c < D; ++c) {
        de[c] = gate * dy[c];
        dg += dy[c] * src[c];
      }
      g.d_gates[t * k + j] = dg;
    }
  }
  return g;
}

}  // namespace mhmoe
