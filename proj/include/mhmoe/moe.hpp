// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Single-head MoE, the multi-head latent MoE layer and a dense MLP baseline.
//
// A single-head MoE maps rows of width d_h: route, gate, cluster the k
// replicas of each token by expert, run the experts, gather back. The
// multi-head layer projects a token with W_in, splits it into N_h sub-tokens,
// runs an independent MoE per head and projects the concatenation with W_out.
// With separate routing tokens, W_in has 2 N_h d_h rows: the first N_h d_h are
// the sub-tokens that experts process, the rest are per-head routing tokens.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mhmoe/cluster.hpp"
#include "mhmoe/errors.hpp"
#include "mhmoe/experts.hpp"
#include "mhmoe/memory.hpp"
#include "mhmoe/ops.hpp"
#include "mhmoe/rng.hpp"
#include "mhmoe/router.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

enum class ExpertBackend { naive, blocksparse };
enum class RouterKind { naive, ioaware };

inline const char* to_string(ExpertBackend b) { return b == ExpertBackend::naive ? "naive" : "blocksparse"; }
inline const char* to_string(RouterKind r) { return r == RouterKind::naive ? "naive" : "ioaware"; }

struct MoEOptions {
  ExpertBackend backend = ExpertBackend::blocksparse;
  RouterKind router = RouterKind::ioaware;
  std::size_t route_block_n = 64;
  std::size_t route_block_m = 64;
  NaiveRouteTiling naive_route{};
  ExpertTiling experts{};
};

template <typename T>
struct MoEModule {
  RouterParams<T> router;  // single head: w_r [1, d_h, N_e], bias [1, N_e]
  ExpertBank<T> bank;
  std::size_t k = 1;

  std::size_t model_dim() const { return bank.model_dim(); }
  std::size_t experts() const { return bank.experts(); }
  std::size_t hidden() const { return bank.hidden(); }

  void validate() const {
    router.validate();
    bank.validate();
    if (router.heads() != 1) throw DimensionError("MoE module router must have a single head");
    if (router.head_dim() != bank.model_dim() || router.experts() != bank.experts()) {
      throw DimensionError("router " + shape_str(router.w_r.shape()) + " does not match expert bank " +
                           shape_str(bank.w_in.shape()));
    }
    if (k == 0 || k > bank.experts()) {
      throw ConfigError("k = " + std::to_string(k) + " must be in [1, N_e = " +
                        std::to_string(bank.experts()) + "]");
    }
  }

  template <typename U>
  MoEModule<U> cast() const {
    return {router.template cast<U>(), bank.template cast<U>(), k};
  }
};

/// Everything the backward pass needs from a forward call.
template <typename T>
struct MoEForwardState {
  Tensor<T> x;        // [n, d_h]
  Tensor<T> route_x;  // [1, n, 1, d_h] routing input
  TopKResult<T> topk;
  Tensor<T> gates;  // [1, n, 1, k]
  ClusterPlan plan;
  Tensor<T> x_clustered;  // [n k, d_h]
  Tensor<T> expert_out;   // [n k, d_h]
};

template <typename T>
struct MoEGrads {
  Tensor<T> dx;          // [n, d_h]
  Tensor<T> d_route_x;   // [n, d_h]; folded into dx when routing on x itself
  Tensor<T> dw_r;        // [1, d_h, N_e]
  Tensor<T> dw_in;       // [N_e, d_e, d_h]
  Tensor<T> dw_out;
};

namespace detail {

template <typename T>
Tensor<T> as_route_input(const Tensor<T>& rows) {
  require_rank(rows, 2, "MoE input");
  return rows.reshaped({1, rows.dim(0), 1, rows.dim(1)});
}

template <typename T>
TopKResult<T> run_router(const Tensor<T>& route_x, const RouterParams<T>& params, std::size_t k,
                         LedgerLog& log, const MoEOptions& opts) {
  if (opts.router == RouterKind::naive) {
    Arena a("route_naive", log.config());
    auto r = route_naive(route_x, params, k, a, opts.naive_route);
    log.record(a);
    return r;
  }
  Arena a("route_ioaware_fwd", log.config());
  auto r = route_ioaware_fwd(route_x, params, k, opts.route_block_n, opts.route_block_m, a);
  log.record(a);
  return r;
}

template <typename T>
Tensor<T> run_experts(const Tensor<T>& xc, const ClusterPlan& plan, const ExpertBank<T>& bank,
                      LedgerLog& log, const MoEOptions& opts) {
  if (opts.backend == ExpertBackend::naive) {
    Arena a("experts_naive", log.config());
    auto y = experts_naive(xc, plan, bank, a, opts.experts);
    log.record(a);
    return y;
  }
  Arena a("experts_blocksparse", log.config());
  auto y = experts_blocksparse(xc, plan, bank, a, opts.experts);
  log.record(a);
  return y;
}

}  // namespace detail

/// o_t = sum over the k selected experts of g_{i,t} E_i(x_t). `route_x`, when
/// given, replaces x as the router input (separate routing tokens).
template <typename T>
Tensor<T> moe_forward(const MoEModule<T>& module, const Tensor<T>& x, LedgerLog& log,
                      const MoEOptions& opts = {}, const Tensor<T>* route_x = nullptr,
                      MoEForwardState<T>* state = nullptr) {
  module.validate();
  require_rank(x, 2, "moe_forward input");
  if (x.dim(1) != module.model_dim()) {
    throw DimensionError("moe_forward: input " + shape_str(x.shape()) + " vs d_h = " +
                         std::to_string(module.model_dim()));
  }
  if (route_x && route_x->shape() != x.shape()) {
    throw DimensionError("moe_forward: routing tokens " + shape_str(route_x->shape()) +
                         " do not match " + shape_str(x.shape()));
  }
  const Tensor<T> rin = detail::as_route_input(route_x ? *route_x : x);
  TopKResult<T> topk = detail::run_router(rin, module.router, module.k, log, opts);
  Tensor<T> gates = gate_from_scores(topk);
  ClusterPlan plan = build_cluster_plan(topk.indices, module.experts());
  Tensor<T> xc = gather_clustered(x, plan);
  Tensor<T> y = detail::run_experts(xc, plan, module.bank, log, opts);
  Tensor<T> out = aggregate_weighted(y, gates, plan);
  if (state) {
    *state = MoEForwardState<T>{x, rin, std::move(topk), std::move(gates), std::move(plan),
                                std::move(xc), std::move(y)};
  }
  return out;
}

/// Gradients of moe_forward through the experts, the gate softmax and the
/// selected router scores.
template <typename T>
MoEGrads<T> moe_backward(const MoEModule<T>& module, const MoEForwardState<T>& st, const Tensor<T>& d_out,
                         LedgerLog& log, const MoEOptions& opts = {}, bool separate_routing = false) {
  module.validate();
  require_shape(d_out, st.x.shape(), "moe_backward d_out");
  const std::size_t n = st.x.dim(0), D = st.x.dim(1), k = module.k;

  auto agg = aggregate_backward(st.expert_out, st.gates, st.plan, d_out);

  ExpertGrads<T> eg;
  {
    Arena a("experts_backward", log.config());
    eg = experts_backward(st.x_clustered, st.plan, module.bank, agg.d_expert_out, a, opts.experts);
    log.record(a);
  }
  Tensor<T> dx({n, D});
  for (std::size_t t = 0; t < n; ++t) {
    T* o = dx.data() + t * D;
    for (std::size_t j = 0; j < k; ++j) {
      const T* src = eg.dx.data() + st.plan.inverse_permutation[t * k + j] * D;
      for (std::size_t c = 0; c < D; ++c) o[c] += src[c];
    }
  }

  const Tensor<T> ds = gate_backward(st.gates, agg.d_gates);
  RouterGrads<T> rg;
  {
    Arena a("route_ioaware_bwd", log.config());
    rg = route_ioaware_bwd(st.route_x, module.router, st.topk, ds, a, opts.route_block_n);
    log.record(a);
  }
  Tensor<T> d_route = rg.dx.reshaped({n, D});
  if (!separate_routing) {
    add_inplace(dx, d_route);
    d_route = Tensor<T>({n, D});
  }
  return {std::move(dx), std::move(d_route), std::move(rg.dw_r), std::move(eg.dw_in), std::move(eg.dw_out)};
}

// ---------------------------------------------------------------------------
// Multi-head latent MoE
// ---------------------------------------------------------------------------

template <typename T>
struct MHLatentMoEParams {
  Tensor<T> w_in;   // [N_h d_h, d], or [2 N_h d_h, d] with separate routing
  Tensor<T> w_out;  // [d, N_h d_h]
  std::vector<MoEModule<T>> heads;
  bool separate_routing = false;

  std::size_t num_heads() const { return heads.size(); }
  std::size_t head_dim() const { return heads.empty() ? 0 : heads.front().model_dim(); }
  std::size_t model_dim() const { return w_in.dim(1); }
  std::size_t latent_dim() const { return num_heads() * head_dim(); }

  void validate() const {
    if (heads.empty()) throw ConfigError("multi-head layer needs at least one head");
    for (const auto& h : heads) {
      h.validate();
      if (h.model_dim() != head_dim()) throw DimensionError("all heads must share d_h");
    }
    require_rank(w_in, 2, "layer w_in");
    const std::size_t rows = (separate_routing ? 2 : 1) * latent_dim();
    if (w_in.dim(0) != rows) {
      throw DimensionError("layer w_in has " + std::to_string(w_in.dim(0)) + " rows, expected " +
                           std::to_string(rows));
    }
    require_shape(w_out, {model_dim(), latent_dim()}, "layer w_out");
  }

  template <typename U>
  MHLatentMoEParams<U> cast() const {
    MHLatentMoEParams<U> out{w_in.template cast<U>(), w_out.template cast<U>(), {}, separate_routing};
    for (const auto& h : heads) out.heads.push_back(h.template cast<U>());
    return out;
  }
};

template <typename T>
struct MHForwardState {
  Tensor<T> x;       // [n, d]
  Tensor<T> latent;  // [n, rows of w_in]
  Tensor<T> concat;  // [n, N_h d_h]
  std::vector<MoEForwardState<T>> heads;
};

template <typename T>
struct MHGrads {
  Tensor<T> dx;  // same shape as the layer input
  Tensor<T> dw_in;
  Tensor<T> dw_out;
  std::vector<MoEGrads<T>> heads;
};

namespace detail {

template <typename T>
Tensor<T> token_rows(const Tensor<T>& x, std::size_t d) {
  if (x.rank() < 2 || x.dim(x.rank() - 1) != d) {
    throw DimensionError("layer input " + shape_str(x.shape()) + " must end in d = " + std::to_string(d));
  }
  return x.reshaped({x.size() / d, d});
}

}  // namespace detail

/// Latent projection W_in x for rows of tokens, [n, d] -> [n, rows of W_in].
template <typename T>
Tensor<T> mh_project_in(const MHLatentMoEParams<T>& p, const Tensor<T>& rows) {
  return matmul_nt(rows, p.w_in);
}

/// Output projection of concatenated head outputs, [n, N_h d_h] -> [n, d].
template <typename T>
Tensor<T> mh_project_out(const MHLatentMoEParams<T>& p, const Tensor<T>& concat) {
  return matmul_nt(concat, p.w_out);
}

/// Sub-tokens of head h from the latent projection, [n, d_h].
template <typename T>
Tensor<T> mh_head_tokens(const MHLatentMoEParams<T>& p, const Tensor<T>& latent, std::size_t h) {
  return slice_cols(latent, h * p.head_dim(), p.head_dim());
}

/// Routing tokens of head h (separate-routing mode only), [n, d_h].
template <typename T>
Tensor<T> mh_route_tokens(const MHLatentMoEParams<T>& p, const Tensor<T>& latent, std::size_t h) {
  return slice_cols(latent, p.latent_dim() + h * p.head_dim(), p.head_dim());
}

/// Run head h's MoE on its slice of a latent projection.
template <typename T>
Tensor<T> mh_head_forward(const MHLatentMoEParams<T>& p, const Tensor<T>& latent, std::size_t h,
                          LedgerLog& log, const MoEOptions& opts = {}, MoEForwardState<T>* state = nullptr) {
  const Tensor<T> xh = mh_head_tokens(p, latent, h);
  if (p.separate_routing) {
    const Tensor<T> rh = mh_route_tokens(p, latent, h);
    return moe_forward(p.heads[h], xh, log, opts, &rh, state);
  }
  return moe_forward(p.heads[h], xh, log, opts, static_cast<const Tensor<T>*>(nullptr), state);
}

/// x: [..., d] -> [..., d].
template <typename T>
Tensor<T> mh_latentmoe_forward(const MHLatentMoEParams<T>& p, const Tensor<T>& x, LedgerLog& log,
                               const MoEOptions& opts = {}, MHForwardState<T>* state = nullptr) {
  p.validate();
  const Tensor<T> rows = detail::token_rows(x, p.model_dim());
  Tensor<T> latent = mh_project_in(p, rows);
  Tensor<T> concat({rows.dim(0), p.latent_dim()});
  std::vector<MoEForwardState<T>> head_states(state ? p.num_heads() : 0);
  for (std::size_t h = 0; h < p.num_heads(); ++h) {
    const Tensor<T> yh = mh_head_forward(p, latent, h, log, opts, state ? &head_states[h] : nullptr);
    write_cols(concat, yh, h * p.head_dim());
  }
  Tensor<T> out = mh_project_out(p, concat).reshaped(x.shape());
  if (state) *state = MHForwardState<T>{rows, std::move(latent), std::move(concat), std::move(head_states)};
  return out;
}

template <typename T>
MHGrads<T> mh_latentmoe_backward(const MHLatentMoEParams<T>& p, const MHForwardState<T>& st,
                                 const Tensor<T>& d_out, LedgerLog& log, const MoEOptions& opts = {}) {
  p.validate();
  const std::size_t n = st.x.dim(0), D = p.head_dim();
  const Tensor<T> dy = detail::token_rows(d_out, p.model_dim());
  if (dy.dim(0) != n) throw DimensionError("mh_latentmoe_backward: d_out token count mismatch");

  MHGrads<T> g;
  g.dw_out = matmul_tn(dy, st.concat);
  const Tensor<T> d_concat = matmul(dy, p.w_out);
  Tensor<T> d_latent(st.latent.shape());
  for (std::size_t h = 0; h < p.num_heads(); ++h) {
    const Tensor<T> dyh = slice_cols(d_concat, h * D, D);
    g.heads.push_back(moe_backward(p.heads[h], st.heads[h], dyh, log, opts, p.separate_routing));
    write_cols(d_latent, g.heads.back().dx, h * D);
    if (p.separate_routing) write_cols(d_latent, g.heads.back().d_route_x, p.latent_dim() + h * D);
  }
  g.dw_in = matmul_tn(d_latent, st.x);
  g.dx = matmul(d_latent, p.w_in).reshaped(d_out.shape());
  return g;
}

// ---------------------------------------------------------------------------
// Dense MLP baseline
// ---------------------------------------------------------------------------

template <typename T>
struct MLPParams {
  Tensor<T> w_in;   // [d_ff, d]
  Tensor<T> w_out;  // [d, d_ff]
};

/// W_out gelu(W_in x) for rows of x, [..., d] -> [..., d].
template <typename T>
Tensor<T> mlp_forward(const MLPParams<T>& p, const Tensor<T>& x) {
  require_rank(p.w_in, 2, "mlp w_in");
  require_shape(p.w_out, {p.w_in.dim(1), p.w_in.dim(0)}, "mlp w_out");
  const Tensor<T> rows = detail::token_rows(x, p.w_in.dim(1));
  return matmul_nt(gelu(matmul_nt(rows, p.w_in)), p.w_out).reshaped(x.shape());
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

struct InitConfig {
  double stddev = 0.02;
  std::size_t layers = 12;  // output projections are scaled by 1 / sqrt(2 L)

  double out_stddev() const { return stddev / std::sqrt(2.0 * static_cast<double>(layers)); }
};

/// Weights from N(0, stddev); zero balancing bias. `scale_out` applies the
/// depth scaling to the expert output weights (standalone MoE layers).
template <typename T>
MoEModule<T> init_moe_module(Rng& rng, std::size_t d_h, std::size_t num_experts, std::size_t d_e,
                             std::size_t k, InitConfig init = {}, bool scale_out = true) {
  MoEModule<T> m;
  m.router.w_r = randn<T>({1, d_h, num_experts}, rng, init.stddev);
  m.router.bias = Tensor<T>({1, num_experts});
  m.bank.w_in = randn<T>({num_experts, d_e, d_h}, rng, init.stddev);
  m.bank.w_out = randn<T>({num_experts, d_e, d_h}, rng, scale_out ? init.out_stddev() : init.stddev);
  m.k = k;
  m.validate();
  return m;
}

struct LayerDims {
  std::size_t d = 0;
  std::size_t heads = 1;
  std::size_t head_dim = 0;
  std::size_t experts = 0;
  std::size_t k = 1;
  std::size_t expert_hidden = 0;
  bool separate_routing = false;
};

/// Each head draws from its own forked stream, so heads share no randomness.
template <typename T>
MHLatentMoEParams<T> init_mh_latentmoe(Rng& rng, const LayerDims& dims, InitConfig init = {}) {
  if (dims.heads == 0 || dims.head_dim == 0 || dims.d == 0) throw ConfigError("layer dims must be positive");
  MHLatentMoEParams<T> p;
  p.separate_routing = dims.separate_routing;
  const std::size_t latent = dims.heads * dims.head_dim;
  p.w_in = randn<T>({(dims.separate_routing ? 2 : 1) * latent, dims.d}, rng, init.stddev);
  p.w_out = randn<T>({dims.d, latent}, rng, init.out_stddev());
  for (std::size_t h = 0; h < dims.heads; ++h) {
    Rng head_rng = rng.fork(h);
    p.heads.push_back(init_moe_module<T>(head_rng, dims.head_dim, dims.experts, dims.expert_hidden, dims.k,
                                         init, false));
  }
  p.validate();
  return p;
}

template <typename T>
MLPParams<T> init_mlp(Rng& rng, std::size_t d, std::size_t d_ff, InitConfig init = {}) {
  return {randn<T>({d_ff, d}, rng, init.stddev), randn<T>({d, d_ff}, rng, init.out_stddev())};
}

// ---------------------------------------------------------------------------
// FLOP counts (multiply-add = 2 FLOPs), projections excluded unless noted
// ---------------------------------------------------------------------------

struct FlopCount {
  std::uint64_t router = 0;
  std::uint64_t experts = 0;
  std::uint64_t projections = 0;

  std::uint64_t core() const { return router + experts; }
  std::uint64_t total() const { return router + experts + projections; }
};

/// Single MoE over n tokens of width d_h.
inline FlopCount moe_flops(std::uint64_t n, std::uint64_t d_h, std::uint64_t num_experts, std::uint64_t k,
                           std::uint64_t d_e) {
  return {2 * n * d_h * num_experts, 2 * n * k * 2 * d_h * d_e, 0};
}

inline FlopCount mh_latentmoe_flops(std::uint64_t n, std::uint64_t d, std::uint64_t heads, std::uint64_t d_h,
                                    std::uint64_t num_experts, std::uint64_t k, std::uint64_t d_e,
                                    bool separate_routing = false) {
  const FlopCount one = moe_flops(n, d_h, num_experts, k, d_e);
  const std::uint64_t latent = heads * d_h;
  return {heads * one.router, heads * one.experts, 2 * n * d * latent * (separate_routing ? 3 : 2)};
}

inline std::uint64_t mlp_flops(std::uint64_t n, std::uint64_t d, std::uint64_t d_ff) { return 2 * n * 2 * d * d_ff; }

}  // namespace mhmoe
