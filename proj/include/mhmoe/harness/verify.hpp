// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Runtime equivalence / gradient / property suite behind `mhmoe verify`.
//
// Each check compares a kernel against an independent formulation (dense
// reference, FP64 finite differences, single-worker run) and yields one
// record per seeded instance.

#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mhmoe/cluster.hpp"
#include "mhmoe/csv.hpp"
#include "mhmoe/experts.hpp"
#include "mhmoe/harness/bundle.hpp"
#include "mhmoe/harness/config.hpp"
#include "mhmoe/moe.hpp"
#include "mhmoe/ops.hpp"
#include "mhmoe/parallel.hpp"
#include "mhmoe/reference.hpp"
#include "mhmoe/rng.hpp"
#include "mhmoe/router.hpp"

namespace mhmoe::harness {

struct CheckRecord {
  std::string module;
  std::string check;
  std::uint64_t seed = 0;
  double max_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return std::isfinite(max_error) && max_error <= tolerance; }
};

struct VerifyOptions {
  bool inject_fault = false;  // perturb the block-sparse expert output by 1e-3
};

namespace verify_detail {

inline constexpr double kFault = 1e-3;

template <typename T>
void inject(Tensor<T>& y, const VerifyOptions& o) {
  if (o.inject_fault && y.size() > 0) y[0] += static_cast<T>(kFault * std::max(1.0, max_abs(y)));
}

template <typename T>
RouterParams<T> random_router(Rng& rng, std::size_t heads, std::size_t d_h, std::size_t experts, bool bias) {
  RouterParams<T> p{randn<T>({heads, d_h, experts}, rng, 1.0 / std::sqrt(double(d_h))),
                    Tensor<T>({heads, experts})};
  if (bias) p.bias = randn<T>({heads, experts}, rng, 0.1);
  return p;
}

template <typename T>
ExpertBank<T> random_bank(Rng& rng, std::size_t experts, std::size_t d_e, std::size_t d_h) {
  return {randn<T>({experts, d_e, d_h}, rng, 1.0 / std::sqrt(double(d_h))),
          randn<T>({experts, d_e, d_h}, rng, 1.0 / std::sqrt(double(d_e)))};
}

/// Layer with unit-scale weights; balancing biases are randomized so routing
/// is exercised away from zero bias.
template <typename T>
MHLatentMoEParams<T> random_layer(Rng& rng, std::size_t d, std::size_t heads, std::size_t d_h, std::size_t experts,
                                  std::size_t k, std::size_t d_e, bool separate) {
  MHLatentMoEParams<T> p;
  p.separate_routing = separate;
  p.w_in = randn<T>({(separate ? 2 : 1) * heads * d_h, d}, rng, 1.0 / std::sqrt(double(d)));
  p.w_out = randn<T>({d, heads * d_h}, rng, 1.0 / std::sqrt(double(heads * d_h)));
  for (std::size_t h = 0; h < heads; ++h) {
    MoEModule<T> m{random_router<T>(rng, 1, d_h, experts, true), random_bank<T>(rng, experts, d_e, d_h), k};
    p.heads.push_back(std::move(m));
  }
  p.validate();
  return p;
}

inline double triple_loop_error(Rng& rng) {
  const std::size_t m = 1 + rng.below(9), p = 1 + rng.below(9), n = 1 + rng.below(9);
  const Tensor<double> a = randn<double>({m, p}, rng), b = randn<double>({p, n}, rng);
  Tensor<double> ref({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t q = 0; q < p; ++q) ref[i * n + j] += a[i * p + q] * b[q * n + j];
  return rel_error(matmul(a, b), ref);
}

/// Sum of c * selected scores; f64 routing recomputed from scratch.
inline double route_objective(const Tensor<double>& x, const RouterParams<double>& p, std::size_t k,
                              const Tensor<double>& c) {
  Arena a = Arena::unmetered("route_naive");
  const auto r = route_naive(x, p, k, a);
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * r.scores[i];
  return s;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

inline double fd_rel(const Tensor<double>& analytic, const Tensor<double>& numeric) {
  return max_abs_diff(analytic, numeric) / std::max(1e-8, max_abs(numeric));
}

}  // namespace verify_detail

/// Every check for one seeded instance.
inline void verify_instance(std::uint64_t seed, const VerifyOptions& opt, std::vector<CheckRecord>& out) {
  using namespace verify_detail;
  Rng rng(seed);
  auto add = [&](const char* module, const char* check, double err, double tol) {
    out.push_back({module, check, seed, err, tol});
  };

  // tensor_core
  add("tensor_core", "matmul_vs_triple_loop", triple_loop_error(rng), 1e-12);
  {
    const Tensor<double> x = randn<double>({5, 7}, rng, 3.0);
    const Tensor<double> s = softmax(x, 1);
    double err = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 7; ++c) sum += s[r * 7 + c];
      err = std::max(err, std::abs(sum - 1.0));
    }
    add("tensor_core", "softmax_rows_sum_to_one", err, 1e-12);
  }

  // Random routing problem.
  const std::size_t ks[] = {1, 2, 4, 8};
  const std::size_t k = ks[rng.below(4)];
  const std::size_t B = 1 + rng.below(2), T = 4 + rng.below(60), H = 1 + rng.below(2);
  const std::size_t D = 4 << rng.below(3), E = k + rng.below(40);
  const Tensor<float> x = randn<float>({B, T, H, D}, rng);
  const RouterParams<float> rp = random_router<float>(rng, H, D, E, true);
  Arena naive_arena = Arena::unmetered("route_naive");
  const auto ref = route_naive(x, rp, k, naive_arena);

  {
    double mism = 0.0, score_err = 0.0;
    for (std::size_t bm : {std::size_t{1}, k, std::size_t{16}, std::size_t{64}, E}) {
      Arena a = Arena::unmetered("route_ioaware_fwd");
      const auto r = route_ioaware_fwd(x, rp, k, 16, bm, a);
      for (std::size_t i = 0; i < r.indices.size(); ++i) mism += r.indices[i] != ref.indices[i];
      score_err = std::max(score_err, max_abs_diff(r.scores, ref.scores));
    }
    add("router", "ioaware_indices_match_naive", mism, 0.0);
    add("router", "ioaware_scores_match_naive", score_err, 1e-6);
  }

  // tiered_memory: metering never changes results, and tiles beyond the
  // capacity are refused.
  {
    Arena metered("route_ioaware_fwd", TierConfig{65536, 4});
    Arena free_arena = Arena::unmetered("route_ioaware_fwd");
    const auto a = route_ioaware_fwd(x, rp, k, 8, 8, metered);
    const auto b = route_ioaware_fwd(x, rp, k, 8, 8, free_arena);
    add("tiered_memory", "metering_is_observational",
        max_abs_diff(a.scores, b.scores) + max_abs_diff(a.indices, b.indices), 0.0);
    double missed = 1.0;
    try {
      Arena tiny("route_ioaware_fwd", TierConfig{4, 4});
      route_ioaware_fwd(x, rp, k, 16, 16, tiny);
    } catch (const SramOverflow&) {
      missed = 0.0;
    }
    add("tiered_memory", "sram_overflow_detected", missed, 0.0);
  }

  // Router backward in FP64 on a small problem.
  {
    const std::size_t kk = 1 + rng.below(3), n = 3, d = 3, e = kk + 2 + rng.below(3);
    const Tensor<double> xd = randn<double>({1, n, 1, d}, rng);
    const RouterParams<double> pd = random_router<double>(rng, 1, d, e, true);
    Arena fa = Arena::unmetered("route_naive");
    const auto topk = route_naive(xd, pd, kk, fa);
    const Tensor<double> c = randn<double>(topk.scores.shape(), rng);
    Arena ba = Arena::unmetered("route_ioaware_bwd");
    const auto g = route_ioaware_bwd(xd, pd, topk, c, ba, 2);
    const Tensor<double> num_w = finite_diff_grad(
        [&](const Tensor<double>& w) {
          RouterParams<double> q = pd;
          q.w_r = w;
          return route_objective(xd, q, kk, c);
        },
        pd.w_r, 1e-6);
    const Tensor<double> num_x =
        finite_diff_grad([&](const Tensor<double>& xv) { return route_objective(xv, pd, kk, c); }, xd, 1e-6);
    add("router", "backward_matches_finite_differences", std::max(fd_rel(g.dw_r, num_w), fd_rel(g.dx, num_x)), 1e-4);
    double stray = 0.0;
    for (std::size_t col = 0; col < e; ++col) {
      bool selected = false;
      for (std::size_t i = 0; i < topk.indices.size(); ++i) selected |= topk.indices[i] == static_cast<int>(col);
      if (selected) continue;
      for (std::size_t p = 0; p < d; ++p) stray += std::abs(g.dw_r[p * e + col]);
    }
    add("router", "unselected_columns_zero", stray, 0.0);
  }

  // expert_exec
  {
    const std::size_t n = B * T, de = 4 << rng.below(4);
    const IndexTensor assign = zipf_assign(SkewModel{0.5, E, 1}, n, k, rng);
    const ClusterPlan plan = build_cluster_plan(assign, E);
    const Tensor<float> xt = randn<float>({n, D}, rng);
    const Tensor<float> xc = gather_clustered(xt, plan);
    const ExpertBank<float> bank = random_bank<float>(rng, E, de, D);
    Arena na = Arena::unmetered("experts_naive"), ba = Arena::unmetered("experts_blocksparse");
    const Tensor<float> yn = experts_naive(xc, plan, bank, na);
    Tensor<float> yb = experts_blocksparse(xc, plan, bank, ba);
    inject(yb, opt);
    add("expert_exec", "blocksparse_matches_grouped_gemm", rel_error(yb, yn), 1e-5);

    const Tensor<float> rt = unpermute_rows(permute_rows(xc, plan), plan);
    add("expert_exec", "cluster_permutation_roundtrip", max_abs_diff(rt, xc), 0.0);
  }
  {
    // d_e = 1 recovery in FP64.
    const std::size_t n = 6, d = 5, e = 3;
    const IndexTensor assign = zipf_assign(SkewModel{0.0, e, 1}, n, 1, rng);
    const ClusterPlan plan = build_cluster_plan(assign, e);
    const Tensor<double> xc = gather_clustered(randn<double>({n, d}, rng), plan);
    const ExpertBank<double> bank = random_bank<double>(rng, e, 1, d);
    Arena na = Arena::unmetered("experts_naive"), ba = Arena::unmetered("experts_blocksparse");
    add("expert_exec", "recovery_identity_single_hidden_unit",
        max_abs_diff(experts_blocksparse(xc, plan, bank, ba), experts_naive(xc, plan, bank, na)), 1e-12);
  }
  {
    // Expert backward in FP64 against finite differences.
    const std::size_t n = 4, d = 3, e = 3, de = 4, kk = 2;
    const IndexTensor assign = zipf_assign(SkewModel{0.0, e, 1}, n, kk, rng);
    const ClusterPlan plan = build_cluster_plan(assign, e);
    const Tensor<double> xc = gather_clustered(randn<double>({n, d}, rng), plan);
    const ExpertBank<double> bank = random_bank<double>(rng, e, de, d);
    const Tensor<double> c = randn<double>(xc.shape(), rng);
    Arena a = Arena::unmetered("experts_backward");
    const auto g = experts_backward(xc, plan, bank, c, a);
    auto f = [&](const Tensor<double>& xv, const ExpertBank<double>& bk) {
      Arena na = Arena::unmetered("experts_naive");
      return dot(experts_naive(xv, plan, bk, na), c);
    };
    const auto nx = finite_diff_grad([&](const Tensor<double>& v) { return f(v, bank); }, xc, 1e-6);
    const auto ni = finite_diff_grad(
        [&](const Tensor<double>& v) { return f(xc, ExpertBank<double>{v, bank.w_out}); }, bank.w_in, 1e-6);
    const auto no = finite_diff_grad(
        [&](const Tensor<double>& v) { return f(xc, ExpertBank<double>{bank.w_in, v}); }, bank.w_out, 1e-6);
    add("expert_exec", "backward_matches_finite_differences",
        std::max({fd_rel(g.dx, nx), fd_rel(g.dw_in, ni), fd_rel(g.dw_out, no)}), 1e-5);
  }

  // moe_layer
  {
    const std::size_t heads = std::size_t{1} << rng.below(3), dh = 4 << rng.below(2), d = heads * dh;
    const std::size_t e = 2 * ((std::max<std::size_t>(k, 2 + rng.below(14)) + 1) / 2), de = 4 << rng.below(2);
    const bool sep = rng.below(2) == 1;
    const std::size_t n = 8 * (1 + rng.below(4));
    const auto layer = random_layer<float>(rng, d, heads, dh, e, std::min(k, e), de, sep);
    const Tensor<float> xl = randn<float>({1, n, d}, rng);
    LedgerLog log(TierConfig{1 << 20, 4});
    MoEOptions bs, nv;
    nv.backend = ExpertBackend::naive;
    Tensor<float> yb = mh_latentmoe_forward(layer, xl, log, bs);
    inject(yb, opt);
    const Tensor<float> yn = mh_latentmoe_forward(layer, xl, log, nv);
    const Tensor<float> yr = reference::mh_latentmoe_forward(layer, xl);
    add("moe_layer", "backends_agree", rel_error(yb, yn), 1e-5);
    add("moe_layer", "matches_per_head_reference", rel_error(yb, yr), 1e-5);

    // Backward in FP64 against the reference and finite differences.
    const auto l64 = layer.template cast<double>();
    const Tensor<double> x64 = xl.cast<double>();
    const Tensor<double> c = randn<double>(x64.shape(), rng);
    MHForwardState<double> st;
    LedgerLog log64(TierConfig{1 << 20, 4});
    mh_latentmoe_forward(l64, x64, log64, bs, &st);
    const auto g = mh_latentmoe_backward(l64, st, c, log64, bs);
    const auto gr = reference::mh_latentmoe_backward(l64, x64, c);
    double err = std::max({rel_error(g.dx, gr.dx), rel_error(g.dw_in, gr.dw_in), rel_error(g.dw_out, gr.dw_out)});
    for (std::size_t h = 0; h < heads; ++h) {
      err = std::max({err, rel_error(g.heads[h].dw_r, gr.heads[h].dw_r), rel_error(g.heads[h].dw_in, gr.heads[h].dw_in),
                      rel_error(g.heads[h].dw_out, gr.heads[h].dw_out)});
    }
    add("moe_layer", "backward_matches_reference", err, 1e-9);
    const auto nw = finite_diff_grad(
        [&](const Tensor<double>& w) {
          auto q = l64;
          q.w_in = w;
          return dot(reference::mh_latentmoe_forward(q, x64), c);
        },
        l64.w_in, 1e-6);
    add("moe_layer", "backward_matches_finite_differences", fd_rel(g.dw_in, nw), 1e-4);

    // parallel_sim on the same layer.
    const std::size_t P = heads >= 2 ? 2 : 1;
    const WorkerGroup grp(P);
    const auto hp = hp_schedule(grp, xl, layer, bs);
    const Tensor<float> ys = mh_latentmoe_forward(layer, xl, log, bs);
    add("parallel_sim", "hp_matches_single_worker", max_abs_diff(hp.output, ys), 1e-6);
    add("parallel_sim", "hp_round_count", std::abs(double(hp.report.round_count()) - 2.0), 0.0);

    const MoEModule<float>& head = layer.heads[0];
    const Tensor<float> xh = randn<float>({n, dh}, rng);
    const auto ep = ep_schedule(WorkerGroup(2), xh, head, bs);
    const Tensor<float> ym = moe_forward(head, xh, log, bs);
    add("parallel_sim", "ep_matches_single_worker", max_abs_diff(ep.output, ym), 1e-6);
    add("parallel_sim", "ep_round_count", std::abs(double(ep.report.round_count()) - 3.0), 0.0);

    const CommReport ht = hp_traffic(grp, n, heads, dh);
    const IndexTensor assign = zipf_assign(SkewModel{0.0, e, P}, n, head.k, rng);
    const CommReport et = ep_traffic(grp, assign, e, d);
    add("parallel_sim", "ep_hp_dispatch_ratio_is_k",
        std::abs(double(et.dispatch_words) / double(ht.dispatch_words) - double(head.k)), 0.0);
  }
}

/// Config-scale checks on the configured layer and worker count.
inline void verify_config_layer(const RunConfig& c, const VerifyOptions& opt, std::vector<CheckRecord>& out) {
  using namespace verify_detail;
  Rng rng = Rng(c.seed).fork(0xc0f1);
  const auto layer = random_layer<float>(rng, c.d, c.N_h, c.d_h, c.N_e, c.k, c.d_e, c.separate_routing);
  const Tensor<float> x = randn<float>({c.B, c.T, c.d}, rng);
  LedgerLog log(TierConfig{c.sram_words, c.word_size});
  MoEOptions bs, nv;
  nv.backend = ExpertBackend::naive;
  Tensor<float> yb = mh_latentmoe_forward(layer, x, log, bs);
  inject(yb, opt);
  const Tensor<float> yn = mh_latentmoe_forward(layer, x, log, nv);
  const Tensor<float> yr = reference::mh_latentmoe_forward(layer, x);
  auto add = [&](const char* module, const char* check, double err, double tol) {
    out.push_back({module, check, c.seed, err, tol});
  };
  add("moe_layer", "config_backends_agree", rel_error(yb, yn), 1e-5);
  add("moe_layer", "config_matches_per_head_reference", rel_error(yb, yr), 1e-5);
  const WorkerGroup g(c.P, c.word_size);
  const auto hp = hp_schedule(g, x, layer, bs);
  const Tensor<float> ys = mh_latentmoe_forward(layer, x, log, bs);
  add("parallel_sim", "config_hp_matches_single_worker", max_abs_diff(hp.output, ys), 1e-6);
  const Tensor<float> rows = x.reshaped({c.B * c.T, c.d});
  const Tensor<float> xh = slice_cols(matmul_nt(rows, layer.w_in), 0, c.d_h);
  const auto ep = ep_schedule(g, xh, layer.heads[0], bs);
  add("parallel_sim", "config_ep_matches_single_worker", max_abs_diff(ep.output, moe_forward(layer.heads[0], xh, log, bs)),
      1e-6);
  const std::uint64_t want = hp_bytes_per_worker(c.B * c.T, c.N_h, c.d_h, c.P, c.word_size, c.separate_routing);
  double err = 0.0;
  for (std::size_t w = 0; w < c.P; ++w) {
    const auto sent = hp.report.rounds[0].sent_words[w] * c.word_size;
    err = std::max(err, std::abs(double(sent) - double(want)));
  }
  add("parallel_sim", "config_hp_bytes_closed_form", err, 0.0);
}

inline std::vector<CheckRecord> run_verify_suite(const RunConfig& c, const VerifyOptions& opt = {}) {
  validate(c);
  std::vector<CheckRecord> out;
  for (std::size_t i = 0; i < c.verify_instances; ++i) verify_instance(c.seed + i, opt, out);
  verify_config_layer(c, opt, out);
  return out;
}

inline int write_verify_bundle(const std::vector<CheckRecord>& records, Bundle& bundle) {
  const std::string& hash = bundle.hash();
  std::ostringstream all, failed;
  all << "config_hash,module,check,seed,max_error,tolerance,status\n";
  failed << "config_hash,module,check,seed,max_error,tolerance\n";
  int code = 0;
  for (const auto& r : records) {
    all << hash << ',' << r.module << ',' << r.check << ',' << r.seed << ',' << fmt_num(r.max_error) << ','
        << fmt_num(r.tolerance) << ',' << (r.passed() ? "pass" : "fail") << '\n';
    if (!r.passed()) {
      failed << hash << ',' << r.module << ',' << r.check << ',' << r.seed << ',' << fmt_num(r.max_error) << ','
             << fmt_num(r.tolerance) << '\n';
      code = 1;
    }
  }
  bundle.write("verify.csv", all.str());
  bundle.write("failures.csv", failed.str());
  return code;
}

}  // namespace mhmoe::harness
