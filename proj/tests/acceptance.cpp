// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "mhmoe/harness/commands.hpp"
#include "oracles.hpp"

using namespace mhmoe;
using namespace mhmoe::harness;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <typename T>
RouterParams<T> random_router(Rng& rng, std::size_t h, std::size_t d, std::size_t e) {
  return {randn<T>({h, d, e}, rng, 1.0 / std::sqrt(double(d))), randn<T>({h, e}, rng, 0.1)};
}

template <typename T>
ExpertBank<T> random_bank(Rng& rng, std::size_t e, std::size_t de, std::size_t dh) {
  return {randn<T>({e, de, dh}, rng, 1.0 / std::sqrt(double(dh))), randn<T>({e, de, dh}, rng, 1.0 / std::sqrt(double(de)))};
}

MHLatentMoEParams<float> random_layer(Rng& rng, std::size_t heads, std::size_t d_h, std::size_t e, std::size_t k,
                                      std::size_t d_e) {
  auto p = init_mh_latentmoe<float>(rng, LayerDims{heads * d_h, heads, d_h, e, k, d_e, false}, InitConfig{0.4, 1});
  for (auto& h : p.heads) h.router.bias = randn<float>(h.router.bias.shape(), rng, 0.05);
  return p;
}

Verdict ac1_routing_equivalence() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(0xac1);
  const std::size_t ks[] = {1, 4, 8};
  const std::size_t dhs[] = {8, 16, 32, 64, 128};
  std::size_t instances = 0, mismatched = 0;
  double worst = 0.0;
  for (; instances < 100; ++instances) {
    const std::size_t k = ks[rng.below(3)];
    const std::size_t B = 1 + rng.below(4), T = 1 + rng.below(512), H = 1 + rng.below(8), D = dhs[rng.below(5)];
    const std::size_t E = k + rng.below(512 - k + 1);
    const auto x = randn<float>({B, T, H, D}, rng);
    const auto p = random_router<float>(rng, H, D, E);
    Arena na = Arena::unmetered("route_naive");
    const auto ref = route_naive(x, p, k, na);
    for (std::size_t bm : {std::size_t{1}, k, std::size_t{16}, std::size_t{64}, E}) {
      Arena a = Arena::unmetered("route_ioaware_fwd");
      const auto r = route_ioaware_fwd(x, p, k, 64, bm, a);
      mismatched += !(r.indices == ref.indices);
      worst = std::max(worst, max_abs_diff(r.scores, ref.scores));
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  v.require(mismatched == 0, std::to_string(mismatched) + " index mismatches");
  v.require(worst <= 1e-6, "score error " + fmt("%.3g", worst));
  v.require(secs < 120.0, "runtime " + fmt("%.1f", secs) + " s");
  v.detail = v.pass ? std::to_string(instances) + " instances x 5 block sizes, max score error " + fmt("%.3g", worst) +
                          ", " + fmt("%.1f", secs) + " s"
                    : v.detail;
  return v;
}

double selected_sum(const Tensor<double>& x, const RouterParams<double>& p, std::size_t k, const Tensor<double>& c) {
  Arena a = Arena::unmetered("route_naive");
  const auto r = route_naive(x, p, k, a);
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * r.scores[i];
  return s;
}

Verdict ac2_routing_backward() {
  Verdict v;
  Rng rng(0xac2);
  double fd = 0.0, dense = 0.0, stray = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t k = 1 + rng.below(4), n = 2 + rng.below(6), d = 2 + rng.below(6), e = k + 1 + rng.below(8);
    const auto x = randn<double>({1, n, 1, d}, rng);
    const auto p = random_router<double>(rng, 1, d, e);
    Arena fa = Arena::unmetered("route_naive");
    const auto topk = route_naive(x, p, k, fa);
    const auto c = randn<double>(topk.scores.shape(), rng);
    Arena ba = Arena::unmetered("route_ioaware_bwd");
    const auto g = route_ioaware_bwd(x, p, topk, c, ba, 1 + rng.below(4));
    const auto nw = finite_diff_grad(
        [&](const Tensor<double>& w) {
          auto q = p;
          q.w_r = w;
          return selected_sum(x, q, k, c);
        },
        p.w_r, 1e-6);
    const auto nx = finite_diff_grad([&](const Tensor<double>& xv) { return selected_sum(xv, p, k, c); }, x, 1e-6);
    fd = std::max({fd, oracle::rel(g.dw_r, nw), oracle::rel(g.dx, nx)});
    Tensor<double> dx, dw;
    oracle::router_backward_dense(x.reshaped({n, d}), p.w_r.reshaped({d, e}), topk.indices.reshaped({n, k}),
                                  c.reshaped({n, k}), dx, dw);
    dense = std::max({dense, oracle::rel(g.dw_r.reshaped({d, e}), dw), oracle::rel(g.dx.reshaped({n, d}), dx)});
    for (std::size_t col = 0; col < e; ++col) {
      bool used = false;
      for (std::size_t i = 0; i < topk.indices.size(); ++i) used |= topk.indices[i] == static_cast<int>(col);
      if (!used)
        for (std::size_t r = 0; r < d; ++r) stray += std::abs(g.dw_r[r * e + col]);
    }
  }
  v.require(fd < 1e-4, "finite-difference rel err " + fmt("%.3g", fd));
  v.require(dense < 1e-5, "dense oracle rel err " + fmt("%.3g", dense));
  v.require(stray == 0.0, "unselected columns nonzero");
  if (v.pass) v.detail = "FD rel err " + fmt("%.3g", fd) + ", dense oracle " + fmt("%.3g", dense) + ", unselected columns 0";
  return v;
}

Verdict ac3_expert_exactness() {
  Verdict v;
  Rng rng(0xac3);
  double grid = 0.0, recovery = 0.0;
  std::size_t shapes = 0;
  for (std::size_t dh : {4u, 16u, 64u, 128u})
    for (std::size_t de : {1u, 8u, 64u, 256u})
      for (std::size_t e : {1u, 8u, 64u})
        for (std::size_t k : {1u, 4u, 8u}) {
          if (k > e) continue;
          const std::size_t n = 1 + rng.below(96);
          const auto plan = build_cluster_plan(zipf_assign(SkewModel{1.0, e, 1}, n, k, rng), e);
          const auto bank = random_bank<float>(rng, e, de, dh);
          const auto xc = gather_clustered(randn<float>({n, dh}, rng), plan);
          Arena na = Arena::unmetered("experts_naive"), ba = Arena::unmetered("experts_blocksparse");
          grid = std::max(grid, rel_error(experts_blocksparse(xc, plan, bank, ba), experts_naive(xc, plan, bank, na)));
          ++shapes;
        }
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t e = 1 + rng.below(8), n = 1 + rng.below(32), d = 1 + rng.below(16);
    const auto plan = build_cluster_plan(zipf_assign(SkewModel{0.0, e, 1}, n, 1, rng), e);
    const auto bank = random_bank<double>(rng, e, 1, d);
    const auto xc = gather_clustered(randn<double>({n, d}, rng, 3.0), plan);
    Tensor<double> want({xc.dim(0), d});
    for (std::size_t pos = 0; pos < xc.dim(0); ++pos) {
      const auto y = oracle::expert(xc.data() + pos * d, bank.w_in.data(), bank.w_out.data(), plan.expert_at(pos), 1, d);
      for (std::size_t c = 0; c < d; ++c) want[pos * d + c] = y[c];
    }
    Arena ba = Arena::unmetered("experts_blocksparse");
    recovery = std::max(recovery, oracle::max_diff(experts_blocksparse(xc, plan, bank, ba), want));
  }
  v.require(grid <= 1e-5, "grid rel err " + fmt("%.3g", grid));
  v.require(recovery <= 1e-12, "d_e=1 recovery err " + fmt("%.3g", recovery));
  if (v.pass)
    v.detail = std::to_string(shapes) + " shapes rel err " + fmt("%.3g", grid) + ", d_e=1 FP64 err " + fmt("%.3g", recovery);
  return v;
}

Verdict ac4_io_scaling() {
  Verdict v;
  RunConfig c = preset("desk");
  const auto rows = run_io_sweep(c);
  // Rows: routing naive/io at 256 then 512; experts naive/blocksparse at 64 then 128.
  const double naive_r = io_metric(rows[2]) / io_metric(rows[0]);
  const double io_r = io_metric(rows[3]) / io_metric(rows[1]);
  const double act_r = io_metric(rows[6]) / io_metric(rows[4]);
  const double peak_r = io_metric(rows[7]) / io_metric(rows[5]);
  v.require(naive_r >= 1.9, "naive router growth " + fmt("%.3f", naive_r));
  v.require(io_r <= 1.35, "IO-aware router growth " + fmt("%.3f", io_r));
  v.require(act_r >= 1.9, "naive expert activation growth " + fmt("%.3f", act_r));
  v.require(io_metric(rows[7]) == io_metric(rows[5]), "block-sparse peak changed " + fmt("%.3f", peak_r));
  if (v.pass)
    v.detail = "naive router x" + fmt("%.3f", naive_r) + ", IO-aware x" + fmt("%.3f", io_r) + ", naive activations x" +
               fmt("%.3f", act_r) + ", block-sparse peak x" + fmt("%.3f", peak_r);
  return v;
}

Verdict ac5_comm_volume() {
  Verdict v;
  RunConfig c = preset("desk");
  std::string ratios;
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    const CommPoint p = comm_point(c, k, 1.0, 500 + k);
    const bool exact = p.ep.dispatch_words == k * p.hp.dispatch_words;
    v.require(exact, "k=" + std::to_string(k) + " ratio off");
    ratios += (ratios.empty() ? "" : " ") + std::to_string(p.ep.dispatch_words / p.hp.dispatch_words);
    if (k == 4) {
      const double hp_over_ep = double(p.hp.dispatch_words) / double(p.ep.dispatch_words);
      v.require(hp_over_ep == 0.25, "HP/EP at k=4 is " + fmt("%.6g", hp_over_ep));
    }
  }
  if (v.pass) v.detail = "EP/HP dispatch ratios " + ratios + " for k=1 2 4 8, HP/EP at k=4 = 0.25";
  return v;
}

Verdict ac6_load_imbalance() {
  Verdict v;
  const double o1 = oracle::zipf_worker0_share(768, 4, 1.0), o2 = oracle::zipf_worker0_share(768, 4, 2.0);
  v.require(std::abs(o1 - 0.808) <= 0.005, "oracle skew 1 share " + fmt("%.4f", o1));
  v.require(std::abs(o2 - 0.998) <= 0.001, "oracle skew 2 share " + fmt("%.4f", o2));
  double sim[2];
  for (int i = 0; i < 2; ++i) {
    const SkewModel m{double(i + 1), 768, 4};
    Rng rng = Rng(0xac6).fork(i);
    sim[i] = worker_share(zipf_assign(m, 200000, 1, rng), m, 0);
  }
  v.require(std::abs(sim[0] - 0.808) <= 0.005, "simulated skew 1 share " + fmt("%.4f", sim[0]));
  v.require(std::abs(sim[1] - 0.998) <= 0.001, "simulated skew 2 share " + fmt("%.4f", sim[1]));

  RunConfig c = preset("desk");
  c.skew_list = {0.0, 1.0, 2.0};
  c.k_list = {1, 2, 4, 8};
  const CommSweep s = run_comm_sweep(c);
  for (std::size_t ki = 0; ki < s.k_list.size(); ++ki)
    for (std::size_t si = 0; si < s.skew_list.size(); ++si) {
      const double lat = s.at(ki, si).ep.latency_proxy;
      if (si > 0) v.require(lat > s.at(ki, si - 1).ep.latency_proxy, "EP latency not increasing in skew");
      if (ki > 0) v.require(lat > s.at(ki - 1, si).ep.latency_proxy, "EP latency not increasing in k");
    }

  // HP traffic across 20 routing seeds, on a real layer with real routing.
  Rng data(0xac6);
  const auto x = randn<float>({2, 32, 64}, data);
  std::optional<CommReport> first;
  bool constant = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto rep = hp_schedule(WorkerGroup(4), x, random_layer(rng, 8, 8, 32, 4, 8)).report;
    rep.latency_proxy = latency_model(rep);
    if (!first) first = rep;
    constant &= rep == *first;
  }
  v.require(constant, "HP traffic varies with routing seed");
  if (v.pass)
    v.detail = "worker-0 share oracle " + fmt("%.4f", o1) + "/" + fmt("%.4f", o2) + ", simulated " + fmt("%.4f", sim[0]) +
               "/" + fmt("%.4f", sim[1]) + "; EP latency increasing in skew and k; HP constant over 20 seeds";
  return v;
}

Verdict ac7_parallel_correctness() {
  Verdict v;
  Rng rng(0xac7);
  double hp_err = 0.0, ep_err = 0.0;
  bool rounds = true;
  for (std::size_t P : {1u, 2u, 4u, 8u}) {
    const auto layer = random_layer(rng, 8, 8, 16, 4, 16);
    const auto x = randn<float>({2, 16, 64}, rng);
    LedgerLog log;
    const auto hp = hp_schedule(WorkerGroup(P), x, layer);
    hp_err = std::max(hp_err, max_abs_diff(hp.output, mh_latentmoe_forward(layer, x, log)));
    rounds &= hp.report.round_count() == 2;
    const auto xh = randn<float>({32, 8}, rng);
    const auto ep = ep_schedule(WorkerGroup(P), xh, layer.heads[0]);
    ep_err = std::max(ep_err, max_abs_diff(ep.output, moe_forward(layer.heads[0], xh, log)));
    rounds &= ep.report.round_count() == 3;
  }
  v.require(hp_err <= 1e-6, "HP error " + fmt("%.3g", hp_err));
  v.require(ep_err <= 1e-6, "EP error " + fmt("%.3g", ep_err));
  v.require(rounds, "round counts differ from HP 2 / EP 3");
  if (v.pass) v.detail = "HP err " + fmt("%.3g", hp_err) + ", EP err " + fmt("%.3g", ep_err) + ", rounds 2/3 for P=1,2,4,8";
  return v;
}

Verdict ac8_training() {
  Verdict v;
  RunConfig c = preset("toy");
  c.steps = 200;
  const ToyRun run = run_toy_training(c);
  v.require(!run.nan_step, "non-finite loss");
  v.require(run.steps.size() == 200, "ran " + std::to_string(run.steps.size()) + " steps");
  if (!v.pass) return v;
  double gap = 0.0;
  for (const auto& s : run.steps) gap = std::max(gap, s.max_gap());
  auto window = [&](std::size_t from, std::size_t n, bool loss) {
    double a = 0.0;
    for (std::size_t i = from; i < from + n; ++i) a += loss ? run.steps[i].loss[0] : run.steps[i].imbalance[0];
    return a / double(n);
  };
  const double l0 = window(0, 10, true), l1 = window(190, 10, true);
  const double i0 = window(0, 10, false), i1 = window(190, 10, false);
  v.require(gap <= kToyLossTolerance, "backend loss gap " + fmt("%.3g", gap));
  v.require(l1 < l0, "loss did not decrease");
  v.require(i1 < i0, "load imbalance did not fall");
  if (v.pass)
    v.detail = "loss " + fmt("%.4f", l0) + " -> " + fmt("%.4f", l1) + ", max backend gap " + fmt("%.3g", gap) +
               ", max/mean load " + fmt("%.3f", i0) + " -> " + fmt("%.3f", i1);
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Verdict ac9_determinism() {
  Verdict v;
  const fs::path root = fs::temp_directory_path() / "mhmoe-acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  setenv(kOutputRootEnv, root.c_str(), 1);
  std::ostringstream log;
  for (const char* run : {"first", "second"}) {
    RunConfig c = preset("toy");
    c.output_dir = run;
    c.verify_instances = 3;
    c.steps = 40;
    v.require(cmd_verify(c, {}, log) == kExitPass, std::string(run) + " verify failed");
    cmd_sweep_comm(c, log);
    cmd_sweep_io(c, log);
    v.require(cmd_train_toy(c, log) == kExitPass, std::string(run) + " train-toy failed");
    cmd_report({root / run}, root / (std::string(run) + "-report"), log);
  }
  std::size_t compared = 0;
  for (const auto& [a, b] : {std::pair{"first", "second"}, std::pair{"first-report", "second-report"}}) {
    for (const auto& e : fs::directory_iterator(root / a)) {
      const std::string name = e.path().filename().string();
      if (name == kManifestName) continue;  // carries wall-clock time
      ++compared;
      v.require(slurp(e.path()) == slurp(root / b / name), name + " differs between runs");
    }
  }
  Json m1 = read_manifest(root / "first"), m2 = read_manifest(root / "second");
  v.require(m1.at("config_hash") == m2.at("config_hash") && m1.at("files") == m2.at("files"), "manifests differ");
  unsetenv(kOutputRootEnv);
  fs::remove_all(root);
  if (v.pass) v.detail = std::to_string(compared) + " output files byte-identical across two runs";
  return v;
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Verdict()>> criteria[] = {
      {"AC1 routing equivalence", ac1_routing_equivalence},
      {"AC2 routing backward", ac2_routing_backward},
      {"AC3 expert exactness", ac3_expert_exactness},
      {"AC4 IO scaling", ac4_io_scaling},
      {"AC5 communication volume", ac5_comm_volume},
      {"AC6 load imbalance", ac6_load_imbalance},
      {"AC7 parallel correctness", ac7_parallel_correctness},
      {"AC8 training sanity", ac8_training},
      {"AC9 determinism", ac9_determinism},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    failed += !v.pass;
    std::printf("%s %s: %s\n", v.pass ? "PASS" : "FAIL", name, v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
