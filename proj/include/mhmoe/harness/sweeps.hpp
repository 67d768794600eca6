// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// EP-vs-HP communication sweep and the simulated IO-traffic sweeps.

#pragma once

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mhmoe/cluster.hpp"
#include "mhmoe/csv.hpp"
#include "mhmoe/experts.hpp"
#include "mhmoe/harness/bundle.hpp"
#include "mhmoe/harness/config.hpp"
#include "mhmoe/harness/svg.hpp"
#include "mhmoe/memory.hpp"
#include "mhmoe/parallel.hpp"
#include "mhmoe/rng.hpp"
#include "mhmoe/router.hpp"

namespace mhmoe::harness {

// ---------------------------------------------------------------------------
// Communication
// ---------------------------------------------------------------------------

struct CommPoint {
  CommReport ep;
  CommReport hp;
  double worker0_share = 0.0;  // EP replicas landing on worker 0
};

inline constexpr std::string_view kCommSummaryHeader =
    "config_hash,schedule,P,k,skew,dispatch_words,max_bytes_received,latency_proxy,peak_payload_words,"
    "max_queue_tokens,worker0_share";

/// One grid point. EP replicas carry full d-wide tokens; HP moves the N_h
/// sub-tokens of width d_h, so both exchange the same payload per token copy.
inline CommPoint comm_point(const RunConfig& c, std::size_t k, double skew, std::uint64_t stream) {
  const WorkerGroup g(c.P, c.word_size);
  const std::size_t n = c.B * c.T;
  const SkewModel model{skew, c.N_e, c.P};
  Rng rng = Rng(c.seed).fork(stream);
  const IndexTensor assign = zipf_assign(model, n, k, rng);
  CommPoint pt;
  pt.ep = ep_traffic(g, assign, c.N_e, c.d, skew);
  pt.ep.latency_proxy = latency_model(pt.ep, c.bandwidth, c.alpha);
  pt.hp = hp_traffic(g, n, c.N_h, c.d_h, c.separate_routing);
  pt.hp.k = k;
  pt.hp.skew = skew;
  pt.hp.latency_proxy = latency_model(pt.hp, c.bandwidth, c.alpha);
  pt.worker0_share = worker_share(assign, model, 0);
  return pt;
}

inline std::uint64_t max_bytes_received(const CommReport& r) {
  std::uint64_t m = 0;
  for (const auto& w : r.per_worker) m = std::max(m, w.bytes_received);
  return m;
}

inline std::uint64_t max_peak_payload(const CommReport& r) {
  std::uint64_t m = 0;
  for (const auto& w : r.per_worker) m = std::max(m, w.peak_payload_words);
  return m;
}

struct CommSweep {
  std::vector<std::size_t> k_list;
  std::vector<double> skew_list;
  std::vector<CommPoint> points;  // k-major, then skew

  const CommPoint& at(std::size_t ki, std::size_t si) const { return points[ki * skew_list.size() + si]; }
};

inline CommSweep run_comm_sweep(const RunConfig& c) {
  validate(c);
  CommSweep s{c.k_list, c.skew_list, {}};
  for (std::size_t ki = 0; ki < s.k_list.size(); ++ki)
    for (std::size_t si = 0; si < s.skew_list.size(); ++si)
      s.points.push_back(comm_point(c, s.k_list[ki], s.skew_list[si], ki * 4096 + si));
  return s;
}

inline void write_comm_bundle(const CommSweep& s, Bundle& bundle) {
  const std::string& hash = bundle.hash();
  std::vector<CommReport> reports;
  for (const auto& p : s.points) reports.push_back(p.ep);
  for (const auto& p : s.points) reports.push_back(p.hp);
  std::ostringstream comm;
  write_comm_csv(comm, reports, hash);
  bundle.write("comm.csv", comm.str());

  std::ostringstream sum;
  sum << kCommSummaryHeader << '\n';
  for (const char* schedule : {"EP", "HP"}) {
    for (const auto& p : s.points) {
      const CommReport& r = schedule[0] == 'E' ? p.ep : p.hp;
      sum << hash << ',' << r.schedule << ',' << r.workers << ',' << r.k << ',' << fmt_num(r.skew) << ','
          << r.dispatch_words << ',' << max_bytes_received(r) << ',' << fmt_num(r.latency_proxy) << ','
          << max_peak_payload(r) << ',' << r.max_queue_tokens() << ','
          << (schedule[0] == 'E' ? fmt_num(p.worker0_share) : std::string("")) << '\n';
    }
  }
  bundle.write("comm_summary.csv", sum.str());

  LineChart lat{"Latency proxy vs skew", "Zipf skew", "latency proxy (word units)", {}};
  LineChart mem{"Peak payload vs skew", "Zipf skew", "peak send+recv words", {}};
  for (const char* schedule : {"EP", "HP"}) {
    for (std::size_t ki = 0; ki < s.k_list.size(); ++ki) {
      Series a{std::string(schedule) + " k=" + std::to_string(s.k_list[ki]), {}}, b = a;
      for (std::size_t si = 0; si < s.skew_list.size(); ++si) {
        const CommReport& r = schedule[0] == 'E' ? s.at(ki, si).ep : s.at(ki, si).hp;
        a.points.emplace_back(s.skew_list[si], r.latency_proxy);
        b.points.emplace_back(s.skew_list[si], static_cast<double>(max_peak_payload(r)));
      }
      lat.series.push_back(std::move(a));
      mem.series.push_back(std::move(b));
    }
  }
  bundle.write("comm_latency.svg", render_svg(lat));
  bundle.write("comm_peak_payload.svg", render_svg(mem));
}

// ---------------------------------------------------------------------------
// IO traffic
// ---------------------------------------------------------------------------

struct IoRow {
  std::string sweep;  // "routing" or "experts"
  std::size_t value;  // N_e or d_e
  TrafficLedger ledger;
};

/// Naive vs IO-aware routing of io_T single-head tokens over `num_experts`.
inline std::vector<IoRow> io_routing_point(const RunConfig& c, std::size_t num_experts, std::uint64_t stream) {
  Rng rng = Rng(c.seed).fork(stream);
  const Tensor<float> x = randn<float>({1, c.io_T, 1, c.io_d_h}, rng);
  RouterParams<float> params{randn<float>({1, c.io_d_h, num_experts}, rng, 1.0 / std::sqrt(double(c.io_d_h))),
                             Tensor<float>({1, num_experts})};
  const TierConfig tier{c.io_sram_words, c.word_size};
  Arena naive("route_naive", tier);
  route_naive(x, params, c.k, naive);
  Arena io("route_ioaware_fwd", tier);
  route_ioaware_fwd(x, params, c.k, c.io_block_n, c.io_block_m, io);
  return {{"routing", num_experts, naive.ledger()}, {"routing", num_experts, io.ledger()}};
}

/// Grouped-GEMM vs block-sparse expert computation at hidden width `d_e`.
inline std::vector<IoRow> io_experts_point(const RunConfig& c, std::size_t d_e, std::uint64_t stream) {
  Rng rng = Rng(c.seed).fork(stream);
  const SkewModel uniform{0.0, c.N_e, 1};
  const IndexTensor assign = zipf_assign(uniform, c.io_T, c.k, rng);
  const ClusterPlan plan = build_cluster_plan(assign, c.N_e);
  const Tensor<float> x = randn<float>({c.io_T, c.io_d_h}, rng);
  const Tensor<float> xc = gather_clustered(x, plan);
  const ExpertBank<float> bank{randn<float>({c.N_e, d_e, c.io_d_h}, rng, 1.0 / std::sqrt(double(c.io_d_h))),
                               randn<float>({c.N_e, d_e, c.io_d_h}, rng, 1.0 / std::sqrt(double(d_e)))};
  const TierConfig tier{c.io_sram_words, c.word_size};
  Arena naive("experts_naive", tier);
  experts_naive(xc, plan, bank, naive);
  Arena bs("experts_blocksparse", tier);
  experts_blocksparse(xc, plan, bank, bs);
  return {{"experts", d_e, naive.ledger()}, {"experts", d_e, bs.ledger()}};
}

inline std::vector<IoRow> run_io_sweep(const RunConfig& c) {
  validate(c);
  std::vector<IoRow> rows;
  for (std::size_t i = 0; i < c.ne_list.size(); ++i) {
    auto r = io_routing_point(c, c.ne_list[i], 10000 + i);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  for (std::size_t i = 0; i < c.de_list.size(); ++i) {
    auto r = io_experts_point(c, c.de_list[i], 20000 + i);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

/// Headline metric of a row: HBM reads for routing; for experts, HBM scratch
/// (activation) traffic of the grouped GEMM and the on-chip peak of the
/// block-sparse kernel, which never materializes activations.
inline double io_metric(const IoRow& r) {
  if (r.sweep == "routing") return static_cast<double>(r.ledger.hbm_words_read);
  if (r.ledger.kernel_label == "experts_naive") return static_cast<double>(r.ledger.scratch_words_total());
  return static_cast<double>(r.ledger.sram_peak_words);
}

inline const char* io_metric_name(const IoRow& r) {
  if (r.sweep == "routing") return "hbm_words_read";
  return r.ledger.kernel_label == "experts_naive" ? "activation_words" : "peak_activation_words";
}

inline void write_io_bundle(const std::vector<IoRow>& rows, Bundle& bundle) {
  const std::string& hash = bundle.hash();
  std::ostringstream io;
  io << "config_hash,sweep,value," << kLedgerCsvHeader << '\n';
  for (const auto& r : rows) {
    io << hash << ',' << r.sweep << ',' << r.value << ',';
    write_ledger_csv(io, std::span<const TrafficLedger>(&r.ledger, 1), std::nullopt, false);
  }
  bundle.write("io.csv", io.str());

  // Growth of the headline metric between consecutive grid points.
  std::ostringstream growth;
  growth << "config_hash,sweep,kernel_label,metric,from,to,ratio\n";
  std::map<std::pair<std::string, std::string>, std::vector<const IoRow*>> by_kernel;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& r : rows) {
    auto key = std::make_pair(r.sweep, r.ledger.kernel_label);
    if (!by_kernel.count(key)) order.push_back(key);
    by_kernel[key].push_back(&r);
  }
  for (const auto& key : order) {
    const auto& v = by_kernel[key];
    for (std::size_t i = 1; i < v.size(); ++i) {
      const double a = io_metric(*v[i - 1]), b = io_metric(*v[i]);
      growth << hash << ',' << key.first << ',' << key.second << ',' << io_metric_name(*v[i]) << ','
             << v[i - 1]->value << ',' << v[i]->value << ',' << fmt_num(a > 0 ? b / a : 0.0) << '\n';
    }
  }
  bundle.write("io_growth.csv", growth.str());

  LineChart routing{"Routing HBM reads vs expert count", "N_e", "HBM words read", {}};
  LineChart experts{"Expert activation words vs expert size", "d_e", "words", {}};
  for (const auto& key : order) {
    Series s{key.second, {}};
    for (const IoRow* r : by_kernel[key]) s.points.emplace_back(static_cast<double>(r->value), io_metric(*r));
    (key.first == "routing" ? routing : experts).series.push_back(std::move(s));
  }
  bundle.write("io_routing.svg", render_svg(routing));
  bundle.write("io_experts.svg", render_svg(experts));
}

}  // namespace mhmoe::harness
