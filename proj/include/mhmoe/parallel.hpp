// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Deterministic simulation of Head Parallel and Expert Parallel execution.
//
// Workers are sequential actors; every cross-worker transfer goes through
// all_to_all, which delivers buffer [src][dst] to dst and books one round.
// Traffic is counted in words of the group's word size; self-delivery is
// tracked separately and never counted as sent or received bytes.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mhmoe/cluster.hpp"
#include "mhmoe/csv.hpp"
#include "mhmoe/errors.hpp"
#include "mhmoe/experts.hpp"
#include "mhmoe/moe.hpp"
#include "mhmoe/rng.hpp"
#include "mhmoe/router.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

struct WorkerGroup {
  std::size_t workers = 1;
  std::size_t word_size_bytes = 4;

  explicit WorkerGroup(std::size_t p, std::size_t word_size = 4) : workers(p), word_size_bytes(word_size) {
    if (workers == 0) throw ConfigError("worker group needs at least one worker");
    if (word_size_bytes == 0) throw ConfigError("word size must be positive");
  }

  template <typename T>
  std::uint64_t words_for(std::size_t elements) const {
    return (elements * sizeof(T) + word_size_bytes - 1) / word_size_bytes;
  }
};

/// Per-round traffic, indexed by worker. Self-delivery is kept apart.
struct RoundRecord {
  std::string label;
  std::vector<std::uint64_t> sent_words;
  std::vector<std::uint64_t> received_words;
  std::vector<std::uint64_t> local_words;
  std::uint64_t messages = 0;

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

struct WorkerStats {
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t max_queue_tokens = 0;    // rows received for compute, local ones included
  std::uint64_t peak_payload_words = 0;  // outgoing + incoming buffers of the busiest round

  friend bool operator==(const WorkerStats&, const WorkerStats&) = default;
};

struct CommReport {
  std::string schedule;
  std::size_t workers = 0;
  std::size_t k = 0;
  double skew = 0.0;
  std::vector<RoundRecord> rounds;
  std::vector<WorkerStats> per_worker;
  std::uint64_t dispatch_words = 0;  // token payload of the dispatch round, self-delivery included
  double latency_proxy = 0.0;

  std::size_t round_count() const { return rounds.size(); }

  std::uint64_t max_queue_tokens() const {
    std::uint64_t m = 0;
    for (const auto& w : per_worker) m = std::max(m, w.max_queue_tokens);
    return m;
  }

  std::uint64_t total_bytes_sent() const {
    std::uint64_t s = 0;
    for (const auto& w : per_worker) s += w.bytes_sent;
    return s;
  }

  std::uint64_t total_bytes_received() const {
    std::uint64_t s = 0;
    for (const auto& w : per_worker) s += w.bytes_received;
    return s;
  }

  friend bool operator==(const CommReport&, const CommReport&) = default;
};

inline CommReport make_report(std::string schedule, const WorkerGroup& g, std::size_t k = 0, double skew = 0.0) {
  CommReport r;
  r.schedule = std::move(schedule);
  r.workers = g.workers;
  r.k = k;
  r.skew = skew;
  r.per_worker.assign(g.workers, {});
  return r;
}

template <typename T>
using Buffers = std::vector<std::vector<std::vector<T>>>;  // [from][to]

template <typename T>
Buffers<T> make_buffers(std::size_t p) {
  return Buffers<T>(p, std::vector<std::vector<T>>(p));
}

/// One all-to-all round. payloads[i][j] goes from worker i to worker j; the
/// result is indexed [receiver][sender].
template <typename T>
Buffers<T> all_to_all(const WorkerGroup& g, Buffers<T> payloads, CommReport& report, std::string_view label) {
  const std::size_t P = g.workers;
  if (payloads.size() != P) throw DimensionError("all_to_all: expected " + std::to_string(P) + " senders");
  for (const auto& row : payloads) {
    if (row.size() != P) throw DimensionError("all_to_all: every sender needs one buffer per receiver");
  }
  if (report.per_worker.size() != P) report.per_worker.assign(P, {});

  RoundRecord rec{std::string(label), std::vector<std::uint64_t>(P, 0), std::vector<std::uint64_t>(P, 0),
                  std::vector<std::uint64_t>(P, 0), static_cast<std::uint64_t>(P * P)};
  std::vector<std::uint64_t> outgoing(P, 0), incoming(P, 0);
  Buffers<T> received = make_buffers<T>(P);
  for (std::size_t i = 0; i < P; ++i) {
    for (std::size_t j = 0; j < P; ++j) {
      const std::uint64_t w = g.words_for<T>(payloads[i][j].size());
      outgoing[i] += w;
      incoming[j] += w;
      if (i == j) {
        rec.local_words[i] += w;
      } else {
        rec.sent_words[i] += w;
        rec.received_words[j] += w;
      }
      received[j][i] = std::move(payloads[i][j]);
    }
  }
  for (std::size_t w = 0; w < P; ++w) {
    auto& st = report.per_worker[w];
    st.bytes_sent += rec.sent_words[w] * g.word_size_bytes;
    st.bytes_received += rec.received_words[w] * g.word_size_bytes;
    st.peak_payload_words = std::max(st.peak_payload_words, outgoing[w] + incoming[w]);
  }
  report.rounds.push_back(std::move(rec));
  return received;
}

/// Sum over rounds of alpha plus the slowest worker's received words over the
/// bandwidth (words per time unit).
inline double latency_model(const CommReport& report, double bandwidth_words_per_unit = 1.0,
                            double alpha_per_round = 0.0) {
  if (!(bandwidth_words_per_unit > 0.0)) throw ConfigError("latency_model: bandwidth must be positive");
  double total = 0.0;
  for (const auto& r : report.rounds) {
    const std::uint64_t worst = r.received_words.empty()
                                    ? 0
                                    : *std::max_element(r.received_words.begin(), r.received_words.end());
    total += alpha_per_round + static_cast<double>(worst) / bandwidth_words_per_unit;
  }
  return total;
}

template <typename T>
struct ScheduleResult {
  Tensor<T> output;
  CommReport report;
};

// ---------------------------------------------------------------------------
// Head Parallel
// ---------------------------------------------------------------------------

inline void check_head_parallel(std::size_t workers, std::size_t heads, std::size_t tokens) {
  if (workers > heads || heads % workers != 0) {
    throw ConfigError("head parallel needs P <= N_h and N_h divisible by P (P = " + std::to_string(workers) +
                      ", N_h = " + std::to_string(heads) + ")");
  }
  if (tokens % workers != 0) {
    throw ConfigError("head parallel shards " + std::to_string(tokens) + " tokens over " +
                      std::to_string(workers) + " workers unevenly");
  }
}

/// Worker w holds tokens [w n/P, (w+1) n/P) and heads [w N_h/P, (w+1) N_h/P).
/// Projected sub-tokens are exchanged once before routing and the head outputs
/// once after, so traffic depends only on the shapes.
template <typename T>
ScheduleResult<T> hp_schedule(const WorkerGroup& g, const Tensor<T>& x, const MHLatentMoEParams<T>& layer,
                              const MoEOptions& opts = {}, LedgerLog* log = nullptr) {
  layer.validate();
  const std::size_t P = g.workers, d = layer.model_dim(), NH = layer.num_heads(), Dh = layer.head_dim();
  const Tensor<T> rows = detail::token_rows(x, d);
  const std::size_t n = rows.dim(0);
  check_head_parallel(P, NH, n);
  const std::size_t local_n = n / P, G = NH / P, L = layer.latent_dim();
  const std::size_t per_head = layer.separate_routing ? 2 * Dh : Dh;
  LedgerLog scratch_log(log ? log->config() : TierConfig{});
  LedgerLog& ledger = log ? *log : scratch_log;

  ScheduleResult<T> res{Tensor<T>(x.shape()), make_report("HP", g)};

  // Each worker projects its own tokens and packs, per destination, the
  // sub-tokens (and routing tokens) of the destination's heads, token-major.
  auto send = make_buffers<T>(P);
  for (std::size_t w = 0; w < P; ++w) {
    const Tensor<T> latent = mh_project_in(layer, slice_rows(rows, w * local_n, local_n));
    for (std::size_t dst = 0; dst < P; ++dst) {
      auto& buf = send[w][dst];
      buf.reserve(local_n * G * per_head);
      for (std::size_t t = 0; t < local_n; ++t) {
        const T* lt = latent.data() + t * latent.dim(1);
        for (std::size_t h = dst * G; h < (dst + 1) * G; ++h) {
          buf.insert(buf.end(), lt + h * Dh, lt + (h + 1) * Dh);
          if (layer.separate_routing) buf.insert(buf.end(), lt + L + h * Dh, lt + L + (h + 1) * Dh);
        }
      }
    }
  }
  auto recv = all_to_all(g, std::move(send), res.report, "hp_dispatch");
  res.report.dispatch_words = 0;
  for (const auto& r : res.report.rounds.back().sent_words) res.report.dispatch_words += r;
  for (const auto& r : res.report.rounds.back().local_words) res.report.dispatch_words += r;

  // Each worker now has every token's sub-tokens for its heads.
  auto back = make_buffers<T>(P);
  for (std::size_t w = 0; w < P; ++w) {
    res.report.per_worker[w].max_queue_tokens = n * G;
    std::vector<Tensor<T>> outs;
    for (std::size_t gh = 0; gh < G; ++gh) {
      const std::size_t h = w * G + gh;
      Tensor<T> xh({n, Dh}), rh({n, Dh});
      for (std::size_t src = 0; src < P; ++src) {
        const auto& buf = recv[w][src];
        for (std::size_t t = 0; t < local_n; ++t) {
          const T* base = buf.data() + (t * G + gh) * per_head;
          std::copy_n(base, Dh, xh.data() + (src * local_n + t) * Dh);
          if (layer.separate_routing) std::copy_n(base + Dh, Dh, rh.data() + (src * local_n + t) * Dh);
        }
      }
      outs.push_back(moe_forward(layer.heads[h], xh, ledger, opts,
                                 layer.separate_routing ? &rh : static_cast<const Tensor<T>*>(nullptr)));
    }
    for (std::size_t dst = 0; dst < P; ++dst) {
      auto& buf = back[w][dst];
      buf.reserve(local_n * G * Dh);
      for (std::size_t t = 0; t < local_n; ++t)
        for (std::size_t gh = 0; gh < G; ++gh) {
          const T* y = outs[gh].data() + (dst * local_n + t) * Dh;
          buf.insert(buf.end(), y, y + Dh);
        }
    }
  }
  auto ret = all_to_all(g, std::move(back), res.report, "hp_combine");

  for (std::size_t w = 0; w < P; ++w) {
    Tensor<T> concat({local_n, L});
    for (std::size_t src = 0; src < P; ++src) {
      const auto& buf = ret[w][src];
      for (std::size_t t = 0; t < local_n; ++t)
        for (std::size_t gh = 0; gh < G; ++gh)
          std::copy_n(buf.data() + (t * G + gh) * Dh, Dh, concat.data() + t * L + (src * G + gh) * Dh);
    }
    const Tensor<T> y = mh_project_out(layer, concat);
    std::copy_n(y.data(), y.size(), res.output.data() + w * local_n * d);
  }
  return res;
}

/// Closed-form HP bytes each worker sends (and receives) in one direction.
inline std::uint64_t hp_bytes_per_worker(std::size_t tokens, std::size_t heads, std::size_t head_dim,
                                         std::size_t workers, std::size_t word_size, bool separate_routing = false) {
  const std::uint64_t per_head = (separate_routing ? 2 : 1) * head_dim;
  return static_cast<std::uint64_t>(tokens) * (heads / workers) * per_head * (workers - 1) / workers * word_size;
}

// ---------------------------------------------------------------------------
// Expert Parallel
// ---------------------------------------------------------------------------

/// Zipf over expert ranks; expert e has rank e + 1 and worker e / (N_e / P).
struct SkewModel {
  double skew = 0.0;
  std::size_t num_experts = 1;
  std::size_t workers = 1;

  void validate() const {
    if (!(skew >= 0.0) || !std::isfinite(skew)) throw ConfigError("skew must be a finite value >= 0");
    if (num_experts == 0 || workers == 0 || num_experts % workers != 0) {
      throw ConfigError("N_e = " + std::to_string(num_experts) + " must split evenly over P = " +
                        std::to_string(workers) + " workers");
    }
  }

  std::size_t worker_of(std::size_t expert) const { return expert / (num_experts / workers); }

  std::vector<double> probabilities() const {
    validate();
    std::vector<double> p(num_experts);
    double z = 0.0;
    for (std::size_t e = 0; e < num_experts; ++e) z += (p[e] = std::pow(static_cast<double>(e + 1), -skew));
    for (auto& v : p) v /= z;
    return p;
  }
};

/// k distinct experts per token, drawn sequentially with rejection of repeats.
inline IndexTensor zipf_assign(const SkewModel& model, std::size_t n_tokens, std::size_t k, Rng& rng) {
  model.validate();
  if (k == 0 || k > model.num_experts) throw ConfigError("zipf_assign: k must be in [1, N_e]");
  const auto p = model.probabilities();
  std::vector<double> cdf(p.size());
  double acc = 0.0;
  for (std::size_t e = 0; e < p.size(); ++e) cdf[e] = (acc += p[e]);
  IndexTensor out({n_tokens, k});
  std::vector<std::int32_t> picked;
  for (std::size_t t = 0; t < n_tokens; ++t) {
    picked.clear();
    while (picked.size() < k) {
      const double u = rng.uniform() * acc;
      auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      const auto e = static_cast<std::int32_t>(std::min<std::size_t>(it - cdf.begin(), p.size() - 1));
      if (std::find(picked.begin(), picked.end(), e) == picked.end()) picked.push_back(e);
    }
    std::copy(picked.begin(), picked.end(), out.data() + t * k);
  }
  return out;
}

/// Fraction of replicas whose expert lives on `worker`.
inline double worker_share(const IndexTensor& assignments, const SkewModel& model, std::size_t worker) {
  if (assignments.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < assignments.size(); ++i)
    hits += model.worker_of(static_cast<std::size_t>(assignments[i])) == worker;
  return static_cast<double>(hits) / static_cast<double>(assignments.size());
}

/// Experts [first, first + count) of a bank.
template <typename T>
ExpertBank<T> slice_experts(const ExpertBank<T>& bank, std::size_t first, std::size_t count) {
  const std::size_t per = bank.hidden() * bank.model_dim();
  auto cut = [&](const Tensor<T>& w) {
    return Tensor<T>({count, bank.hidden(), bank.model_dim()},
                     std::vector<T>(w.data() + first * per, w.data() + (first + count) * per));
  };
  return {cut(bank.w_in), cut(bank.w_out)};
}

/// Token-replica exchange of an expert-parallel MoE step.
///
/// `assignments` is [n, k]. When `module` is given, `x` carries real tokens,
/// experts run on their owning worker and the gated outputs are aggregated
/// with `gates` ([n, k]); otherwise only the traffic is simulated.
template <typename T>
ScheduleResult<T> ep_exchange(const WorkerGroup& g, const Tensor<T>& x, const IndexTensor& assignments,
                              std::size_t num_experts, const MoEModule<T>* module, const Tensor<T>* gates,
                              const MoEOptions& opts = {}, LedgerLog* log = nullptr, double skew = 0.0) {
  const std::size_t P = g.workers;
  require_rank(x, 2, "ep tokens");
  require_rank(assignments, 2, "ep assignments");
  const std::size_t n = x.dim(0), D = x.dim(1), k = assignments.dim(1);
  if (assignments.dim(0) != n) throw DimensionError("ep: one assignment row per token required");
  if (n % P != 0) throw ConfigError("ep: tokens must shard evenly over workers");
  if (num_experts % P != 0) throw ConfigError("ep: N_e must be divisible by P");
  const std::size_t local_n = n / P, G = num_experts / P;
  LedgerLog scratch_log(log ? log->config() : TierConfig{});
  LedgerLog& ledger = log ? *log : scratch_log;

  ScheduleResult<T> res{module ? Tensor<T>({n, D}) : Tensor<T>(), make_report("EP", g, k, skew)};

  // Duplicate each local token k times and cluster the replicas by expert.
  std::vector<ClusterPlan> local_plans(P);
  auto meta = make_buffers<std::uint32_t>(P);
  for (std::size_t w = 0; w < P; ++w) {
    IndexTensor local({local_n, k},
                      std::vector<std::int32_t>(assignments.data() + w * local_n * k,
                                                assignments.data() + (w + 1) * local_n * k));
    local_plans[w] = build_cluster_plan(local, num_experts);
    for (std::size_t dst = 0; dst < P; ++dst) {
      for (std::size_t e = dst * G; e < (dst + 1) * G; ++e)
        meta[w][dst].push_back(local_plans[w].expert_offsets[e + 1] - local_plans[w].expert_offsets[e]);
    }
  }
  const auto counts = all_to_all(g, std::move(meta), res.report, "ep_metadata");

  auto send = make_buffers<T>(P);
  for (std::size_t w = 0; w < P; ++w) {
    const ClusterPlan& plan = local_plans[w];
    for (std::size_t dst = 0; dst < P; ++dst) {
      const std::size_t p0 = plan.expert_offsets[dst * G], p1 = plan.expert_offsets[(dst + 1) * G];
      auto& buf = send[w][dst];
      buf.resize((p1 - p0) * D);
      if (!module) continue;
      for (std::size_t p = p0; p < p1; ++p) {
        const std::size_t t = w * local_n + plan.permutation[p] / k;
        std::copy_n(x.data() + t * D, D, buf.data() + (p - p0) * D);
      }
    }
  }
  auto recv = all_to_all(g, std::move(send), res.report, "ep_dispatch");
  {
    const auto& r = res.report.rounds.back();
    for (std::size_t w = 0; w < P; ++w) res.report.dispatch_words += r.sent_words[w] + r.local_words[w];
  }

  // Receivers sort by expert (sources in order within an expert), compute and
  // send every row back in the order it arrived.
  auto back = make_buffers<T>(P);
  for (std::size_t w = 0; w < P; ++w) {
    std::vector<std::uint32_t> offsets(G + 1, 0);
    for (std::size_t e = 0; e < G; ++e) {
      std::uint32_t c = 0;
      for (std::size_t src = 0; src < P; ++src) c += counts[w][src][e];
      offsets[e + 1] = offsets[e] + c;
    }
    const std::size_t rows = offsets[G];
    res.report.per_worker[w].max_queue_tokens = rows;
    for (std::size_t src = 0; src < P; ++src) back[w][src].resize(recv[w][src].size());
    if (!module || rows == 0) continue;

    Tensor<T> xs({rows, D});
    std::vector<std::size_t> src_cursor(P, 0);
    std::vector<std::pair<std::size_t, std::size_t>> origin(rows);  // (src, row within src buffer)
    std::size_t pos = 0;
    for (std::size_t e = 0; e < G; ++e) {
      for (std::size_t src = 0; src < P; ++src) {
        for (std::uint32_t c = 0; c < counts[w][src][e]; ++c, ++pos) {
          const std::size_t r = src_cursor[src]++;
          std::copy_n(recv[w][src].data() + r * D, D, xs.data() + pos * D);
          origin[pos] = {src, r};
        }
      }
    }
    ClusterPlan plan;
    plan.k = 1;
    plan.expert_offsets = offsets;
    plan.permutation.resize(rows);
    plan.inverse_permutation.resize(rows);
    for (std::size_t i = 0; i < rows; ++i) plan.permutation[i] = plan.inverse_permutation[i] = static_cast<std::uint32_t>(i);
    const ExpertBank<T> bank = slice_experts(module->bank, w * G, G);
    const Tensor<T> ys = detail::run_experts(xs, plan, bank, ledger, opts);
    for (std::size_t i = 0; i < rows; ++i) {
      const auto [src, r] = origin[i];
      std::copy_n(ys.data() + i * D, D, back[w][src].data() + r * D);
    }
  }
  auto ret = all_to_all(g, std::move(back), res.report, "ep_combine");

  if (module) {
    for (std::size_t w = 0; w < P; ++w) {
      const ClusterPlan& plan = local_plans[w];
      // Rows come back per destination in the sender's clustered order, so
      // the concatenation over destinations is exactly the local plan order.
      Tensor<T> y({plan.replicas(), D});
      std::size_t at = 0;
      for (std::size_t dst = 0; dst < P; ++dst) {
        std::copy(ret[w][dst].begin(), ret[w][dst].end(), y.data() + at);
        at += ret[w][dst].size();
      }
      const Tensor<T> local_gates({local_n * k}, std::vector<T>(gates->data() + w * local_n * k,
                                                                gates->data() + (w + 1) * local_n * k));
      const Tensor<T> out = aggregate_weighted(y, local_gates, plan);
      std::copy_n(out.data(), out.size(), res.output.data() + w * local_n * D);
    }
  }
  return res;
}

/// Expert-parallel MoE forward: each worker routes its own tokens, replicas
/// travel to the workers owning their experts and come back for aggregation.
template <typename T>
ScheduleResult<T> ep_schedule(const WorkerGroup& g, const Tensor<T>& x, const MoEModule<T>& module,
                              const MoEOptions& opts = {}, LedgerLog* log = nullptr) {
  module.validate();
  require_rank(x, 2, "ep_schedule input");
  const std::size_t P = g.workers, n = x.dim(0), D = x.dim(1), k = module.k;
  if (n % P != 0) throw ConfigError("ep: tokens must shard evenly over workers");
  const std::size_t local_n = n / P;
  LedgerLog scratch_log(log ? log->config() : TierConfig{});
  LedgerLog& ledger = log ? *log : scratch_log;

  IndexTensor assign({n, k});
  Tensor<T> gates({n, k});
  for (std::size_t w = 0; w < P; ++w) {
    const Tensor<T> xl({1, local_n, 1, D}, std::vector<T>(x.data() + w * local_n * D, x.data() + (w + 1) * local_n * D));
    const TopKResult<T> topk = detail::run_router(xl, module.router, k, ledger, opts);
    const Tensor<T> gl = gate_from_scores(topk);
    std::copy_n(topk.indices.data(), local_n * k, assign.data() + w * local_n * k);
    std::copy_n(gl.data(), local_n * k, gates.data() + w * local_n * k);
  }
  return ep_exchange(g, x, assign, module.experts(), &module, &gates, opts, log);
}

/// Traffic-only EP run on synthetic assignments (payload width `model_dim`).
inline CommReport ep_traffic(const WorkerGroup& g, const IndexTensor& assignments, std::size_t num_experts,
                             std::size_t model_dim, double skew = 0.0) {
  const Tensor<float> x({assignments.dim(0), model_dim});
  return ep_exchange<float>(g, x, assignments, num_experts, nullptr, nullptr, {}, nullptr, skew).report;
}

/// Traffic-only HP run: the exchange depends on shapes alone.
inline CommReport hp_traffic(const WorkerGroup& g, std::size_t tokens, std::size_t heads, std::size_t head_dim,
                             bool separate_routing = false) {
  check_head_parallel(g.workers, heads, tokens);
  const std::size_t P = g.workers, local_n = tokens / P, G = heads / P;
  const std::size_t per_head = (separate_routing ? 2 : 1) * head_dim;
  CommReport rep = make_report("HP", g);
  auto send = make_buffers<float>(P);
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t j = 0; j < P; ++j) send[i][j].resize(local_n * G * per_head);
  all_to_all(g, std::move(send), rep, "hp_dispatch");
  for (const auto& r : rep.rounds.back().sent_words) rep.dispatch_words += r;
  for (const auto& r : rep.rounds.back().local_words) rep.dispatch_words += r;
  auto back = make_buffers<float>(P);
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t j = 0; j < P; ++j) back[i][j].resize(local_n * G * head_dim);
  all_to_all(g, std::move(back), rep, "hp_combine");
  for (auto& w : rep.per_worker) w.max_queue_tokens = tokens * G;
  return rep;
}

inline constexpr std::string_view kCommCsvHeader =
    "schedule,P,k,skew,worker_id,bytes_sent,bytes_received,max_queue_tokens,rounds,latency_proxy,peak_payload_words";

inline void write_comm_csv(std::ostream& os, std::span<const CommReport> reports,
                           std::optional<std::string_view> config_hash = std::nullopt, bool header = true) {
  if (header) os << (config_hash ? "config_hash," : "") << kCommCsvHeader << '\n';
  for (const auto& r : reports) {
    for (std::size_t w = 0; w < r.per_worker.size(); ++w) {
      const auto& s = r.per_worker[w];
      if (config_hash) os << *config_hash << ',';
      os << r.schedule << ',' << r.workers << ',' << r.k << ',' << fmt_num(r.skew) << ',' << w << ','
         << s.bytes_sent << ',' << s.bytes_received << ',' << s.max_queue_tokens << ',' << r.round_count() << ','
         << fmt_num(r.latency_proxy) << ',' << s.peak_payload_words << '\n';
    }
  }
}

}  // namespace mhmoe
