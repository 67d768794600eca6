// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "mhmoe/moe.hpp"
#include "mhmoe/parallel.hpp"
#include "mhmoe/rng.hpp"
#include "oracles.hpp"

using namespace mhmoe;

namespace {

MHLatentMoEParams<float> layer(Rng& rng, std::size_t heads, std::size_t d_h, std::size_t e, std::size_t k) {
  auto p = init_mh_latentmoe<float>(rng, LayerDims{heads * d_h, heads, d_h, e, k, 8, false}, InitConfig{0.4, 1});
  for (auto& h : p.heads) h.router.bias = randn<float>(h.router.bias.shape(), rng, 0.05);
  return p;
}

}  // namespace

TEST(AllToAll, DeliversAndCounts) {
  WorkerGroup g(3);
  auto send = make_buffers<float>(3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) send[i][j].assign(i + j, float(10 * i + j));
  CommReport rep = make_report("test", g);
  const auto recv = all_to_all(g, send, rep, "round");
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) ASSERT_EQ(recv[j][i], send[i][j]);
  ASSERT_EQ(rep.round_count(), 1u);
  // Worker 1 sends 1 + 3 words to others and keeps 2.
  EXPECT_EQ(rep.rounds[0].sent_words[1], 4u);
  EXPECT_EQ(rep.rounds[0].local_words[1], 2u);
  EXPECT_EQ(rep.per_worker[1].bytes_sent, 16u);
}

TEST(HeadParallel, MatchesSingleWorkerAndUsesTwoRounds) {
  Rng rng(1);
  for (std::size_t P : {1u, 2u, 4u}) {
    const auto p = layer(rng, 4, 8, 12, 2);
    const auto x = randn<float>({2, 8, 32}, rng);
    const auto hp = hp_schedule(WorkerGroup(P), x, p);
    LedgerLog log;
    EXPECT_LE(oracle::max_diff(hp.output, mh_latentmoe_forward(p, x, log)), 1e-6);
    EXPECT_EQ(hp.report.round_count(), 2u);
    EXPECT_EQ(hp.report.rounds[0].label, "hp_dispatch");
    EXPECT_EQ(hp.report.rounds[1].label, "hp_combine");
  }
}

TEST(HeadParallel, BytesMatchClosedForm) {
  Rng rng(2);
  const std::size_t n = 64, heads = 8, d_h = 16;
  for (std::size_t P : {1u, 2u, 4u, 8u}) {
    const auto rep = hp_traffic(WorkerGroup(P), n, heads, d_h);
    const auto want = oracle::hp_dispatch_bytes(n, heads, d_h, P, 4);
    for (std::size_t w = 0; w < P; ++w) {
      ASSERT_EQ(rep.rounds[0].sent_words[w] * 4, want);
      ASSERT_EQ(rep.rounds[0].received_words[w] * 4, want);
    }
    EXPECT_EQ(hp_bytes_per_worker(n, heads, d_h, P, 4), want);
    if (P == 1) { EXPECT_EQ(rep.total_bytes_sent(), 0u); }
  }
}

TEST(HeadParallel, TrafficIndependentOfRouting) {
  Rng rng(3);
  const auto x = randn<float>({1, 16, 32}, rng);
  std::optional<CommReport> first;
  for (int seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    const auto hp = hp_schedule(WorkerGroup(4), x, layer(r, 4, 8, 16, 4));
    CommReport rep = hp.report;
    if (!first) first = rep;
    ASSERT_EQ(rep.per_worker, first->per_worker);
    ASSERT_EQ(rep.rounds, first->rounds);
  }
}

TEST(HeadParallel, RejectsBadSharding) {
  Rng rng(4);
  const auto p = layer(rng, 4, 8, 8, 2);
  EXPECT_THROW(hp_schedule(WorkerGroup(3), randn<float>({1, 6, 32}, rng), p), ConfigError);
  EXPECT_THROW(hp_schedule(WorkerGroup(8), randn<float>({1, 8, 32}, rng), p), ConfigError);
  EXPECT_THROW(hp_schedule(WorkerGroup(2), randn<float>({1, 5, 32}, rng), p), ConfigError);
}

TEST(ExpertParallel, MatchesSingleWorkerAndUsesThreeRounds) {
  Rng rng(5);
  for (std::size_t P : {1u, 2u, 4u}) {
    for (std::size_t k : {1u, 2u, 4u}) {
      auto m = init_moe_module<float>(rng, 8, 16, 8, k, InitConfig{0.4, 1});
      const auto x = randn<float>({24, 8}, rng);
      const auto ep = ep_schedule(WorkerGroup(P), x, m);
      LedgerLog log;
      ASSERT_LE(oracle::max_diff(ep.output, moe_forward(m, x, log)), 1e-6);
      ASSERT_EQ(ep.report.round_count(), 3u);
      EXPECT_EQ(ep.report.rounds[0].label, "ep_metadata");
      EXPECT_EQ(ep.report.rounds[1].label, "ep_dispatch");
      EXPECT_EQ(ep.report.rounds[2].label, "ep_combine");
    }
  }
}

TEST(ExpertParallel, DispatchVolumeIsKTimesHeadParallel) {
  Rng rng(6);
  const std::size_t n = 128, heads = 4, d_h = 32, e = 64, P = 4;
  const auto hp = hp_traffic(WorkerGroup(P), n, heads, d_h);
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    const auto ep = ep_traffic(WorkerGroup(P), zipf_assign(SkewModel{1.0, e, P}, n, k, rng), e, heads * d_h);
    EXPECT_EQ(ep.dispatch_words, k * hp.dispatch_words);
    EXPECT_EQ(hp.dispatch_words, n * heads * d_h);
  }
}

TEST(ExpertParallel, SingleWorkerSendsNothing) {
  Rng rng(7);
  const auto ep = ep_traffic(WorkerGroup(1), zipf_assign(SkewModel{0.0, 8, 1}, 16, 2, rng), 8, 4);
  EXPECT_EQ(ep.total_bytes_sent(), 0u);
  EXPECT_EQ(ep.per_worker[0].max_queue_tokens, 32u);
}

TEST(Zipf, WorkerZeroShareMatchesHarmonicOracle) {
  // Rank-1 experts on a contiguous block: the expected share is a ratio of
  // generalized harmonic numbers.
  EXPECT_NEAR(oracle::zipf_worker0_share(768, 4, 1.0), 0.808, 0.005);
  EXPECT_NEAR(oracle::zipf_worker0_share(768, 4, 2.0), 0.998, 0.001);
  for (double s : {0.0, 1.0, 2.0}) {
    const SkewModel m{s, 768, 4};
    const auto p = m.probabilities();
    double mass = 0.0;
    for (std::size_t e = 0; e < 192; ++e) mass += p[e];
    EXPECT_NEAR(mass, oracle::zipf_worker0_share(768, 4, s), 1e-12);
    Rng rng(8);
    const auto a = zipf_assign(m, 40000, 1, rng);
    EXPECT_NEAR(worker_share(a, m, 0), mass, 0.01) << "skew=" << s;
  }
}

TEST(Zipf, AssignmentsAreDistinctPerToken) {
  Rng rng(9);
  const auto a = zipf_assign(SkewModel{2.0, 16, 4}, 200, 8, rng);
  for (std::size_t t = 0; t < 200; ++t)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = i + 1; j < 8; ++j) ASSERT_NE(a[t * 8 + i], a[t * 8 + j]);
  EXPECT_THROW(zipf_assign(SkewModel{1.0, 10, 4}, 4, 1, rng), ConfigError);
}

TEST(Latency, EpGrowsWithSkewWhileHpIsFlat) {
  const std::size_t n = 512, e = 64, P = 4, d = 128;
  double prev = -1.0;
  for (double s : {0.0, 1.0, 2.0}) {
    Rng rng(10);
    const auto ep = ep_traffic(WorkerGroup(P), zipf_assign(SkewModel{s, e, P}, n, 2, rng), e, d, s);
    const double lat = latency_model(ep);
    EXPECT_GT(lat, prev);
    prev = lat;
  }
  const double hp = latency_model(hp_traffic(WorkerGroup(P), n, 4, 32));
  EXPECT_EQ(hp, latency_model(hp_traffic(WorkerGroup(P), n, 4, 32)));
}

TEST(CommCsv, HeaderAndRows) {
  const auto rep = hp_traffic(WorkerGroup(2), 4, 2, 3);
  std::ostringstream os;
  write_comm_csv(os, std::span<const CommReport>(&rep, 1), std::string_view("h"));
  const std::string s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), "config_hash," + std::string(kCommCsvHeader));
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 3);
}
