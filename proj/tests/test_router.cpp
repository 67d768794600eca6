// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "mhmoe/ops.hpp"
#include "mhmoe/rng.hpp"
#include "mhmoe/router.hpp"
#include "oracles.hpp"

using namespace mhmoe;

namespace {

template <typename T>
RouterParams<T> random_router(Rng& rng, std::size_t h, std::size_t d, std::size_t e) {
  return {randn<T>({h, d, e}, rng, 1.0 / std::sqrt(double(d))), randn<T>({h, e}, rng, 0.1)};
}

double selected_sum(const Tensor<double>& x, const RouterParams<double>& p, std::size_t k, const Tensor<double>& c) {
  Arena a = Arena::unmetered("route_naive");
  const auto r = route_naive(x, p, k, a);
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * r.scores[i];
  return s;
}

}  // namespace

TEST(RouterNaive, MatchesFullSortOracle) {
  Rng rng(21);
  const std::size_t B = 2, T = 17, H = 3, D = 8, E = 13, k = 4;
  const auto x = randn<float>({B, T, H, D}, rng);
  const auto p = random_router<float>(rng, H, D, E);
  Arena a = Arena::unmetered("route_naive");
  const auto r = route_naive(x, p, k, a);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t row = (b * T + t) * H + h;
        const auto o = oracle::route(x.data() + row * D, p.w_r.data() + h * D * E, p.bias.data() + h * E, D, E, k);
        for (std::size_t j = 0; j < k; ++j) {
          ASSERT_EQ(r.indices[row * k + j], o.experts[j]);
          ASSERT_NEAR(r.scores[row * k + j], o.scores[j], 1e-5);
        }
      }
}

TEST(RouterIoAware, MatchesNaiveOverBlockGrid) {
  Rng rng(22);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t k = std::size_t{1} << rng.below(4);
    const std::size_t B = 1 + rng.below(2), T = 1 + rng.below(70), H = 1 + rng.below(3), D = 4 << rng.below(3);
    const std::size_t E = k + rng.below(50);
    const auto x = randn<float>({B, T, H, D}, rng);
    const auto p = random_router<float>(rng, H, D, E);
    Arena na = Arena::unmetered("route_naive");
    const auto ref = route_naive(x, p, k, na);
    for (std::size_t bm : {std::size_t{1}, k, std::size_t{16}, std::size_t{64}, E}) {
      for (std::size_t bn : {std::size_t{1}, std::size_t{16}}) {
        Arena a = Arena::unmetered("route_ioaware_fwd");
        const auto r = route_ioaware_fwd(x, p, k, bn, bm, a);
        ASSERT_EQ(r.indices, ref.indices) << "block_m=" << bm;
        ASSERT_LE(max_abs_diff(r.scores, ref.scores), 1e-6);
      }
    }
  }
}

TEST(RouterIoAware, TiesBreakToLowerIndex) {
  // Identical columns give identical scores; the lower index must win.
  Tensor<float> x({1, 1, 1, 2}, std::vector<float>{1.0f, 2.0f});
  RouterParams<float> p{Tensor<float>({1, 2, 4}, std::vector<float>{1, 1, 1, 1, 1, 1, 1, 1}), Tensor<float>({1, 4})};
  Arena a = Arena::unmetered("route_ioaware_fwd");
  const auto r = route_ioaware_fwd(x, p, 2, 1, 1, a);
  EXPECT_EQ(r.indices[0], 0);
  EXPECT_EQ(r.indices[1], 1);
}

TEST(RouterIoAware, BiasSteersSelectionButNotScores) {
  Tensor<float> x({1, 1, 1, 1}, std::vector<float>{1.0f});
  RouterParams<float> p{Tensor<float>({1, 1, 3}, std::vector<float>{3, 2, 1}),
                        Tensor<float>({1, 3}, std::vector<float>{0, 0, 5})};
  Arena a = Arena::unmetered("route_ioaware_fwd");
  const auto r = route_ioaware_fwd(x, p, 1, 4, 4, a);
  EXPECT_EQ(r.indices[0], 2);
  EXPECT_EQ(r.scores[0], 1.0f);
}

TEST(RouterIoAware, ScoresNeverReachHbm) {
  Rng rng(4);
  const auto x = randn<float>({1, 256, 1, 32}, rng);
  const auto p = random_router<float>(rng, 1, 32, 128);
  Arena na("route_naive", TierConfig{1 << 20, 4}), ia("route_ioaware_fwd", TierConfig{1 << 20, 4});
  route_naive(x, p, 4, na);
  route_ioaware_fwd(x, p, 4, 64, 32, ia);
  EXPECT_EQ(ia.ledger().scratch_words_total(), 0u);
  EXPECT_GE(na.ledger().hbm_scratch_peak_words, 256u * 128u);
  EXPECT_LT(ia.ledger().hbm_words_read, na.ledger().hbm_words_read);
}

TEST(RouterIoAware, RejectsBadK) {
  Rng rng(1);
  const auto x = randn<float>({1, 2, 1, 4}, rng);
  const auto p = random_router<float>(rng, 1, 4, 3);
  Arena a = Arena::unmetered("route_ioaware_fwd");
  EXPECT_THROW(route_ioaware_fwd(x, p, 4, 8, 8, a), ConfigError);
  EXPECT_THROW(route_ioaware_fwd(x, p, 0, 8, 8, a), ConfigError);
  EXPECT_THROW(route_ioaware_fwd(x, p, 1, 0, 8, a), ConfigError);
}

TEST(RouterBackward, MatchesFiniteDifferencesAndDenseOracle) {
  Rng rng(31);
  for (int rep = 0; rep < 8; ++rep) {
    const std::size_t k = 1 + rng.below(3), n = 2 + rng.below(4), d = 2 + rng.below(4), e = k + 1 + rng.below(5);
    const auto x = randn<double>({1, n, 1, d}, rng);
    const auto p = random_router<double>(rng, 1, d, e);
    Arena fa = Arena::unmetered("route_naive");
    const auto topk = route_naive(x, p, k, fa);
    const auto c = randn<double>(topk.scores.shape(), rng);
    Arena ba = Arena::unmetered("route_ioaware_bwd");
    const auto g = route_ioaware_bwd(x, p, topk, c, ba, 1 + rng.below(4));

    const auto num_w = finite_diff_grad(
        [&](const Tensor<double>& w) {
          auto q = p;
          q.w_r = w;
          return selected_sum(x, q, k, c);
        },
        p.w_r, 1e-6);
    const auto num_x = finite_diff_grad([&](const Tensor<double>& v) { return selected_sum(v, p, k, c); }, x, 1e-6);
    EXPECT_LT(oracle::rel(g.dw_r, num_w), 1e-4);
    EXPECT_LT(oracle::rel(g.dx, num_x), 1e-4);

    Tensor<double> dx, dw;
    oracle::router_backward_dense(x.reshaped({n, d}), p.w_r.reshaped({d, e}), topk.indices.reshaped({n, k}),
                                  c.reshaped({n, k}), dx, dw);
    EXPECT_LT(oracle::rel(g.dw_r.reshaped({d, e}), dw), 1e-5);
    EXPECT_LT(oracle::rel(g.dx.reshaped({n, d}), dx), 1e-5);
  }
}

TEST(RouterBackward, UnselectedColumnsExactlyZero) {
  Rng rng(32);
  const std::size_t n = 5, d = 8, e = 40, k = 2;
  const auto x = randn<float>({1, n, 1, d}, rng);
  const auto p = random_router<float>(rng, 1, d, e);
  Arena a = Arena::unmetered("route_ioaware_fwd");
  const auto topk = route_ioaware_fwd(x, p, k, 4, 8, a);
  const auto c = randn<float>(topk.scores.shape(), rng);
  Arena b = Arena::unmetered("route_ioaware_bwd");
  const auto g = route_ioaware_bwd(x, p, topk, c, b);
  std::vector<bool> used(e, false);
  for (std::size_t i = 0; i < topk.indices.size(); ++i) used[std::size_t(topk.indices[i])] = true;
  for (std::size_t col = 0; col < e; ++col) {
    if (used[col]) continue;
    for (std::size_t r = 0; r < d; ++r) ASSERT_EQ(g.dw_r[r * e + col], 0.0f);
  }
}

TEST(Gates, SoftmaxOverSelectedAndBackward) {
  Rng rng(8);
  TopKResult<double> t{randn<double>({1, 3, 1, 4}, rng), IndexTensor({1, 3, 1, 4})};
  const auto g = gate_from_scores(t);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += g[r * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
  const auto c = randn<double>(g.shape(), rng);
  const auto ds = gate_backward(g, c);
  const auto num = finite_diff_grad(
      [&](const Tensor<double>& s) {
        TopKResult<double> u{s, t.indices};
        const auto gg = gate_from_scores(u);
        double acc = 0.0;
        for (std::size_t i = 0; i < gg.size(); ++i) acc += gg[i] * c[i];
        return acc;
      },
      t.scores, 1e-6);
  EXPECT_LT(oracle::max_diff(ds, num), 1e-8);
}

TEST(Balance, BiasMovesAgainstLoad) {
  IndexTensor idx({1, 4, 1, 1}, std::vector<std::int32_t>{0, 0, 0, 1});
  TopKResult<float> t{Tensor<float>({1, 4, 1, 1}), idx};
  const auto st = tally_expert_load(t, 3, 0.5);
  EXPECT_EQ(st.expert_load[0], 3);
  EXPECT_DOUBLE_EQ(load_imbalance_ratio(st), 3.0 * 3.0 / 4.0);
  RouterParams<float> p{Tensor<float>({1, 1, 3}), Tensor<float>({1, 3})};
  const auto q = update_balance_bias(st, p);
  EXPECT_EQ(q.bias[0], -0.5f);
  EXPECT_EQ(q.bias[1], 0.5f);
  EXPECT_EQ(q.bias[2], 0.5f);
}
