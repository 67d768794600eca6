// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mhmoe/csv.hpp"
#include "mhmoe/ops.hpp"
#include "mhmoe/packing.hpp"
#include "mhmoe/rng.hpp"
#include "oracles.hpp"

using namespace mhmoe;

TEST(Tensor, ShapeMismatchThrows) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.strides(), (Shape{3, 1}));
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, IndexingIsRowMajor) {
  Tensor<int> t({2, 3, 4});
  t(1, 2, 3) = 7;
  EXPECT_EQ(t[1 * 12 + 2 * 4 + 3], 7);
}

TEST(Ops, MatmulVariantsMatchTripleLoop) {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t m = 1 + rng.below(17), p = 1 + rng.below(17), n = 1 + rng.below(17);
    const auto a = randn<double>({m, p}, rng), b = randn<double>({p, n}, rng);
    const auto ref = oracle::matmul(a, b);
    EXPECT_LT(oracle::rel(matmul(a, b), ref), 1e-14);

    Tensor<double> bt({n, p}), at({p, m});
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < n; ++j) bt[j * p + i] = b[i * n + j];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) at[j * m + i] = a[i * p + j];
    EXPECT_LT(oracle::rel(matmul_nt(a, bt), ref), 1e-14);
    EXPECT_LT(oracle::rel(matmul_tn(at, b), ref), 1e-14);
  }
}

TEST(Ops, MatmulInnerDimMismatch) {
  EXPECT_THROW(matmul(Tensor<float>({2, 3}), Tensor<float>({4, 2})), DimensionError);
}

TEST(Ops, GeluExactAndBounded) {
  for (double x = -8.0; x <= 8.0; x += 0.01) {
    EXPECT_NEAR(gelu(x), oracle::gelu(x), 1e-15);
    EXPECT_GE(gelu(x), kGeluMinimum);
  }
  EXPECT_NEAR(gelu(-0.7517918278198952), kGeluMinimum, 1e-15);
}

TEST(Ops, GeluGradMatchesCentralDifference) {
  for (double x = -5.0; x <= 5.0; x += 0.125) {
    const double fd = (oracle::gelu(x + 1e-6) - oracle::gelu(x - 1e-6)) / 2e-6;
    EXPECT_NEAR(gelu_grad(x), fd, 1e-8);
  }
}

TEST(Ops, SoftmaxRowsSumToOneAndHandleMinusInf) {
  Rng rng(5);
  const auto x = randn<double>({4, 9}, rng, 10.0);
  const auto s = softmax(x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 9; ++c) sum += s[r * 9 + c];
    EXPECT_NEAR(sum, 1.0, 1e-14);
  }
  Tensor<double> m({1, 3}, std::vector<double>{0.0, -std::numeric_limits<double>::infinity(), 0.0});
  const auto sm = softmax(m, 1);
  EXPECT_EQ(sm[1], 0.0);
  EXPECT_DOUBLE_EQ(sm[0], 0.5);
}

TEST(Ops, FiniteDiffOnQuadratic) {
  Rng rng(9);
  const auto x = randn<double>({6}, rng);
  const auto g = finite_diff_grad(
      [](const Tensor<double>& v) {
        double s = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) s += double(i + 1) * v[i] * v[i];
        return s;
      },
      x, 1e-5);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(g[i], 2.0 * double(i + 1) * x[i], 1e-8);
}

TEST(Ops, SliceAndWriteColumnsRoundTrip) {
  Rng rng(1);
  const auto m = randn<float>({5, 8}, rng);
  Tensor<float> back({5, 8});
  write_cols(back, slice_cols(m, 0, 3), 0);
  write_cols(back, slice_cols(m, 3, 5), 3);
  EXPECT_EQ(back, m);
  EXPECT_EQ(slice_rows(m, 2, 2).dim(0), 2u);
}

TEST(Rng, DeterministicAndForkIndependent) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Rng c(42);
  Rng f0 = c.fork(0);
  Rng d(42);
  Rng f1 = d.fork(1);
  EXPECT_NE(f0.next_u64(), f1.next_u64());
}

TEST(Rng, UniformAndBelowRanges) {
  Rng r(7);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(13), 13u);
  }
}

TEST(Packing, KeyOrderMatchesScoreThenLowerIndex) {
  Rng rng(11);
  for (int rep = 0; rep < 2000; ++rep) {
    const float a = float(rng.normal()), b = float(rng.normal());
    const auto ia = std::uint32_t(rng.below(1000)), ib = std::uint32_t(rng.below(1000));
    const auto ka = pack_score_index(a, ia), kb = pack_score_index(b, ib);
    const bool a_first = a != b ? a > b : ia < ib;
    if (a == b && ia == ib) continue;
    ASSERT_EQ(ka > kb, a_first);
    const auto [s, i] = unpack_score_index<float>(ka);
    ASSERT_EQ(s, a);
    ASSERT_EQ(i, ia);
  }
}

TEST(Packing, SignedZeroAndInfinities) {
  EXPECT_EQ(pack_score_index(0.0f, 3), pack_score_index(-0.0f, 3));
  EXPECT_GT(pack_score_index(std::numeric_limits<float>::infinity(), 0), pack_score_index(1e30f, 0));
  EXPECT_LT(pack_score_index(-std::numeric_limits<float>::infinity(), 0), pack_score_index(-1e30f, 0));
  EXPECT_THROW(pack_score_index(std::nanf(""), 0), NumericError);
}

TEST(Csv, NumbersRoundTripAndIntegersStayPlain) {
  EXPECT_EQ(fmt_num(2972720.0), "2972720");
  EXPECT_EQ(fmt_num(0.25), "0.25");
  EXPECT_EQ(fmt_num(-0.0), "0");
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, double(rng.below(20)) - 10.0);
    ASSERT_EQ(std::stod(fmt_num(v)), v);
  }
  EXPECT_EQ(split_csv_line("a,,b\r"), (std::vector<std::string>{"a", "", "b"}));
}
