// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.


#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "monalign/align.hpp"

namespace {

using monalign::AlignmentMatrix;

// Column-major helper: cols[j][i] = a_ij.
AlignmentMatrix cols(std::vector<std::vector<double>> c) {
  return AlignmentMatrix::from_columns(c);
}

AlignmentMatrix one_hot(std::size_t n, const std::vector<std::size_t>& pos) {
  std::vector<std::vector<double>> c(pos.size(), std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < pos.size(); ++j) c[j][pos[j] - 1] = 1.0;
  return cols(c);
}

AlignmentMatrix random_stochastic(std::size_t n, std::size_t m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> c(m, std::vector<double>(n));
  for (auto& col : c) {
    double z = 0.0;
    for (double& v : col) z += (v = u(rng));
    for (double& v : col) v /= z;
  }
  return cols(c);
}

// Term-by-term evaluation with an arbitrary position offset.
double naive_loss(const AlignmentMatrix& a, double delta, double offset = 0.0) {
  const std::size_t n = a.n_inputs(), m = a.n_frames();
  auto centroid = [&](std::size_t j) {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) c += a(i, j) * (static_cast<double>(i + 1) + offset);
    return c;
  };
  double loss = 0.0;
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const double h = (centroid(j) - centroid(j + 1) +
                      delta * static_cast<double>(n) / static_cast<double>(m)) /
                     static_cast<double>(n);
    loss += std::max(h, 0.0);
  }
  return loss;
}

TEST(AlignmentMatrix, RejectsColumnSumOutsideTolerance) {
  EXPECT_THROW(cols({{0.5, 0.3}}), monalign::InvalidAlignment);
  EXPECT_NO_THROW(cols({{0.5, 0.5 + 5e-7}}));
  try {
    cols({{0.4, 0.4}});
    FAIL();
  } catch (const monalign::InvalidAlignment& e) {
    EXPECT_NE(std::string(e.what()).find("tolerance"), std::string::npos);
  }
}

TEST(AlignmentMatrix, RejectsNegativeAndNonFinite) {
  EXPECT_THROW(cols({{1.5, -0.5}}), monalign::InvalidAlignment);
  EXPECT_THROW(cols({{NAN, 1.0}}), monalign::InvalidAlignment);
  EXPECT_THROW(AlignmentMatrix(0, 1, {}), monalign::InvalidAlignment);
}

TEST(Centroids, SpecExamples) {
  EXPECT_DOUBLE_EQ(monalign::centroids(one_hot(4, {2})).centroids[0], 2.0);
  EXPECT_DOUBLE_EQ(monalign::centroids(cols({{1.0 / 3, 1.0 / 3, 1.0 / 3}})).centroids[0], 2.0);
  EXPECT_DOUBLE_EQ(monalign::centroids(cols({{0.5, 0.5, 0.0, 0.0}})).centroids[0], 1.5);
}

TEST(Centroids, LieWithinPositions) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto a = random_stochastic(1 + t % 7, 1 + t % 5, rng);
    for (double c : monalign::centroids(a).centroids) {
      EXPECT_GE(c, 1.0 - 1e-12);
      EXPECT_LE(c, static_cast<double>(a.n_inputs()) + 1e-12);
    }
  }
}

TEST(AlignmentLoss, DiagonalIsZero) {
  EXPECT_EQ(monalign::alignment_loss(one_hot(3, {1, 2, 3}), 0.01), 0.0);
}

TEST(AlignmentLoss, ConstantColumns) {
  std::vector<std::vector<double>> c(5, {0.1, 0.2, 0.3, 0.4});
  EXPECT_NEAR(monalign::alignment_loss(cols(c), 0.01), 0.008, 1e-15);
}

TEST(AlignmentLoss, AntiDiagonal) {
  EXPECT_NEAR(monalign::alignment_loss(one_hot(3, {3, 2, 1}), 0.01), 2.0 * 1.01 / 3.0, 1e-15);
  EXPECT_NEAR(monalign::alignment_loss(one_hot(3, {3, 2, 1}), 0.01), 0.6733333, 1e-6);
}

TEST(AlignmentLoss, SingleFrameIsZero) {
  EXPECT_EQ(monalign::alignment_loss(cols({{0.2, 0.8}}), 0.5), 0.0);
}

TEST(AlignmentLoss, RejectsNegativeDelta) {
  EXPECT_THROW(monalign::alignment_loss(one_hot(2, {1, 2}), -0.1), monalign::ConfigError);
}

TEST(AlignmentLoss, MatchesNaiveOracle) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 12);
  for (int t = 0; t < 300; ++t) {
    const auto a = random_stochastic(dim(rng), dim(rng), rng);
    for (double delta : {0.0, 0.01, 0.1}) {
      EXPECT_NEAR(monalign::alignment_loss(a, delta), naive_loss(a, delta), 1e-12);
    }
  }
}

TEST(AlignmentLoss, Properties) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = dim(rng), m = dim(rng);
    const auto a = random_stochastic(n, m, rng);
    const double l0 = monalign::alignment_loss(a, 0.0);
    const double l1 = monalign::alignment_loss(a, 0.05);
    const double l2 = monalign::alignment_loss(a, 0.5);
    EXPECT_GE(l0, 0.0);
    EXPECT_LE(l0, l1);
    EXPECT_LE(l1, l2);
    // Shifting every position weight leaves the loss unchanged.
    EXPECT_NEAR(naive_loss(a, 0.05, 7.0), l1, 1e-12);
    const double nd = static_cast<double>(n), md = static_cast<double>(m);
    EXPECT_LE(l2, (md - 1.0) * (nd - 1.0 + 0.5 * nd / md) / nd + 1e-12);
    // Zero loss exactly when every step advances by the margin.
    const auto c = monalign::centroids(a).centroids;
    bool margin_monotone = true;
    for (std::size_t j = 0; j + 1 < m; ++j)
      margin_monotone = margin_monotone && c[j + 1] >= c[j] + 0.05 * nd / md;
    EXPECT_EQ(l1 == 0.0, margin_monotone);
  }
}

TEST(AlignmentLossGrad, InactiveHingesGiveZero) {
  const auto g = monalign::alignment_loss_grad(one_hot(3, {1, 2, 3}), 0.01);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(AlignmentLossGrad, TwoByTwoHandValue) {
  const auto g = monalign::alignment_loss_grad(cols({{0.5, 0.5}, {0.5, 0.5}}), 0.5);
  // Row-major N x M: (i, j) at i * M + j.
  EXPECT_DOUBLE_EQ(g[0], 0.5);
  EXPECT_DOUBLE_EQ(g[2], 1.0);
  EXPECT_DOUBLE_EQ(g[1], -0.5);
  EXPECT_DOUBLE_EQ(g[3], -1.0);
}

TEST(AlignmentLossGrad, ZeroSubgradientAtKink) {
  // Equal centroids with delta = 0 put the only hinge exactly at 0.
  const auto g = monalign::alignment_loss_grad(cols({{0.5, 0.5}, {0.5, 0.5}}), 0.0);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(AlignmentLossGrad, MatchesCentralDifferencesAwayFromKinks) {
  std::mt19937_64 rng(5);
  int checked = 0;
  while (checked < 20) {
    const auto a = random_stochastic(5, 7, rng);
    const auto h = monalign::kernel::hinge_arguments(a.values(), 5, 7, 0.01);
    if (std::any_of(h.begin(), h.end(), [](double v) { return std::abs(v) < 1e-4; })) continue;
    ++checked;
    const auto g = monalign::alignment_loss_grad(a, 0.01);
    std::vector<double> x(a.values().begin(), a.values().end());
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double s = x[k];
      x[k] = s + 1e-6;
      const double up = monalign::kernel::alignment_loss(x, 5, 7, 0.01);
      x[k] = s - 1e-6;
      const double down = monalign::kernel::alignment_loss(x, 5, 7, 0.01);
      x[k] = s;
      const double num = (up - down) / 2e-6;
      EXPECT_LT(std::abs(g[k] - num) / std::max({std::abs(g[k]), std::abs(num), 1e-8}), 1e-6);
    }
  }
}

TEST(MonotonicityReport, SpecExamples) {
  auto r = monalign::monotonicity_report(one_hot(3, {1, 2, 3}), 0.01);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.violation_count, 0u);
  EXPECT_EQ(r.violation_rate, 0.0);

  std::vector<std::vector<double>> c(5, {0.25, 0.25, 0.25, 0.25});
  r = monalign::monotonicity_report(cols(c), 0.01);
  EXPECT_NEAR(r.loss, 0.008, 1e-15);
  EXPECT_EQ(r.violation_count, 4u);
  EXPECT_EQ(r.violation_rate, 1.0);

  r = monalign::monotonicity_report(one_hot(3, {3, 2, 1}), 0.01);
  EXPECT_EQ(r.violation_count, 2u);
  EXPECT_NEAR(r.max_violation, 1.01 / 3.0, 1e-15);
  EXPECT_NEAR(r.max_violation, 0.3366667, 1e-6);
  EXPECT_EQ(r.centroid_min, 1.0);
  EXPECT_EQ(r.centroid_max, 3.0);
}

TEST(MonotonicityReport, ConsistentWithLossBitForBit) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    const auto a = random_stochastic(1 + t % 9, 1 + t % 11, rng);
    const auto r = monalign::monotonicity_report(a, 0.01);
    EXPECT_EQ(r.loss, monalign::alignment_loss(a, 0.01));
    EXPECT_EQ(r.loss == 0.0, r.violation_count == 0);
    EXPECT_GE(r.loss, r.max_violation);
    if (a.n_frames() == 1) {
      EXPECT_EQ(r.violation_rate, 0.0);
    }
  }
}

TEST(AlignmentCsv, RoundTripIsExact) {
  std::mt19937_64 rng(9);
  const auto a = random_stochastic(4, 6, rng);
  const auto b = monalign::parse_alignment_csv(monalign::format_alignment_csv(a));
  EXPECT_EQ(a.n_inputs(), b.n_inputs());
  ASSERT_EQ(a.values().size(), b.values().size());
  for (std::size_t k = 0; k < a.values().size(); ++k) EXPECT_EQ(a.values()[k], b.values()[k]);
}

TEST(AlignmentCsv, RejectsMalformedText) {
  EXPECT_THROW(monalign::parse_alignment_csv(""), monalign::IoError);
  EXPECT_THROW(monalign::parse_alignment_csv("2,1\n1\n"), monalign::IoError);
  EXPECT_THROW(monalign::parse_alignment_csv("1,2\n1,x\n"), monalign::IoError);
  EXPECT_THROW(monalign::parse_alignment_csv("2,1\n0.4\n0.4\n"), monalign::InvalidAlignment);
}

}  // namespace
