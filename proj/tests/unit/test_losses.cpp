// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "rankuncert/error.hpp"
#include "rankuncert/losses.hpp"
#include "rankuncert/rng.hpp"

namespace rankuncert {
namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
  Matrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

// Fixed 3x2 instance; reference values from an independent NumPy evaluation.
const Matrix kSource = rows({{1, 0}, {0.6, 0.8}, {-1, 0.2}});
const Matrix kTarget = rows({{0.8, 0.6}, {0, 1}, {-0.9, -0.1}});

TEST(EpochContextTest, GammaSchedule) {
  EXPECT_EQ(EpochContext(0, 100, 45).gamma(), 1.0);
  EXPECT_EQ(EpochContext(50, 100, 45).gamma(), 0.5);
  EXPECT_EQ(EpochContext(100, 100, 45).gamma(), 0.0);
  for (int e = 0; e <= 30; ++e) EXPECT_NEAR(EpochContext(e, 30, 45).gamma(), 1.0 - e / 30.0, 1e-12);
  EXPECT_EQ(EpochContext(3, 10, 45).without_mining().gamma(), 0.0);
  EXPECT_NEAR(EpochContext(0, 1, 45).cos_theta(), std::cos(std::numbers::pi / 4), 1e-15);
}

TEST(EpochContextTest, Validation) {
  EXPECT_THROW(EpochContext(0, 0, 45), ConfigError);
  EXPECT_THROW(EpochContext(5, 4, 45), ConfigError);
  EXPECT_THROW(EpochContext(-1, 4, 45), ConfigError);
  EXPECT_THROW(EpochContext::with_cos_theta(0, 4, 1.5), ConfigError);
}

TEST(Kappa, Examples) {
  EXPECT_EQ(kappa(std::cos(std::numbers::pi / 6), EpochContext(0, 100, 45)), 1.0);
  for (int e : {0, 37, 99}) {
    EXPECT_EQ(kappa(std::cos(std::numbers::pi / 3), EpochContext(e, 100, 45)), 0.0);
  }
  EXPECT_EQ(kappa(0.9, EpochContext(50, 100, 45)), 0.5);
  const auto ctx = EpochContext::with_cos_theta(0, 1, 0.5);
  EXPECT_EQ(kappa(0.5, ctx), 0.0);  // strict
}

TEST(LossCl, Examples) {
  EXPECT_EQ(loss_cl(BatchFeatures(rows({{0.3, -2.0}}), rows({{1.0, 1.0}}))), 0.0);
  EXPECT_NEAR(loss_cl(BatchFeatures(rows({{1, 0}, {-1, 0}}), rows({{1, 0}, {-1, 0}}))),
              std::log(1 + std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(loss_cl(BatchFeatures(Matrix::Ones(5, 3), Matrix::Ones(5, 3))), std::log(5.0),
              1e-14);
  EXPECT_NEAR(loss_cl(BatchFeatures(kSource, kTarget)), 0.6221105781429254, 1e-14);
}

TEST(LossCl, NonNegativeAndBatchedMatchesValueLevel) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const Matrix s = rng.normal_matrix(6, 5), g = rng.normal_matrix(6, 5);
    const double v = loss_cl(BatchFeatures(s, g));
    EXPECT_GE(v, 0.0);
    ad::Tape tape;
    EXPECT_EQ(loss_cl(tape.constant(s), tape.constant(g)).scalar(), v);
  }
}

TEST(LossCl, RejectsMismatchedBatches) {
  EXPECT_THROW(BatchFeatures(Matrix::Ones(2, 3), Matrix::Ones(3, 3)), ShapeError);
}

TEST(LossCsPair, ReferenceValues) {
  const EpochContext ctx(1, 4, 45);  // gamma 0.75
  EXPECT_NEAR(loss_cs_pair(BatchFeatures(kSource, kTarget), ctx), -0.07331143831999641, 1e-14);
  LossOptions excl;
  excl.exclude_diagonal_from_g = true;
  EXPECT_NEAR(loss_cs_pair(BatchFeatures(kSource, kTarget), ctx, excl), 0.4116630446338112,
              1e-14);
}

TEST(LossCsPair, TwoByTwoHandExample) {
  // S = [[1, .9], [.9, 1]], every entry clears cos 45, gamma 1
  const Matrix f = rows({{1, 0}, {0.9, std::sqrt(0.19)}});
  const double v = loss_cs_pair(BatchFeatures(f, f), EpochContext(0, 10, 45));
  const double e = std::numbers::e;
  EXPECT_NEAR(v, -std::log((2 * e + std::exp(0.9)) / (e + std::exp(0.9))), 1e-14);
  EXPECT_NEAR(v, -0.42198076241145277, 1e-14);
}

TEST(LossCsPair, ZeroGammaIsBitwiseLossCl) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const BatchFeatures b(rng.normal_matrix(8, 4), rng.normal_matrix(8, 4));
    EXPECT_EQ(loss_cs_pair(b, EpochContext(10, 10, 45)), loss_cl(b));
    EXPECT_EQ(loss_cs_pair(b, EpochContext(3, 10, 45).without_mining()), loss_cl(b));
  }
}

TEST(LossCsPair, UnitThresholdIsLossCl) {
  const BatchFeatures b(kSource, kSource);  // diagonal similarities are exactly 1
  EXPECT_EQ(loss_cs_pair(b, EpochContext::with_cos_theta(0, 5, 1.0)), loss_cl(b));
  EXPECT_EQ(loss_cs_pair(b, EpochContext(0, 5, 0.0)), loss_cl(b));
}

TEST(LossCsPair, DecreasesAsGammaGrows) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const Matrix c = rng.normal_matrix(1, 6);
    const BatchFeatures b(c.replicate(6, 1) + 0.3 * rng.normal_matrix(6, 6),
                          c.replicate(6, 1) + 0.3 * rng.normal_matrix(6, 6));
    double prev = loss_cs_pair(b, EpochContext(10, 10, 45));
    for (int e = 9; e >= 0; --e) {
      const double cur = loss_cs_pair(b, EpochContext(e, 10, 45));
      EXPECT_LE(cur, prev + 1e-15);
      prev = cur;
    }
  }
}

FeatureSequence repeat(const Matrix& row, int levels) {
  FeatureSequence s;
  for (int i = 0; i <= levels; ++i) s.features.push_back(Vector::from_row(row));
  return s;
}

TEST(LossCsTotal, ReductionsOverLevels) {
  const EpochContext ctx(1, 4, 45);
  std::vector<FeatureSequence> src0, tgt0, src1, tgt1;
  for (int i = 0; i < 3; ++i) {
    src0.push_back(repeat(kSource.row(i), 0));
    tgt0.push_back(repeat(kTarget.row(i), 0));
    src1.push_back(repeat(kSource.row(i), 1));
    tgt1.push_back(repeat(kTarget.row(i), 1));
  }
  const BatchFeatures b(kSource, kTarget);
  EXPECT_EQ(loss_cs_total(src0, tgt0, ctx), loss_cs_pair(b, ctx));
  EXPECT_NEAR(loss_cs_total(src1, tgt1, ctx), 2 * loss_cs_pair(b, ctx), 1e-14);
  EXPECT_NEAR(loss_cs_total(src1, tgt1, EpochContext(4, 4, 45)), 2 * loss_cl(b), 1e-14);
}

TEST(LossCsTotal, LevelCountMismatchRejected) {
  ad::Tape tape;
  ad::Var a = tape.constant(kSource);
  EXPECT_THROW(loss_cs_total({a, a}, {a}, EpochContext(0, 1, 45)), ShapeError);
}

std::vector<std::vector<DiagGaussian>> grid(std::initializer_list<DiagGaussian> per_row) {
  std::vector<std::vector<DiagGaussian>> g;
  for (const auto& d : per_row) g.push_back({d});
  return g;
}

TEST(LossDr, Examples) {
  const DiagGaussian a({0.3, 1.0}, {1.0, 2.0});
  EXPECT_EQ(loss_dr(grid({a}), grid({DiagGaussian({5.0, -1.0}, {0.1, 0.2})})), 0.0);

  const double r = std::sqrt(std::log(3.0));
  const auto src = grid({DiagGaussian({0.0}, {1.0}), DiagGaussian({r}, {1.0})});
  EXPECT_NEAR(loss_dr(src, src), std::log(4.0 / 3.0), 1e-15);

  const auto same = grid({a, a, a, a});
  EXPECT_NEAR(loss_dr(same, same), std::log(4.0), 1e-10);

  const auto s = grid({DiagGaussian({0, 0}, {1, 1}), DiagGaussian({1, 0}, {0.5, 2})});
  const auto t = grid({DiagGaussian({0.5, 0}, {1, 1.5}), DiagGaussian({1, 1}, {1, 1})});
  EXPECT_NEAR(loss_dr(s, t), 0.9514132779827524, 1e-14);
}

TEST(LossDr, NoLevelsIsZeroOnTape) {
  ad::Tape tape;
  EXPECT_EQ(loss_dr(tape, {}, {}, {}, {}).scalar(), 0.0);
}

TEST(LossDr, IdenticalGridsGiveLogB) {
  Rng rng(4);
  for (int b : {1, 2, 3, 8, 32}) {
    const Matrix mu = rng.normal_matrix(1, 5);
    const Matrix sd = rng.uniform_matrix(1, 5, 0.5, 2);
    std::vector<std::vector<DiagGaussian>> g(static_cast<std::size_t>(b));
    for (auto& row : g) {
      row = {DiagGaussian(Vector::from_row(mu), Vector::from_row(sd)),
             DiagGaussian(Vector::from_row(mu), Vector::from_row(sd))};
    }
    EXPECT_NEAR(loss_dr(g, g), std::log(static_cast<double>(b)), 1e-10);
  }
}

TEST(LossTotal, Examples) {
  EXPECT_EQ(loss_total(0.0, 0.0), 0.0);
  EXPECT_EQ(loss_total(1.0, 3.0), 2.0);
  ad::Tape tape;
  ad::Var cs = tape.constant(Matrix::Constant(1, 1, 0.7));
  EXPECT_EQ(loss_total(cs, std::nullopt).scalar(), 0.7);
  EXPECT_EQ(loss_total(cs, tape.constant(Matrix::Constant(1, 1, 0.3))).scalar(), 0.5);
}

TEST(GateCacheTest, ReplayReturnsRecordedGates) {
  GateCache cache;
  cache.record_mode();
  const Matrix first = Matrix::Ones(2, 2);
  EXPECT_EQ(cache.next(first), first);
  cache.replay_mode();
  EXPECT_EQ(cache.next(Matrix::Zero(2, 2)), first);
  EXPECT_THROW(cache.next(Matrix::Zero(2, 2)), Error);
  cache.replay_mode();
  EXPECT_THROW(cache.next(Matrix::Zero(3, 3)), ShapeError);
}

}  // namespace
}  // namespace rankuncert
