// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rankuncert/autodiff.hpp"
#include "rankuncert/core_math.hpp"
#include "rankuncert/error.hpp"
#include "rankuncert/rng.hpp"

namespace rankuncert {
namespace {

using ad::Matrix;
using ad::Tape;
using ad::Var;

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()),
           static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

/// Central differences of `f` at `x`.
Matrix numeric_grad(const std::function<double(const Matrix&)>& f, Matrix x, double h = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double plus = f(x);
    x.data()[i] = orig - h;
    const double minus = f(x);
    x.data()[i] = orig;
    g.data()[i] = (plus - minus) / (2 * h);
  }
  return g;
}

TEST(Tape, QuadraticGradient) {
  Tape tape;
  Var x = tape.variable(mat({{1.0, 2.0}}), "x");
  Var loss = ad::sum(ad::mul(x, x));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(loss.scalar(), 5.0);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(x.grad()(0, 1), 4.0);
}

TEST(Tape, ConstantLossHasZeroGradient) {
  Tape tape;
  Var x = tape.variable(mat({{1.0, -3.0}}), "x");
  Var c = tape.constant(mat({{7.0}}));
  tape.backward(c);
  EXPECT_TRUE(x.grad().isZero(0.0));
}

TEST(Tape, BackwardRequiresScalar) {
  Tape tape;
  Var x = tape.variable(mat({{1.0, 2.0}}), "x");
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Tape, ReusedNodeAccumulates) {
  Tape tape;
  Var x = tape.variable(mat({{3.0}}), "x");
  Var y = ad::add(ad::mul(x, x), ad::scale(x, 2.0));
  tape.backward(ad::sum(y));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 8.0);
}

TEST(Tape, RepeatedBackwardIsIdempotent) {
  Tape tape;
  Var x = tape.variable(mat({{0.5, -1.5}}), "x");
  Var loss = ad::sum(ad::exp(x));
  tape.backward(loss);
  const Matrix first = x.grad();
  tape.backward(loss);
  EXPECT_EQ(first, x.grad());
}

TEST(Tape, NonFiniteOutputNamesTheOp) {
  Tape tape;
  Var x = tape.variable(mat({{800.0}}), "x");
  try {
    ad::exp(x);
    FAIL() << "expected PoisonedComputation";
  } catch (const PoisonedComputation& e) {
    EXPECT_EQ(e.op(), "exp");
  }
}

TEST(Tape, NonFiniteVariableRejected) {
  Tape tape;
  EXPECT_THROW(tape.variable(mat({{std::nan("")}}), "w"), PoisonedComputation);
}

TEST(Tape, ShapeMismatchRejected) {
  Tape tape;
  Var a = tape.variable(mat({{1.0, 2.0}}), "a");
  Var b = tape.variable(mat({{1.0}, {2.0}}), "b");
  EXPECT_THROW(ad::add(a, b), ShapeError);
  EXPECT_THROW(ad::matmul(a, a), ShapeError);
}

TEST(Tape, ClampPassesGradientInsideOnly) {
  Tape tape;
  Var x = tape.variable(mat({{-20.0, 0.5, 20.0}}), "x");
  Var y = ad::clamp(x, -10.0, 10.0);
  tape.backward(ad::sum(y));
  EXPECT_EQ(y.value(), mat({{-10.0, 0.5, 10.0}}));
  EXPECT_EQ(x.grad(), mat({{0.0, 1.0, 0.0}}));
}

TEST(Tape, ZeroNormRowNamesArgument) {
  Tape tape;
  Var a = tape.variable(mat({{1.0, 0.0}, {0.0, 0.0}}), "a");
  Var b = tape.variable(mat({{1.0, 0.0}, {0.0, 1.0}}), "b");
  try {
    ad::cosine_matrix(a, b, "source", "target");
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("'source'"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(Tape, WeightedLogSoftmaxWithOneHotWeightsIsLogSoftmax) {
  const Matrix scores = mat({{0.3, -1.2, 2.0}, {1.0, 1.0, 0.0}});
  Tape tape;
  Var s = tape.variable(scores, "s");
  Var out = ad::weighted_log_softmax_rows(s, Matrix::Identity(2, 3));
  for (Eigen::Index i = 0; i < 2; ++i) {
    EXPECT_EQ(out.value()(i, 0), ad::detail::log_softmax_at(scores.row(i).data(), 3, i));
  }
}

TEST(Tape, WeightedLogSoftmaxRejectsNegativeWeights) {
  Tape tape;
  Var s = tape.variable(mat({{0.0, 1.0}}), "s");
  EXPECT_THROW(ad::weighted_log_softmax_rows(s, mat({{1.0, -0.5}})), DomainError);
  EXPECT_THROW(ad::weighted_log_softmax_rows(s, mat({{0.0, 0.0}})), DomainError);
}

// Each fused op against central differences of its own forward pass.
struct FusedCase {
  const char* name;
  std::function<Var(Tape&, Var)> op;
  int rows;
  int cols;
};

class FusedOpGradient : public ::testing::TestWithParam<FusedCase> {};

TEST_P(FusedOpGradient, MatchesFiniteDifferences) {
  const FusedCase& c = GetParam();
  Rng rng(derive_seed(11, static_cast<std::uint64_t>(c.rows * 100 + c.cols)));
  const Matrix x0 = rng.normal_matrix(c.rows, c.cols);
  const Matrix proj = rng.normal_matrix(1, 1);  // fixed scalar weight
  auto forward = [&](const Matrix& x) {
    Tape tape;
    Var v = tape.variable(x, "x");
    return ad::sum(c.op(tape, v)).scalar() * proj(0, 0);
  };
  Tape tape;
  Var v = tape.variable(x0, "x");
  Var loss = ad::scale(ad::sum(c.op(tape, v)), proj(0, 0));
  tape.backward(loss);
  const Matrix numeric = numeric_grad(forward, x0);
  EXPECT_LT((v.grad() - numeric).norm(), 1e-6 * std::max(1.0, numeric.norm())) << c.name;
}

Matrix fixed_weights(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_matrix(rows, cols);
}

INSTANTIATE_TEST_SUITE_P(
    Ops, FusedOpGradient,
    ::testing::Values(
        FusedCase{"row_normalize",
                  [](Tape& t, Var x) {
                    return ad::mul(ad::row_normalize(x, "x"), t.constant(fixed_weights(3, 5, 1)));
                  },
                  3, 5},
        FusedCase{"cosine_matrix",
                  [](Tape& t, Var x) {
                    Var other = t.constant(fixed_weights(4, 5, 2));
                    return ad::mul(ad::cosine_matrix(x, other), t.constant(fixed_weights(3, 4, 3)));
                  },
                  3, 5},
        FusedCase{"layer_norm_rows",
                  [](Tape& t, Var x) {
                    Var gain = t.constant(fixed_weights(1, 6, 4));
                    Var bias = t.constant(fixed_weights(1, 6, 5));
                    return ad::mul(ad::layer_norm_rows(x, gain, bias, kLayerNormEps),
                                   t.constant(fixed_weights(2, 6, 6)));
                  },
                  2, 6},
        FusedCase{"token_attention",
                  [](Tape& t, Var x) {
                    Var q = t.constant(fixed_weights(2, 2, 7));
                    Var k = t.constant(fixed_weights(2, 2, 8));
                    Var v = t.constant(fixed_weights(2, 2, 9));
                    return ad::mul(ad::token_attention(x, q, k, v, 4),
                                   t.constant(fixed_weights(3, 8, 10)));
                  },
                  3, 8},
        FusedCase{"pairwise_sq_dist",
                  [](Tape& t, Var x) {
                    Var other = t.constant(fixed_weights(2, 4, 11));
                    return ad::mul(ad::pairwise_sq_dist(x, other),
                                   t.constant(fixed_weights(3, 2, 12)));
                  },
                  3, 4},
        FusedCase{"weighted_log_softmax_rows",
                  [](Tape& t, Var x) {
                    Matrix w = fixed_weights(3, 4, 13).cwiseAbs();
                    return ad::mul(ad::weighted_log_softmax_rows(x, w),
                                   t.constant(fixed_weights(3, 1, 14)));
                  },
                  3, 4},
        FusedCase{"matmul_transpose",
                  [](Tape& t, Var x) {
                    Var w = t.constant(fixed_weights(4, 3, 15));
                    return ad::mul(ad::transpose(ad::matmul(x, w)),
                                   t.constant(fixed_weights(3, 2, 16)));
                  },
                  2, 4},
        FusedCase{"concat_cols",
                  [](Tape& t, Var x) {
                    return ad::mul(ad::concat_cols(x, ad::exp(x)),
                                   t.constant(fixed_weights(2, 6, 17)));
                  },
                  2, 3}),
    [](const ::testing::TestParamInfo<FusedCase>& info) { return std::string(info.param.name); });

TEST(TokenAttention, RejectsIndivisibleWidth) {
  Tape tape;
  Var x = tape.variable(Matrix::Ones(1, 6), "x");
  Var w = tape.constant(Matrix::Identity(2, 2));
  EXPECT_THROW(ad::token_attention(x, w, w, w, 4), ShapeError);
}

}  // namespace
}  // namespace rankuncert
