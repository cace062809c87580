// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rankuncert/autodiff.hpp"

namespace rankuncert {

using ad::Matrix;

/// Variance guard added inside the LayerNorm square root.
inline constexpr double kLayerNormEps = 1e-5;

/// Finite, non-empty real vector.
class Vector {
 public:
  explicit Vector(std::vector<double> data);
  Vector(std::initializer_list<double> data) : Vector(std::vector<double>(data)) {}
  static Vector from_row(const Matrix& row);

  std::size_t dim() const noexcept { return data_.size(); }
  double operator[](std::size_t i) const { return data_[i]; }
  std::span<const double> values() const noexcept { return data_; }
  /// 1 x dim matrix.
  Matrix as_row() const;

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

/// Diagonal Gaussian N(mean, diag(stddev^2)).
class DiagGaussian {
 public:
  DiagGaussian(Vector mean, Vector stddev);

  const Vector& mean() const noexcept { return mean_; }
  const Vector& stddev() const noexcept { return stddev_; }
  std::size_t dim() const noexcept { return mean_.dim(); }

 private:
  Vector mean_;
  Vector stddev_;
};

double cosine_similarity(const Vector& a, const Vector& b);

/// scores[index] - logsumexp(scores), always max-subtracted.
double log_softmax_row(const Vector& scores, std::size_t index);

Vector layer_norm(const Vector& x, const Vector& gain, const Vector& bias);

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// |mu_p - mu_q|^2 + |sigma_p - sigma_q|^2.
double wasserstein2_sq(const DiagGaussian& p, const DiagGaussian& q);

namespace ad {
/// Pairwise squared 2-Wasserstein distances between the rows of two batches
/// of diagonal Gaussians, given as (mean, stddev) matrices.
Var wasserstein2_sq_matrix(Var mean_p, Var stddev_p, Var mean_q, Var stddev_q);
}  // namespace ad

/// Named parameter tensors.
using ParameterMap = std::map<std::string, Matrix>;

/// Builds a scalar loss on `tape` from the bound parameters.
using LossBuilder =
    std::function<ad::Var(ad::Tape& tape, const std::map<std::string, ad::Var>& params)>;

struct ValueAndGrad {
  double value = 0.0;
  ParameterMap gradients;  // same names and shapes as the inputs
};

/// Evaluates `loss` on a fresh tape and returns its exact gradient with
/// respect to every entry of `params`. Throws PoisonedComputation when any
/// recorded op produces a NaN or Inf.
ValueAndGrad grad(const LossBuilder& loss, const ParameterMap& params);

/// Loss value only, on a fresh tape.
double evaluate(const LossBuilder& loss, const ParameterMap& params);

}  // namespace rankuncert
