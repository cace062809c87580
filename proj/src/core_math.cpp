// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/core_math.hpp"

#include <cmath>

#include "rankuncert/error.hpp"

namespace rankuncert {

namespace {

void require_dims(std::string_view what, std::size_t a, std::size_t b) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": dim mismatch " + std::to_string(a) + " vs " +
                     std::to_string(b));
  }
}

}  // namespace

Vector::Vector(std::vector<double> data) : data_(std::move(data)) {
  if (data_.empty()) throw ShapeError("Vector: dim must be >= 1");
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw DomainError("Vector: non-finite entry at index " + std::to_string(i));
    }
  }
}

Vector Vector::from_row(const Matrix& row) {
  if (row.rows() != 1) throw ShapeError("Vector::from_row: expected a single row");
  return Vector(std::vector<double>(row.data(), row.data() + row.size()));
}

Matrix Vector::as_row() const {
  Matrix m(1, static_cast<Eigen::Index>(data_.size()));
  for (std::size_t i = 0; i < data_.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = data_[i];
  return m;
}

DiagGaussian::DiagGaussian(Vector mean, Vector stddev)
    : mean_(std::move(mean)), stddev_(std::move(stddev)) {
  require_dims("DiagGaussian", mean_.dim(), stddev_.dim());
  for (std::size_t i = 0; i < stddev_.dim(); ++i) {
    if (!(stddev_[i] > 0.0)) {
      throw DomainError("DiagGaussian: stddev must be > 0 (index " + std::to_string(i) + ")");
    }
  }
}

double cosine_similarity(const Vector& a, const Vector& b) {
  require_dims("cosine_similarity", a.dim(), b.dim());
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (!(na > 1e-12)) throw DomainError("cosine_similarity: zero-norm vector in argument 'a'");
  if (!(nb > 1e-12)) throw DomainError("cosine_similarity: zero-norm vector in argument 'b'");
  return dot / (na * nb);
}

double log_softmax_row(const Vector& scores, std::size_t index) {
  if (index >= scores.dim()) {
    throw IndexError("log_softmax_row: index " + std::to_string(index) + " out of range for dim " +
                     std::to_string(scores.dim()));
  }
  return ad::detail::log_softmax_at(scores.values().data(),
                                    static_cast<Eigen::Index>(scores.dim()),
                                    static_cast<Eigen::Index>(index));
}

Vector layer_norm(const Vector& x, const Vector& gain, const Vector& bias) {
  require_dims("layer_norm gain", x.dim(), gain.dim());
  require_dims("layer_norm bias", x.dim(), bias.dim());
  const double n = static_cast<double>(x.dim());
  double mu = 0.0;
  for (double v : x.values()) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x.values()) var += (v - mu) * (v - mu);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  std::vector<double> out(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) out[i] = (x[i] - mu) * inv * gain[i] + bias[i];
  return Vector(std::move(out));
}

double wasserstein2_sq(const DiagGaussian& p, const DiagGaussian& q) {
  require_dims("wasserstein2_sq", p.dim(), q.dim());
  double total = 0.0;
  for (std::size_t i = 0; i < p.dim(); ++i) {
    const double dm = p.mean()[i] - q.mean()[i];
    const double ds = p.stddev()[i] - q.stddev()[i];
    total += dm * dm + ds * ds;
  }
  return total;
}

namespace ad {

Var wasserstein2_sq_matrix(Var mean_p, Var stddev_p, Var mean_q, Var stddev_q) {
  if (mean_p.rows() != stddev_p.rows() || mean_p.cols() != stddev_p.cols() ||
      mean_q.rows() != stddev_q.rows() || mean_q.cols() != stddev_q.cols()) {
    throw ShapeError("wasserstein2_sq_matrix: mean/stddev shapes differ");
  }
  return add(pairwise_sq_dist(mean_p, mean_q), pairwise_sq_dist(stddev_p, stddev_q));
}

}  // namespace ad

namespace {

std::map<std::string, ad::Var> bind(ad::Tape& tape, const ParameterMap& params) {
  std::map<std::string, ad::Var> vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.variable(value, name));
  return vars;
}

}  // namespace

ValueAndGrad grad(const LossBuilder& loss, const ParameterMap& params) {
  ad::Tape tape;
  auto vars = bind(tape, params);
  ad::Var out = loss(tape, vars);
  tape.backward(out);
  ValueAndGrad result;
  result.value = out.scalar();
  for (const auto& [name, var] : vars) result.gradients.emplace(name, var.grad());
  return result;
}

double evaluate(const LossBuilder& loss, const ParameterMap& params) {
  ad::Tape tape;
  auto vars = bind(tape, params);
  return loss(tape, vars).scalar();
}

}  // namespace rankuncert
