// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rankuncert/error.hpp"

namespace rankuncert::ad {

namespace {

constexpr double kMinNorm = 1e-12;

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(std::string_view op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
  }
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw Error("operation on an unbound Var");
  return *a.tape();
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("scalar() on a " + shape_str(v) + " node");
  return v(0, 0);
}

Var Tape::push(Node node) {
  node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value, std::string name) {
  if (!value.allFinite()) {
    throw PoisonedComputation(name, "non-finite entry in variable '" + name + "'");
  }
  return push(Node{std::move(name), std::move(value), {}, {}, true});
}

Var Tape::constant(Matrix value) {
  if (!value.allFinite()) {
    throw PoisonedComputation("constant", "non-finite entry in constant input");
  }
  return push(Node{"constant", std::move(value), {}, {}, false});
}

Var Tape::record(std::string_view op, Matrix value, std::initializer_list<Var> inputs,
                 Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw Error(std::string(op) + ": input from another tape");
    needs = needs || nodes_[in.id()].needs_grad;
  }
  if (!value.allFinite()) {
    throw PoisonedComputation(std::string(op),
                              "op '" + std::string(op) + "' produced a non-finite value");
  }
  return push(Node{std::string(op), std::move(value), {}, needs ? std::move(backward) : Backward{},
                   needs});
}

const Matrix& Tape::grad(std::size_t id) const { return nodes_[id].grad; }

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw Error("backward: loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + shape_str(loss.value()));
  }
  for (auto& node : nodes_) node.grad.setZero();
  if (!nodes_[loss.id()].needs_grad) return;
  nodes_[loss.id()].grad(0, 0) = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.backward) node.backward(*this, i);
  }
}

// -- elementwise and structural ------------------------------------------

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).record("add", a.value() + b.value(), {a, b}, [ia, ib](Tape& t, std::size_t s) {
    t.accumulate(ia, t.grad(s));
    t.accumulate(ib, t.grad(s));
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).record("sub", a.value() - b.value(), {a, b}, [ia, ib](Tape& t, std::size_t s) {
    t.accumulate(ia, t.grad(s));
    t.accumulate(ib, -t.grad(s));
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).record("mul", a.value().cwiseProduct(b.value()), {a, b},
                           [ia, ib](Tape& t, std::size_t s) {
                             const Matrix& g = t.grad(s);
                             t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                             t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                           });
}

Var scale(Var a, double factor) {
  const auto ia = a.id();
  return tape_of(a).record("scale", a.value() * factor, {a},
                           [ia, factor](Tape& t, std::size_t s) {
                             t.accumulate(ia, t.grad(s) * factor);
                           });
}

Var add_row(Var x, Var row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeError("add_row: expected 1x" + std::to_string(x.cols()) + " row, got " +
                     shape_str(row.value()));
  }
  const auto ix = x.id(), ir = row.id();
  Matrix out = x.value().rowwise() + row.value().row(0);
  return tape_of(x).record("add_row", std::move(out), {x, row}, [ix, ir](Tape& t, std::size_t s) {
    t.accumulate(ix, t.grad(s));
    t.accumulate(ir, t.grad(s).colwise().sum());
  });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.value()) + " * " + shape_str(b.value()));
  }
  const auto ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return tape_of(a).record("matmul", std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t s) {
    const Matrix& g = t.grad(s);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var transpose(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().transpose();
  return tape_of(a).record("transpose", std::move(out), {a}, [ia](Tape& t, std::size_t s) {
    t.accumulate(ia, t.grad(s).transpose());
  });
}

Var exp(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().array().exp().matrix();
  return tape_of(a).record("exp", std::move(out), {a}, [ia](Tape& t, std::size_t s) {
    t.accumulate(ia, t.grad(s).cwiseProduct(t.value(s)));
  });
}

Var clamp(Var a, double lo, double hi) {
  const auto ia = a.id();
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return tape_of(a).record("clamp", std::move(out), {a}, [ia, lo, hi](Tape& t, std::size_t s) {
    const Matrix& x = t.value(ia);
    Matrix pass = ((x.array() > lo) && (x.array() < hi)).cast<double>().matrix();
    t.accumulate(ia, t.grad(s).cwiseProduct(pass));
  });
}

Var sum(Var a) {
  const auto ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return tape_of(a).record("sum", std::move(out), {a}, [ia](Tape& t, std::size_t s) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), t.grad(s)(0, 0)));
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: row mismatch " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
  }
  const auto ia = a.id(), ib = b.id();
  const auto ca = a.cols(), cb = b.cols();
  Matrix out(a.rows(), ca + cb);
  out << a.value(), b.value();
  return tape_of(a).record("concat_cols", std::move(out), {a, b},
                           [ia, ib, ca, cb](Tape& t, std::size_t s) {
                             const Matrix& g = t.grad(s);
                             t.accumulate(ia, g.leftCols(ca));
                             t.accumulate(ib, g.rightCols(cb));
                           });
}

// -- fused model ops ------------------------------------------------------

Var row_normalize(Var x, std::string_view label) {
  const Matrix& xv = x.value();
  Eigen::VectorXd norms = xv.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms[r] > kMinNorm)) {
      throw DomainError("zero-norm vector in argument '" + std::string(label) + "' (row " +
                        std::to_string(r) + ")");
    }
  }
  Matrix out = norms.cwiseInverse().asDiagonal() * xv;
  const auto ix = x.id();
  return tape_of(x).record("row_normalize", std::move(out), {x},
                           [ix, norms](Tape& t, std::size_t s) {
                             const Matrix& u = t.value(s);
                             const Matrix& g = t.grad(s);
                             Eigen::VectorXd ug = u.cwiseProduct(g).rowwise().sum();
                             Matrix dx = g - ug.asDiagonal() * u;
                             t.accumulate(ix, norms.cwiseInverse().asDiagonal() * dx);
                           });
}

Var cosine_matrix(Var a, Var b, std::string_view a_label, std::string_view b_label) {
  if (a.cols() != b.cols()) {
    throw ShapeError("cosine_matrix: dim mismatch " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()));
  }
  return matmul(row_normalize(a, a_label), transpose(row_normalize(b, b_label)));
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  const Eigen::Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(d));
  }
  const Matrix& xv = x.value();
  const Eigen::Index rows = xv.rows();
  Matrix xhat(rows, d);
  Eigen::VectorXd inv(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv[r];
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape_of(x).record(
      "layer_norm", std::move(out), {x, gain, bias},
      [ix, ig, ib, xhat = std::move(xhat), inv](Tape& t, std::size_t s) {
        const Matrix& g = t.grad(s);
        t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        t.accumulate(ib, g.colwise().sum());
        if (!t.needs_grad(ix)) return;
        Matrix dxhat = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const double m1 = dxhat.row(r).mean();
          const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
          dx.row(r) = inv[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        t.accumulate(ix, dx);
      });
}

Var token_attention(Var x, Var wq, Var wk, Var wv, int tokens) {
  const Eigen::Index d = x.cols();
  if (tokens <= 0 || d % tokens != 0) {
    throw ShapeError("token_attention: " + std::to_string(tokens) + " tokens do not divide dim " +
                     std::to_string(d));
  }
  const Eigen::Index m = tokens;
  const Eigen::Index w = d / m;
  for (Var p : {wq, wk, wv}) {
    if (p.rows() != w || p.cols() != w) {
      throw ShapeError("token_attention: projection must be " + std::to_string(w) + "x" +
                       std::to_string(w) + ", got " + shape_str(p.value()));
    }
  }
  using Map = Eigen::Map<const Matrix>;
  using MutMap = Eigen::Map<Matrix>;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(w));
  const Matrix& xv = x.value();
  const Eigen::Index rows = xv.rows();
  Matrix out(rows, d);
  Matrix attn(rows, m * m);
  for (Eigen::Index r = 0; r < rows; ++r) {
    Map tok(xv.row(r).data(), m, w);
    Matrix q = tok * wq.value();
    Matrix k = tok * wk.value();
    Matrix v = tok * wv.value();
    Matrix scores = q * k.transpose() * inv_sqrt;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double mx = scores.row(i).maxCoeff();
      scores.row(i) = (scores.row(i).array() - mx).exp();
      scores.row(i) /= scores.row(i).sum();
    }
    MutMap(attn.row(r).data(), m, m) = scores;
    MutMap(out.row(r).data(), m, w) = scores * v;
  }
  const auto ix = x.id(), iq = wq.id(), ik = wk.id(), iv = wv.id();
  return tape_of(x).record(
      "attention", std::move(out), {x, wq, wk, wv},
      [ix, iq, ik, iv, m, w, inv_sqrt, attn = std::move(attn)](Tape& t, std::size_t s) {
        const Matrix& xv = t.value(ix);
        const Matrix& g = t.grad(s);
        const Matrix& q_w = t.value(iq);
        const Matrix& k_w = t.value(ik);
        const Matrix& v_w = t.value(iv);
        Matrix dwq = Matrix::Zero(w, w), dwk = Matrix::Zero(w, w), dwv = Matrix::Zero(w, w);
        Matrix dx(xv.rows(), xv.cols());
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
          Map tok(xv.row(r).data(), m, w);
          Map a(attn.row(r).data(), m, m);
          Map dout(g.row(r).data(), m, w);
          Matrix q = tok * q_w;
          Matrix k = tok * k_w;
          Matrix v = tok * v_w;
          Matrix da = dout * v.transpose();
          Matrix dv = a.transpose() * dout;
          Eigen::VectorXd rowdot = da.cwiseProduct(a).rowwise().sum();
          Matrix dscores = (a.array() * (da.colwise() - rowdot).array()).matrix() * inv_sqrt;
          Matrix dq = dscores * k;
          Matrix dk = dscores.transpose() * q;
          MutMap(dx.row(r).data(), m, w) =
              dq * q_w.transpose() + dk * k_w.transpose() + dv * v_w.transpose();
          dwq += tok.transpose() * dq;
          dwk += tok.transpose() * dk;
          dwv += tok.transpose() * dv;
        }
        t.accumulate(ix, dx);
        t.accumulate(iq, dwq);
        t.accumulate(ik, dwk);
        t.accumulate(iv, dwv);
      });
}

Var pairwise_sq_dist(Var a, Var b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("pairwise_sq_dist: dim mismatch " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()));
  }
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out(av.rows(), bv.rows());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    for (Eigen::Index j = 0; j < bv.rows(); ++j) {
      out(i, j) = (av.row(i) - bv.row(j)).squaredNorm();
    }
  }
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).record("pairwise_sq_dist", std::move(out), {a, b},
                           [ia, ib](Tape& t, std::size_t s) {
                             const Matrix& g = t.grad(s);
                             const Matrix& av = t.value(ia);
                             const Matrix& bv = t.value(ib);
                             Eigen::VectorXd rs = g.rowwise().sum();
                             Eigen::VectorXd cs = g.colwise().sum().transpose();
                             t.accumulate(ia, 2.0 * (rs.asDiagonal() * av - g * bv));
                             t.accumulate(ib, 2.0 * (cs.asDiagonal() * bv - g.transpose() * av));
                           });
}

namespace detail {

double log_softmax_at(const double* scores, Eigen::Index count, Eigen::Index index) {
  double mx = scores[0];
  for (Eigen::Index j = 1; j < count; ++j) mx = std::max(mx, scores[j]);
  double total = 0.0;
  for (Eigen::Index j = 0; j < count; ++j) total += std::exp(scores[j] - mx);
  return (scores[index] - mx) - std::log(total);
}

}  // namespace detail

namespace {

// Column of the single 1.0 entry when the row is exactly one-hot, else -1.
Eigen::Index one_hot_column(const Matrix& w, Eigen::Index r) {
  Eigen::Index col = -1;
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    if (w(r, j) == 0.0) continue;
    if (w(r, j) != 1.0 || col >= 0) return -1;
    col = j;
  }
  return col;
}

}  // namespace

Var weighted_log_softmax_rows(Var scores, const Matrix& weights) {
  const Matrix& sv = scores.value();
  if (weights.rows() != sv.rows() || weights.cols() != sv.cols()) {
    throw ShapeError("weighted_log_softmax_rows: weights " + shape_str(weights) + " vs scores " +
                     shape_str(sv));
  }
  const Eigen::Index rows = sv.rows(), cols = sv.cols();
  Matrix out(rows, 1);
  Matrix softmax(rows, cols);   // e^{s_j} / sum_j e^{s_j}
  Matrix weighted(rows, cols);  // w_j e^{s_j} / sum_j w_j e^{s_j}
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mx = sv.row(r).maxCoeff();
    Eigen::RowVectorXd e = (sv.row(r).array() - mx).exp();
    const double denom = e.sum();
    softmax.row(r) = e / denom;
    const Eigen::Index hot = one_hot_column(weights, r);
    if (hot >= 0) {
      out(r, 0) = detail::log_softmax_at(sv.row(r).data(), cols, hot);
      weighted.row(r).setZero();
      weighted(r, hot) = 1.0;
      continue;
    }
    if ((weights.row(r).array() < 0.0).any()) {
      throw DomainError("weighted_log_softmax_rows: negative weight in row " + std::to_string(r));
    }
    Eigen::RowVectorXd we = weights.row(r).cwiseProduct(e);
    const double num = we.sum();
    if (!(num > 0.0)) {
      throw DomainError("weighted_log_softmax_rows: row " + std::to_string(r) +
                        " has no positive mass");
    }
    weighted.row(r) = we / num;
    out(r, 0) = std::log(num) - std::log(denom);
  }
  const auto is = scores.id();
  return tape_of(scores).record(
      "log_softmax", std::move(out), {scores},
      [is, softmax = std::move(softmax), weighted = std::move(weighted)](Tape& t, std::size_t s) {
        const Matrix& g = t.grad(s);
        t.accumulate(is, g.col(0).asDiagonal() * (weighted - softmax));
      });
}

}  // namespace rankuncert::ad
