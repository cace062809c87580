// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode gradient tape over dense row-major matrices.
//
// Every operation records its value and a closure that pushes the output
// gradient back to its inputs. Operations are coarse (a whole LayerNorm over
// a batch is one node) so a training step records a few dozen nodes rather
// than millions of scalars. All arithmetic is 64-bit.
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace rankuncert::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  /// Gradient of the last `backward()` loss with respect to this node.
  /// All zeros when the loss does not depend on it.
  const Matrix& grad() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Single-writer recording of one forward computation.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives a gradient.
  Var variable(Matrix value, std::string name = "variable");
  /// Leaf that never receives a gradient.
  Var constant(Matrix value);

  /// Records an operation. Throws PoisonedComputation if `value` holds a
  /// NaN or Inf. `backward` is dropped when no input needs a gradient.
  Var record(std::string_view op, Matrix value, std::initializer_list<Var> inputs,
             Backward backward);

  /// Back-propagates from a 1x1 node. Every node's gradient is reset first.
  void backward(Var loss);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Adds `delta` into the gradient of node `id` if it needs one.
  template <class Expr>
  void accumulate(std::size_t id, const Expr& delta) {
    auto& node = nodes_[id];
    if (node.needs_grad) node.grad += delta;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::string& op_name(std::size_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    std::string op;
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
};

// -- elementwise and structural ------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// `x` is (rows x d), `row` is (1 x d); adds `row` to every row of `x`.
Var add_row(Var x, Var row);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var exp(Var a);
/// Gradient is passed through only where lo < a < hi.
Var clamp(Var a, double lo, double hi);
Var sum(Var a);
Var mean(Var a);
Var concat_cols(Var a, Var b);

// -- fused model ops ------------------------------------------------------

/// Divides every row by its L2 norm. A zero row is a DomainError that names
/// `label` and the row index.
Var row_normalize(Var x, std::string_view label);

/// Cosine similarity of every row of `a` against every row of `b`.
Var cosine_matrix(Var a, Var b, std::string_view a_label = "a",
                  std::string_view b_label = "b");

/// Row-wise LayerNorm with a variance guard `eps` inside the square root.
Var layer_norm_rows(Var x, Var gain, Var bias, double eps);

/// Splits each row of `x` into `tokens` equal chunks and applies one
/// single-head scaled dot-product self-attention across the chunks. The
/// projection matrices are (chunk x chunk) and shared by all chunks.
Var token_attention(Var x, Var wq, Var wk, Var wv, int tokens);

/// (rows(a) x rows(b)) matrix of squared Euclidean distances between rows.
Var pairwise_sq_dist(Var a, Var b);

/// Row-wise log of the weighted softmax mass:
///   out_i = log(sum_j w_ij exp(s_ij)) - log(sum_j exp(s_ij)).
/// `weights` is a constant, non-negative (rows x cols) matrix and every row
/// must carry positive mass. Rows whose weights are exactly one-hot with value
/// 1 take the plain log-softmax path, so a one-hot weight matrix reproduces
/// `log_softmax_at` bit for bit. Output is (rows x 1).
Var weighted_log_softmax_rows(Var scores, const Matrix& weights);

namespace detail {
/// scores[index] - logsumexp(scores), max-subtracted.
double log_softmax_at(const double* scores, Eigen::Index count, Eigen::Index index);
}  // namespace detail

}  // namespace rankuncert::ad
