// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/losses.hpp"

#include <cmath>
#include <numbers>

#include "rankuncert/error.hpp"

namespace rankuncert {

EpochContext::EpochContext(int current_epoch, int total_epochs, double theta_degrees)
    : current_epoch_(current_epoch),
      total_epochs_(total_epochs),
      cos_theta_(std::cos(theta_degrees * std::numbers::pi / 180.0)) {
  validate();
  gamma_ = 1.0 - static_cast<double>(current_epoch_) / static_cast<double>(total_epochs_);
}

EpochContext EpochContext::with_cos_theta(int current_epoch, int total_epochs, double cos_theta) {
  EpochContext ctx;
  ctx.current_epoch_ = current_epoch;
  ctx.total_epochs_ = total_epochs;
  ctx.cos_theta_ = cos_theta;
  ctx.validate();
  ctx.gamma_ = 1.0 - static_cast<double>(current_epoch) / static_cast<double>(total_epochs);
  return ctx;
}

EpochContext EpochContext::without_mining() const {
  EpochContext ctx = *this;
  ctx.gamma_ = 0.0;
  return ctx;
}

void EpochContext::validate() const {
  if (total_epochs_ < 1) throw ConfigError("EpochContext: total_epochs must be >= 1");
  if (current_epoch_ < 0 || current_epoch_ > total_epochs_) {
    throw ConfigError("EpochContext: current_epoch " + std::to_string(current_epoch_) +
                      " outside [0, " + std::to_string(total_epochs_) + "]");
  }
  if (!(cos_theta_ > -1.0 && cos_theta_ <= 1.0)) {
    throw ConfigError("EpochContext: cos(theta) must lie in (-1, 1]");
  }
}

double kappa(double similarity, const EpochContext& ctx) {
  return similarity > ctx.cos_theta() ? ctx.gamma() : 0.0;
}

const Matrix& GateCache::next(Matrix computed) {
  if (mode_ == Mode::kRecord) {
    gates_.push_back(std::move(computed));
    return gates_.back();
  }
  if (cursor_ >= gates_.size()) throw Error("GateCache: replay ran past the recorded gates");
  const Matrix& gate = gates_[cursor_++];
  if (gate.rows() != computed.rows() || gate.cols() != computed.cols()) {
    throw ShapeError("GateCache: replayed gate shape differs from the current batch");
  }
  return gate;
}

namespace {

void require_batch(std::string_view op, ad::Var source, ad::Var target) {
  if (source.rows() != target.rows() || source.cols() != target.cols()) {
    throw ShapeError(std::string(op) + ": source is " + std::to_string(source.rows()) + "x" +
                     std::to_string(source.cols()) + ", target is " +
                     std::to_string(target.rows()) + "x" + std::to_string(target.cols()));
  }
  if (source.rows() < 1) throw ShapeError(std::string(op) + ": empty batch");
}

// Mean over rows of -(row log-ratio).
ad::Var negative_mean(ad::Var rows) {
  return ad::scale(ad::sum(rows), -1.0 / static_cast<double>(rows.rows()));
}

}  // namespace

ad::Var loss_cl(ad::Var source, ad::Var target) {
  require_batch("loss_cl", source, target);
  ad::Var sim = ad::cosine_matrix(source, target, "source", "target");
  const Eigen::Index b = sim.rows();
  return negative_mean(ad::weighted_log_softmax_rows(sim, Matrix::Identity(b, b)));
}

ad::Var loss_cs_pair(ad::Var source, ad::Var target, const EpochContext& ctx,
                     const LossOptions& options, GateCache* gates) {
  require_batch("loss_cs_pair", source, target);
  ad::Var sim = ad::cosine_matrix(source, target, "source", "target");
  const Matrix& s = sim.value();
  const Eigen::Index b = s.rows();
  Matrix gate(b, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) {
      gate(i, j) = (options.exclude_diagonal_from_g && i == j) ? 0.0 : kappa(s(i, j), ctx);
    }
  }
  const Matrix& used = gates != nullptr ? gates->next(std::move(gate)) : gate;
  Matrix weights = used + Matrix::Identity(b, b);
  return negative_mean(ad::weighted_log_softmax_rows(sim, weights));
}

ad::Var loss_cs_total(const std::vector<ad::Var>& source_levels,
                      const std::vector<ad::Var>& target_levels, const EpochContext& ctx,
                      const LossOptions& options, GateCache* gates) {
  if (source_levels.empty() || source_levels.size() != target_levels.size()) {
    throw ShapeError("loss_cs_total: " + std::to_string(source_levels.size()) +
                     " source levels vs " + std::to_string(target_levels.size()) +
                     " target levels");
  }
  const std::size_t n = source_levels.size() - 1;
  if (n == 0) return loss_cs_pair(source_levels[0], target_levels[0], ctx, options, gates);
  ad::Var total;
  for (std::size_t k = 0; k <= n; ++k) {
    for (std::size_t m = 0; m <= n; ++m) {
      ad::Var term = loss_cs_pair(source_levels[k], target_levels[m], ctx, options, gates);
      total = total.valid() ? ad::add(total, term) : term;
    }
  }
  return ad::scale(total, 1.0 / (2.0 * static_cast<double>(n)));
}

ad::Var loss_dr(ad::Tape& tape, const std::vector<ad::Var>& source_means,
                const std::vector<ad::Var>& source_stddevs,
                const std::vector<ad::Var>& target_means,
                const std::vector<ad::Var>& target_stddevs) {
  const std::size_t n = source_means.size();
  if (source_stddevs.size() != n || target_means.size() != n || target_stddevs.size() != n) {
    throw ShapeError("loss_dr: grids have different level counts");
  }
  if (n == 0) return tape.constant(Matrix::Zero(1, 1));
  ad::Var total;
  Eigen::Index b = 0;
  for (std::size_t k = 0; k < n; ++k) {
    require_batch("loss_dr", source_means[k], target_means[k]);
    ad::Var dist = ad::wasserstein2_sq_matrix(source_means[k], source_stddevs[k],
                                              target_means[k], target_stddevs[k]);
    b = dist.rows();
    ad::Var rows = ad::weighted_log_softmax_rows(ad::scale(dist, -1.0), Matrix::Identity(b, b));
    ad::Var level = ad::sum(rows);
    total = total.valid() ? ad::add(total, level) : level;
  }
  return ad::scale(total, -1.0 / (static_cast<double>(n) * static_cast<double>(b)));
}

ad::Var loss_total(ad::Var cs, std::optional<ad::Var> dr) {
  if (!dr) return cs;
  return ad::scale(ad::add(*dr, cs), 0.5);
}

double loss_total(double cs, double dr) { return (dr + cs) / 2.0; }

// -- plain-value entry points -----------------------------------------------

namespace {

Matrix stack_rows(const std::vector<Vector>& rows, std::string_view what) {
  if (rows.empty()) throw ShapeError(std::string(what) + ": empty batch");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].dim()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].dim() != rows[0].dim()) throw ShapeError(std::string(what) + ": ragged rows");
    m.row(static_cast<Eigen::Index>(i)) = rows[i].as_row();
  }
  return m;
}

}  // namespace

BatchFeatures::BatchFeatures(Matrix source, Matrix target)
    : source_(std::move(source)), target_(std::move(target)) {
  if (source_.rows() < 1 || source_.rows() != target_.rows() ||
      source_.cols() != target_.cols() || source_.cols() < 1) {
    throw ShapeError("BatchFeatures: source and target must be non-empty and equally shaped");
  }
  if (!source_.allFinite() || !target_.allFinite()) {
    throw DomainError("BatchFeatures: non-finite feature");
  }
}

BatchFeatures::BatchFeatures(const std::vector<Vector>& source, const std::vector<Vector>& target)
    : BatchFeatures(stack_rows(source, "BatchFeatures source"),
                    stack_rows(target, "BatchFeatures target")) {}

double loss_cl(const BatchFeatures& batch) {
  ad::Tape tape;
  return loss_cl(tape.constant(batch.source()), tape.constant(batch.target())).scalar();
}

double loss_cs_pair(const BatchFeatures& batch, const EpochContext& ctx,
                    const LossOptions& options) {
  ad::Tape tape;
  return loss_cs_pair(tape.constant(batch.source()), tape.constant(batch.target()), ctx, options)
      .scalar();
}

double loss_cs_total(const std::vector<FeatureSequence>& source,
                     const std::vector<FeatureSequence>& target, const EpochContext& ctx,
                     const LossOptions& options) {
  if (source.empty() || source.size() != target.size()) {
    throw ShapeError("loss_cs_total: source and target batches differ in size");
  }
  const std::size_t levels = source[0].features.size();
  for (const auto* side : {&source, &target}) {
    for (const auto& seq : *side) {
      if (seq.features.size() != levels) {
        throw ShapeError("loss_cs_total: sequences have different lengths");
      }
    }
  }
  ad::Tape tape;
  std::vector<ad::Var> s_levels, t_levels;
  for (std::size_t k = 0; k < levels; ++k) {
    std::vector<Vector> s_rows, t_rows;
    for (std::size_t i = 0; i < source.size(); ++i) {
      s_rows.push_back(source[i].features[k]);
      t_rows.push_back(target[i].features[k]);
    }
    s_levels.push_back(tape.constant(stack_rows(s_rows, "loss_cs_total")));
    t_levels.push_back(tape.constant(stack_rows(t_rows, "loss_cs_total")));
  }
  return loss_cs_total(s_levels, t_levels, ctx, options).scalar();
}

double loss_dr(const std::vector<std::vector<DiagGaussian>>& source,
               const std::vector<std::vector<DiagGaussian>>& target) {
  if (source.empty() || source.size() != target.size()) {
    throw ShapeError("loss_dr: source and target grids differ in batch size");
  }
  const std::size_t n = source[0].size();
  for (const auto* grid : {&source, &target}) {
    for (const auto& row : *grid) {
      if (row.size() != n) throw ShapeError("loss_dr: grids differ in level count");
    }
  }
  ad::Tape tape;
  std::vector<ad::Var> sm, ss, tm, ts;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<Vector> a, b, c, d;
    for (std::size_t i = 0; i < source.size(); ++i) {
      a.push_back(source[i][k].mean());
      b.push_back(source[i][k].stddev());
      c.push_back(target[i][k].mean());
      d.push_back(target[i][k].stddev());
    }
    sm.push_back(tape.constant(stack_rows(a, "loss_dr")));
    ss.push_back(tape.constant(stack_rows(b, "loss_dr")));
    tm.push_back(tape.constant(stack_rows(c, "loss_dr")));
    ts.push_back(tape.constant(stack_rows(d, "loss_dr")));
  }
  return loss_dr(tape, sm, ss, tm, ts).scalar();
}

}  // namespace rankuncert
