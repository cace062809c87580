// SPDX-License-Identifier: Apache-2.0
//
// Training objectives over batches of features. Batches are (B x d)
// matrices whose row i on the source side and row i on the target side come
// from the same triplet.
#pragma once

#include <optional>
#include <vector>

#include "rankuncert/core_math.hpp"
#include "rankuncert/uncertainty_augmenter.hpp"

namespace rankuncert {

/// Where training is in its schedule, plus the mining threshold.
class EpochContext {
 public:
  EpochContext(int current_epoch, int total_epochs, double theta_degrees);
  static EpochContext with_cos_theta(int current_epoch, int total_epochs, double cos_theta);

  int current_epoch() const noexcept { return current_epoch_; }
  int total_epochs() const noexcept { return total_epochs_; }
  double cos_theta() const noexcept { return cos_theta_; }
  /// 1 - current_epoch / total_epochs.
  double gamma() const noexcept { return gamma_; }
  /// Same schedule with the mining weight forced to zero.
  EpochContext without_mining() const;

 private:
  EpochContext() = default;
  void validate() const;

  int current_epoch_ = 0;
  int total_epochs_ = 1;
  double cos_theta_ = 1.0;
  double gamma_ = 1.0;
};

/// gamma if similarity > cos(theta) (strictly), else 0.
double kappa(double similarity, const EpochContext& ctx);

struct LossOptions {
  /// Drop the j == i term from the mined-positive sum.
  bool exclude_diagonal_from_g = false;
};

/// Holds the mining gates of a forward pass so a later pass can reuse them
/// unchanged. Gradient checks record once and replay while perturbing inputs.
class GateCache {
 public:
  enum class Mode { kRecord, kReplay };

  void record_mode() {
    mode_ = Mode::kRecord;
    gates_.clear();
    cursor_ = 0;
  }
  void replay_mode() {
    mode_ = Mode::kReplay;
    cursor_ = 0;
  }
  /// Returns the gate to use for the next pair, given the freshly computed one.
  const Matrix& next(Matrix computed);

 private:
  Mode mode_ = Mode::kRecord;
  std::vector<Matrix> gates_;
  std::size_t cursor_ = 0;
};

/// Batch contrastive loss: mean over rows of -log softmax_j(S(s_i, t_j))[i].
ad::Var loss_cl(ad::Var source, ad::Var target);

/// Contrastive loss with in-batch targets above the angle threshold added to
/// the numerator with weight gamma. Gates carry no gradient.
ad::Var loss_cs_pair(ad::Var source, ad::Var target, const EpochContext& ctx,
                     const LossOptions& options = {}, GateCache* gates = nullptr);

/// Cross-level cross-sample loss over sequences of n + 1 feature levels per
/// side: (1 / 2n) * sum_k sum_m loss_cs_pair(level k, level m). For n = 0 the
/// single pair is taken with coefficient 1.
ad::Var loss_cs_total(const std::vector<ad::Var>& source_levels,
                      const std::vector<ad::Var>& target_levels, const EpochContext& ctx,
                      const LossOptions& options = {}, GateCache* gates = nullptr);

/// Softmax over negative 2-Wasserstein distances between source and target
/// distributions, averaged over the n levels. Zero when there are no levels.
ad::Var loss_dr(ad::Tape& tape, const std::vector<ad::Var>& source_means,
                const std::vector<ad::Var>& source_stddevs,
                const std::vector<ad::Var>& target_means,
                const std::vector<ad::Var>& target_stddevs);

/// (dr + cs) / 2, or cs alone when distribution regularization is off.
ad::Var loss_total(ad::Var cs, std::optional<ad::Var> dr);
double loss_total(double cs, double dr);

// -- plain-value entry points -----------------------------------------------

/// B aligned (source, target) feature rows.
class BatchFeatures {
 public:
  BatchFeatures(Matrix source, Matrix target);
  BatchFeatures(const std::vector<Vector>& source, const std::vector<Vector>& target);

  const Matrix& source() const noexcept { return source_; }
  const Matrix& target() const noexcept { return target_; }
  Eigen::Index size() const noexcept { return source_.rows(); }

 private:
  Matrix source_;
  Matrix target_;
};

double loss_cl(const BatchFeatures& batch);
double loss_cs_pair(const BatchFeatures& batch, const EpochContext& ctx,
                    const LossOptions& options = {});
/// `source[i]` / `target[i]` are the sequences of triplet i.
double loss_cs_total(const std::vector<FeatureSequence>& source,
                     const std::vector<FeatureSequence>& target, const EpochContext& ctx,
                     const LossOptions& options = {});
/// Grids are indexed [row i][level k - 1].
double loss_dr(const std::vector<std::vector<DiagGaussian>>& source,
               const std::vector<std::vector<DiagGaussian>>& target);

}  // namespace rankuncert
