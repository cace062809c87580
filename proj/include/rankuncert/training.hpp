// SPDX-License-Identifier: Apache-2.0
//
// Optimization loop: batches of triplets go through the combiner and both UA
// chains, the total objective is differentiated on a fresh tape per step and
// AdamW updates the parameters. Evaluation during training uses the combiner
// only, as at test time.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "rankuncert/checkpoint.hpp"
#include "rankuncert/data.hpp"
#include "rankuncert/error.hpp"
#include "rankuncert/evaluation.hpp"
#include "rankuncert/losses.hpp"
#include "rankuncert/model.hpp"
#include "rankuncert/optimizer.hpp"

namespace rankuncert {

enum class Precision {
  kFloat32,  // parameters and moments rounded to float after every update
  kFloat64,
};
std::string_view precision_name(Precision p);
Precision parse_precision(std::string_view name);

/// Which parts of the method are active.
struct Ablation {
  bool isu = true;  // UA chains
  bool csu = true;  // mined in-batch positives
  bool dr = true;   // distribution regularization, needs isu

  /// baseline, csu, isu, isu_csu, full.
  static Ablation preset(std::string_view name);
  /// Preset name when the toggles match one, else "custom".
  std::string name() const;

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct TrainConfig {
  int batch_size = 32;
  int epochs = 100;
  double theta_degrees = 45.0;
  int n_ua = 2;
  std::uint64_t seed = 0;
  CombinerMode combiner = CombinerMode::kAdd;
  Ablation ablation;
  AdamWHyper optimizer;
  int ua_tokens = 8;
  bool separate_variance_head = false;
  bool chain_from_f0 = false;
  bool exclude_diagonal_from_g = false;
  Precision precision = Precision::kFloat32;
  std::vector<int> eval_ks = {1, 5, 10, 50};
  /// Validation R@K that picks the retained checkpoint.
  int selection_k = 10;
  int threads = 1;

  /// Throws ConfigError naming the offending field as "section.key".
  void validate() const;
  /// UA blocks per side after the ablation is applied.
  int ua_length() const { return ablation.isu ? n_ua : 0; }
  ModelShape model_shape(int dim) const;
  /// Canonical INI rendering; every field, fixed order.
  std::string to_ini() const;
  /// FNV-1a 64 of `to_ini()`, excluding `threads`.
  std::uint64_t digest() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Applies the keys of an INI document on top of `base`. Sections:
/// [training], [optimizer], [losses], [uncertainty_augmenter].
TrainConfig parse_config_ini(std::string_view text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});

struct TrainState {
  Model model;
  AdamWState optimizer;
  int epoch = 0;  // completed epochs
};

TrainState initialize_state(const TrainConfig& config, int dim);

/// Raw inputs of one step.
struct BatchInputs {
  Matrix source_images;
  Matrix source_texts;
  Matrix targets;
  std::vector<Matrix> source_noise;  // one per UA level
  std::vector<Matrix> target_noise;
};

/// Standard normal noise for every UA level of both sides, source first.
void draw_noise(BatchInputs& inputs, int levels, Rng& rng);

struct Objective {
  ad::Var cs;
  std::optional<ad::Var> dr;
  ad::Var total;
};

/// combine -> UA chains -> cross-sample loss -> distribution loss -> total.
/// Mining is disabled when the ablation turns CSU off.
Objective build_objective(const BoundModel& model, ad::Tape& tape, const BatchInputs& inputs,
                          const EpochContext& ctx, const TrainConfig& config,
                          GateCache* gates = nullptr);

struct LossBreakdown {
  double cs = 0.0;
  double dr = 0.0;
  double total = 0.0;
};

/// Raised when a step produces a NaN or Inf.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::vector<std::string> batch_ids)
      : Error(what), batch_ids_(std::move(batch_ids)) {}
  const std::vector<std::string>& batch_ids() const noexcept { return batch_ids_; }

 private:
  std::vector<std::string> batch_ids_;
};

/// Forward, backward and one AdamW update on the triplets `rows` of `data`.
/// Noise comes from `rng`.
LossBreakdown train_step(TrainState& state, const Dataset& data, std::span<const std::size_t> rows,
                         const EpochContext& ctx, const TrainConfig& config, Rng& rng);

struct EpochMetrics {
  int epoch = 0;
  double gamma = 0.0;
  double loss_cs = 0.0;  // mean over the epoch's steps
  double loss_dr = 0.0;
  std::vector<int> ks;
  std::vector<double> recalls;  // empty without validation data

  nlohmann::json to_json() const;
};

struct TrainResult {
  TrainState last;
  TrainState best;  // highest validation R@selection_k, earliest on ties
  int best_epoch = -1;
  std::vector<EpochMetrics> log;
};

using EpochObserver = std::function<void(const EpochMetrics&, const TrainState&)>;

/// Runs `config.epochs` epochs from a fresh state. Without validation data
/// the last state is also the best one.
TrainResult run_training(const TrainConfig& config, const Dataset& train,
                         const Dataset* validation = nullptr, const EpochObserver& observer = {});

Checkpoint to_checkpoint(const TrainState& state, const TrainConfig& config);
/// Rebuilds a state; the UA structure is read off the tensor names.
TrainState from_checkpoint(const Checkpoint& checkpoint, bool chain_from_f0 = false);

}  // namespace rankuncert
