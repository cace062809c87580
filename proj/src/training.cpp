// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/training.hpp"

#include <algorithm>
#include <numeric>

namespace rankuncert {

namespace {

// derive_seed streams
constexpr std::uint64_t kStreamInit = 1;
constexpr std::uint64_t kStreamShuffle = 2;
constexpr std::uint64_t kStreamNoise = 3;

void round_to_float(Matrix& m) { m = m.cast<float>().cast<double>(); }

void round_to_float(ParameterMap& group) {
  for (auto& [name, m] : group) round_to_float(m);
}

std::string batch_id(const TripletRecord& r) {
  return r.source_image_id + "+" + r.source_text_id + "->" + r.target_image_id;
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? ", " : "") + ids[i];
  return out;
}

}  // namespace

TrainState initialize_state(const TrainConfig& config, int dim) {
  config.validate();
  Rng rng(derive_seed(config.seed, kStreamInit));
  TrainState state{Model::initialize(config.model_shape(dim), rng), {}, 0};
  if (config.precision == Precision::kFloat32) {
    state.model.for_each_parameter([](const std::string&, Matrix& m) { round_to_float(m); });
  }
  return state;
}

void draw_noise(BatchInputs& inputs, int levels, Rng& rng) {
  const auto rows = inputs.source_images.rows();
  const auto cols = inputs.source_images.cols();
  inputs.source_noise.clear();
  inputs.target_noise.clear();
  for (int i = 0; i < levels; ++i) inputs.source_noise.push_back(rng.normal_matrix(rows, cols));
  for (int i = 0; i < levels; ++i) inputs.target_noise.push_back(rng.normal_matrix(rows, cols));
}

Objective build_objective(const BoundModel& model, ad::Tape& tape, const BatchInputs& inputs,
                          const EpochContext& ctx, const TrainConfig& config, GateCache* gates) {
  ad::Var source = combine(tape.constant(inputs.source_images), tape.constant(inputs.source_texts),
                           model.combiner, model.projection, model.bias);
  ad::Var target = tape.constant(inputs.targets);

  std::vector<ad::Var> source_levels{source};
  std::vector<ad::Var> target_levels{target};
  ChainTrace source_trace, target_trace;
  if (!model.source_blocks.empty()) {
    source_trace =
        chain_forward(model.source_blocks, source, inputs.source_noise, model.chain_from_f0);
    target_trace =
        chain_forward(model.target_blocks, target, inputs.target_noise, model.chain_from_f0);
    source_levels = source_trace.features;
    target_levels = target_trace.features;
  }

  const EpochContext mining = config.ablation.csu ? ctx : ctx.without_mining();
  LossOptions options;
  options.exclude_diagonal_from_g = config.exclude_diagonal_from_g;
  Objective out{loss_cs_total(source_levels, target_levels, mining, options, gates), std::nullopt,
                {}};
  if (config.ablation.dr && !model.source_blocks.empty()) {
    out.dr = loss_dr(tape, source_trace.means, source_trace.stddevs, target_trace.means,
                     target_trace.stddevs);
  }
  out.total = loss_total(out.cs, out.dr);
  return out;
}

LossBreakdown train_step(TrainState& state, const Dataset& data, std::span<const std::size_t> rows,
                         const EpochContext& ctx, const TrainConfig& config, Rng& rng) {
  const ModelShape& shape = state.model.shape();
  auto ids = [&] {
    std::vector<std::string> out;
    for (auto r : rows) out.push_back(batch_id(data.records()[r]));
    return out;
  };

  ad::Tape tape;
  const BoundModel bound = bind_model(tape, state.model);
  BatchInputs inputs{data.source_images(rows), data.source_texts(rows), data.targets(rows), {}, {}};
  draw_noise(inputs, shape.ua_length, rng);

  LossBreakdown loss;
  try {
    const Objective obj = build_objective(bound, tape, inputs, ctx, config);
    loss.cs = obj.cs.scalar();
    loss.dr = obj.dr ? obj.dr->scalar() : 0.0;
    loss.total = obj.total.scalar();
    tape.backward(obj.total);
  } catch (const PoisonedComputation& e) {
    throw NumericError("non-finite value in op '" + e.op() + "' at epoch " +
                           std::to_string(ctx.current_epoch()) + "; batch: " + join_ids(ids()),
                       ids());
  }

  ParameterMap grads;
  for (const auto& [name, var] : bound.vars) {
    if (!var.grad().allFinite()) {
      throw NumericError("non-finite gradient for '" + name + "' (L_CS=" +
                             std::to_string(loss.cs) + ", L_DR=" + std::to_string(loss.dr) +
                             ", L=" + std::to_string(loss.total) + "); batch: " + join_ids(ids()),
                         ids());
    }
    grads.emplace(name, var.grad());
  }

  ParameterMap params = state.model.parameters();
  adamw_step(params, grads, state.optimizer, config.optimizer);
  if (config.precision == Precision::kFloat32) {
    round_to_float(params);
    round_to_float(state.optimizer.first_moment);
    round_to_float(state.optimizer.second_moment);
  }
  for (const auto& [name, m] : params) {
    if (!m.allFinite()) {
      throw NumericError("update made '" + name + "' non-finite; batch: " + join_ids(ids()),
                         ids());
    }
  }
  state.model = Model::from_parameters(shape, params);
  return loss;
}

nlohmann::json EpochMetrics::to_json() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["gamma"] = gamma;
  j["L_CS"] = loss_cs;
  j["L_DR"] = loss_dr;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const std::string key = "R@" + std::to_string(ks[i]);
    j[key] = recalls.empty() ? nlohmann::json(nullptr) : nlohmann::json(recalls[i]);
  }
  return j;
}

TrainResult run_training(const TrainConfig& config, const Dataset& train,
                         const Dataset* validation, const EpochObserver& observer) {
  config.validate();
  if (train.empty()) throw ConfigError("training set is empty");
  const auto n = train.size();
  if (config.ablation.csu && n < static_cast<std::size_t>(config.batch_size)) {
    throw ConfigError("training.batch_size: " + std::to_string(config.batch_size) +
                      " exceeds the " + std::to_string(n) +
                      " training triplets; no full batch to mine");
  }
  if (validation != nullptr) {
    const std::size_t gallery = build_gallery(*validation).size();
    for (int k : config.eval_ks) {
      if (static_cast<std::size_t>(k) > gallery) {
        throw ConfigError("training.eval_ks: K=" + std::to_string(k) +
                          " exceeds the validation gallery of " + std::to_string(gallery));
      }
    }
  }

  TrainResult result;
  result.last = initialize_state(config, train.dim());
  result.best = result.last;
  double best_score = -1.0;

  const auto b = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(n);
  for (int e = 0; e < config.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(config.seed, kStreamShuffle, static_cast<std::uint64_t>(e)));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

    const EpochContext ctx(e, config.epochs, config.theta_degrees);
    double cs_sum = 0.0, dr_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < n; start += b) {
      const std::size_t count = std::min(b, n - start);
      if (count < b && config.ablation.csu) break;
      Rng noise_rng(derive_seed(config.seed, kStreamNoise, result.last.optimizer.step));
      const LossBreakdown loss =
          train_step(result.last, train, std::span(order).subspan(start, count), ctx, config,
                     noise_rng);
      cs_sum += loss.cs;
      dr_sum += loss.dr;
      ++steps;
    }
    result.last.epoch = e + 1;

    EpochMetrics metrics;
    metrics.epoch = e;
    metrics.gamma = ctx.gamma();
    metrics.loss_cs = steps ? cs_sum / steps : 0.0;
    metrics.loss_dr = steps ? dr_sum / steps : 0.0;
    metrics.ks = config.eval_ks;
    if (validation != nullptr) {
      EvalOptions options;
      options.ks = config.eval_ks;
      options.threads = config.threads;
      const RecallReport report = evaluate(result.last.model, *validation, options);
      metrics.recalls = report.recalls;
      const double score = report.recall_at(config.selection_k);
      if (score > best_score) {
        best_score = score;
        result.best = result.last;
        result.best_epoch = e;
      }
    } else {
      result.best = result.last;
      result.best_epoch = e;
    }
    result.log.push_back(metrics);
    if (observer) observer(metrics, result.last);
  }
  return result;
}

Checkpoint to_checkpoint(const TrainState& state, const TrainConfig& config) {
  Checkpoint c;
  c.config_digest = config.digest();
  c.dim = static_cast<std::uint32_t>(state.model.dim());
  c.epoch = static_cast<std::uint32_t>(state.epoch);
  c.optimizer_step = state.optimizer.step;
  c.parameters = state.model.parameters();
  c.first_moment = state.optimizer.first_moment;
  c.second_moment = state.optimizer.second_moment;
  return c;
}

TrainState from_checkpoint(const Checkpoint& checkpoint, bool chain_from_f0) {
  const int dim = static_cast<int>(checkpoint.dim);
  const ModelShape shape = Model::infer_shape(checkpoint.parameters, dim, chain_from_f0);
  TrainState state{Model::from_parameters(shape, checkpoint.parameters),
                   {checkpoint.optimizer_step, checkpoint.first_moment, checkpoint.second_moment},
                   static_cast<int>(checkpoint.epoch)};
  return state;
}

}  // namespace rankuncert
