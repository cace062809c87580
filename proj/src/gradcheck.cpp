// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>

#include "rankuncert/core_math.hpp"
#include "rankuncert/error.hpp"
#include "rankuncert/losses.hpp"
#include "rankuncert/model.hpp"
#include "rankuncert/rng.hpp"
#include "rankuncert/training.hpp"
#include "rankuncert/uncertainty_augmenter.hpp"

namespace rankuncert {

namespace {

constexpr double kErrorFloor = 1e-6;
constexpr int kBatchSizes[] = {2, 4, 8};
constexpr int kDims[] = {8, 16, 64};
constexpr int kLevels[] = {1, 2};

struct Case {
  int batch;
  int dim;
  int levels;
  int index;
};

struct Instance {
  ParameterMap params;
  LossBuilder loss;
  std::shared_ptr<GateCache> gates;
};

using Factory = std::function<Instance(Rng&, const Case&)>;

/// Weighted sum that turns any output into a scalar with a dense gradient.
ad::Var project(ad::Var out, const Matrix& weights) {
  return ad::sum(ad::mul(out, out.tape()->constant(weights)));
}

/// Rows drawn around two directions so that some pairs clear a 45 degree
/// mining threshold.
Matrix clustered(Rng& rng, int rows, int dim, const Matrix& centers) {
  Matrix out = 0.2 * rng.normal_matrix(rows, dim);
  for (int i = 0; i < rows; ++i) out.row(i) += centers.row(i % centers.rows());
  return out;
}

Matrix centers(Rng& rng, int dim) {
  Matrix c = rng.normal_matrix(2, dim);
  for (int i = 0; i < 2; ++i) c.row(i) *= 3.0 / c.row(i).norm();
  return c;
}

EpochContext random_context(Rng& rng) {
  const int total = 10;
  const int current = static_cast<int>(rng.uniform(0.0, 9.999));
  return EpochContext(current, total, 45.0);
}

UAOptions block_options(const Case& c) {
  UAOptions o;
  o.tokens = 8;
  o.separate_variance_head = c.index % 2 == 1;
  o.chain_from_f0 = c.index % 4 == 3;
  return o;
}

void add_block(ParameterMap& params, const std::string& prefix, int dim, const UAOptions& options,
               Rng& rng) {
  UABlock block = UABlock::initialize(dim, options, rng);
  block.for_each_parameter([&](std::string_view name, Matrix& m) {
    if (name == "ln.gain") m = rng.uniform_matrix(1, dim, 0.5, 1.5);
    if (name == "ln.bias" || name == "fc.bias" || name == "var_fc.bias") {
      m = rng.uniform_matrix(1, dim, -0.5, 0.5);
    }
    params.emplace(prefix + std::string(name), m);
  });
}

Instance make_layer_norm(Rng& rng, const Case& c) {
  Instance inst;
  inst.params["x"] = rng.normal_matrix(c.batch, c.dim);
  inst.params["gain"] = rng.uniform_matrix(1, c.dim, 0.5, 1.5);
  inst.params["bias"] = rng.uniform_matrix(1, c.dim, -0.5, 0.5);
  const Matrix w = rng.normal_matrix(c.batch, c.dim);
  inst.loss = [w](ad::Tape&, const std::map<std::string, ad::Var>& p) {
    return project(ad::layer_norm_rows(p.at("x"), p.at("gain"), p.at("bias"), kLayerNormEps), w);
  };
  return inst;
}

Instance make_combine(Rng& rng, const Case& c) {
  Instance inst;
  inst.params["img"] = rng.normal_matrix(c.batch, c.dim);
  inst.params["txt"] = rng.normal_matrix(c.batch, c.dim);
  const bool concat = c.index % 2 == 1;
  if (concat) {
    const CombinerParams comb = CombinerParams::initialize(CombinerMode::kConcatProject, c.dim, rng);
    inst.params["projection"] = comb.projection;
    inst.params["bias"] = rng.uniform_matrix(1, c.dim, -0.5, 0.5);
  }
  const Matrix w = rng.normal_matrix(c.batch, c.dim);
  inst.loss = [w, concat](ad::Tape&, const std::map<std::string, ad::Var>& p) {
    if (!concat) return project(combine(p.at("img"), p.at("txt"), CombinerMode::kAdd), w);
    return project(combine(p.at("img"), p.at("txt"), CombinerMode::kConcatProject,
                           p.at("projection"), p.at("bias")),
                   w);
  };
  return inst;
}

Instance make_ua_forward(Rng& rng, const Case& c) {
  Instance inst;
  const UAOptions options = block_options(c);
  add_block(inst.params, "ua.", c.dim, options, rng);
  inst.params["x"] = rng.normal_matrix(c.batch, c.dim);
  const Matrix noise = rng.normal_matrix(c.batch, c.dim);
  const Matrix w1 = rng.normal_matrix(c.batch, c.dim);
  const Matrix w2 = rng.normal_matrix(c.batch, c.dim);
  const Matrix w3 = rng.normal_matrix(c.batch, c.dim);
  inst.loss = [=](ad::Tape&, const std::map<std::string, ad::Var>& p) {
    const BlockVars block = block_vars(p, "ua.", options.tokens, options.separate_variance_head);
    const UAOutput out = ua_forward(block, p.at("x"), noise);
    return ad::add(ad::add(project(out.sample, w1), project(out.mean, w2)),
                   project(out.stddev, w3));
  };
  return inst;
}

Instance make_chain_forward(Rng& rng, const Case& c) {
  Instance inst;
  const UAOptions options = block_options(c);
  UAChain layout(Side::kSource, {});
  std::vector<std::string> prefixes;
  for (int i = 0; i < c.levels; ++i) {
    prefixes.push_back(layout.block_prefix(static_cast<std::size_t>(i)));
    add_block(inst.params, prefixes.back(), c.dim, options, rng);
  }
  inst.params["f0"] = rng.normal_matrix(c.batch, c.dim);
  std::vector<Matrix> noise, wf, ws;
  for (int i = 0; i < c.levels; ++i) {
    noise.push_back(rng.normal_matrix(c.batch, c.dim));
    wf.push_back(rng.normal_matrix(c.batch, c.dim));
    ws.push_back(rng.normal_matrix(c.batch, c.dim));
  }
  inst.loss = [=](ad::Tape&, const std::map<std::string, ad::Var>& p) {
    std::vector<BlockVars> blocks;
    for (const auto& prefix : prefixes) {
      blocks.push_back(block_vars(p, prefix, options.tokens, options.separate_variance_head));
    }
    const ChainTrace trace = chain_forward(blocks, p.at("f0"), noise, options.chain_from_f0);
    ad::Var total = project(trace.stddevs[0], ws[0]);
    for (std::size_t i = 0; i < noise.size(); ++i) {
      total = ad::add(total, project(trace.features[i + 1], wf[i]));
      if (i > 0) total = ad::add(total, project(trace.stddevs[i], ws[i]));
    }
    return total;
  };
  return inst;
}

Instance make_loss_cl(Rng& rng, const Case& c) {
  Instance inst;
  const Matrix ctr = centers(rng, c.dim);
  inst.params["s"] = clustered(rng, c.batch, c.dim, ctr);
  inst.params["t"] = clustered(rng, c.batch, c.dim, ctr);
  inst.loss = [](ad::Tape&, const std::map<std::string, ad::Var>& p) {
    return loss_cl(p.at("s"), p.at("t"));
  };
  return inst;
}

Instance make_loss_cs_pair(Rng& rng, const Case& c) {
  Instance inst;
  const Matrix ctr = centers(rng, c.dim);
  inst.params["s"] = clustered(rng, c.batch, c.dim, ctr);
  inst.params["t"] = clustered(rng, c.batch, c.dim, ctr);
  const EpochContext ctx = random_context(rng);
  LossOptions options;
  options.exclude_diagonal_from_g = c.index % 2 == 1;
  auto gates = std::make_shared<GateCache>();
  inst.gates = gates;
  inst.loss = [=](ad::Tape&, const std::map<std::string, ad::Var>& p) {
    return loss_cs_pair(p.at("s"), p.at("t"), ctx, options, gates.get());
  };
  return inst;
}

Instance make_loss_cs_total(Rng& rng, const Case& c) {
  Instance inst;
  const Matrix ctr = centers(rng, c.dim);
  for (int k = 0; k <= c.levels; ++k) {
    inst.params["s" + std::to_string(k)] = clustered(rng, c.batch, c.dim, ctr);
    inst.params["t" + std::to_string(k)] = clustered(rng, c.batch, c.dim, ctr);
  }
  const EpochContext ctx = random_context(rng);
  auto gates = std::make_shared<GateCache>();
  inst.gates = gates;
  const int levels = c.levels;
  inst.loss = [=](ad::Tape&, const std::map<std::string, ad::Var>& p) {
    std::vector<ad::Var> s, t;
    for (int k = 0; k <= levels; ++k) {
      s.push_back(p.at("s" + std::to_string(k)));
      t.push_back(p.at("t" + std::to_string(k)));
    }
    return loss_cs_total(s, t, ctx, {}, gates.get());
  };
  return inst;
}

Instance make_loss_dr(Rng& rng, const Case& c) {
  Instance inst;
  for (int k = 0; k < c.levels; ++k) {
    const std::string i = std::to_string(k);
    inst.params["mu_s" + i] = rng.normal_matrix(c.batch, c.dim);
    inst.params["mu_t" + i] = rng.normal_matrix(c.batch, c.dim);
    inst.params["sigma_s" + i] = rng.uniform_matrix(c.batch, c.dim, 0.5, 1.5);
    inst.params["sigma_t" + i] = rng.uniform_matrix(c.batch, c.dim, 0.5, 1.5);
  }
  const int levels = c.levels;
  inst.loss = [levels](ad::Tape& tape, const std::map<std::string, ad::Var>& p) {
    std::vector<ad::Var> ms, ss, mt, st;
    for (int k = 0; k < levels; ++k) {
      const std::string i = std::to_string(k);
      ms.push_back(p.at("mu_s" + i));
      ss.push_back(p.at("sigma_s" + i));
      mt.push_back(p.at("mu_t" + i));
      st.push_back(p.at("sigma_t" + i));
    }
    return loss_dr(tape, ms, ss, mt, st);
  };
  return inst;
}

Instance make_loss_total(Rng& rng, const Case& c) {
  Instance inst;
  TrainConfig config;
  config.combiner = CombinerMode::kConcatProject;
  config.n_ua = c.levels;
  config.separate_variance_head = c.index % 2 == 1;
  config.chain_from_f0 = c.index % 4 == 3;
  config.exclude_diagonal_from_g = c.index % 3 == 2;
  const ModelShape shape = config.model_shape(c.dim);
  const Model model = Model::initialize(shape, rng);
  inst.params = model.parameters();

  const Matrix ctr = centers(rng, c.dim);
  BatchInputs inputs{clustered(rng, c.batch, c.dim, ctr), 0.5 * rng.normal_matrix(c.batch, c.dim),
                     clustered(rng, c.batch, c.dim, ctr), {}, {}};
  draw_noise(inputs, c.levels, rng);
  const EpochContext ctx = random_context(rng);
  auto gates = std::make_shared<GateCache>();
  inst.gates = gates;
  inst.loss = [=](ad::Tape& tape, const std::map<std::string, ad::Var>& p) {
    const BoundModel bound = bind_model(shape, p);
    return build_objective(bound, tape, inputs, ctx, config, gates.get()).total;
  };
  return inst;
}

const std::vector<std::pair<std::string, Factory>>& registry() {
  static const std::vector<std::pair<std::string, Factory>> table = {
      {"layer_norm", make_layer_norm},       {"combine", make_combine},
      {"ua_forward", make_ua_forward},       {"chain_forward", make_chain_forward},
      {"loss_cl", make_loss_cl},             {"loss_cs_pair", make_loss_cs_pair},
      {"loss_cs_total", make_loss_cs_total}, {"loss_dr", make_loss_dr},
      {"loss_total", make_loss_total},
  };
  return table;
}

double check_instance(Instance& inst, Rng& rng, const GradcheckOptions& options, bool faulty) {
  if (inst.gates) inst.gates->record_mode();
  ValueAndGrad analytic = grad(inst.loss, inst.params);
  if (faulty) {
    for (auto& [name, g] : analytic.gradients) g *= 1.01;
  }
  auto value_at = [&](ParameterMap& params) {
    if (inst.gates) inst.gates->replay_mode();
    return evaluate(inst.loss, params);
  };

  const int per_tensor =
      std::max(1, options.coordinates / static_cast<int>(inst.params.size()));
  ParameterMap work = inst.params;
  double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
  for (auto& [name, m] : work) {
    const Matrix& g = analytic.gradients.at(name);
    for (int s = 0; s < per_tensor; ++s) {
      const auto idx = std::min<Eigen::Index>(
          m.size() - 1, static_cast<Eigen::Index>(rng.uniform(0.0, static_cast<double>(m.size()))));
      const double original = m.data()[idx];
      m.data()[idx] = original + options.step;
      const double plus = value_at(work);
      m.data()[idx] = original - options.step;
      const double minus = value_at(work);
      m.data()[idx] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = g.data()[idx];
      diff_sq += (a - numeric) * (a - numeric);
      analytic_sq += a * a;
      numeric_sq += numeric * numeric;
    }
  }
  const double scale = std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), kErrorFloor});
  return std::sqrt(diff_sq) / scale;
}

}  // namespace

const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, factory] : registry()) out.push_back(name);
    return out;
  }();
  return names;
}

std::vector<ComponentResult> run_gradcheck(const GradcheckOptions& options) {
  if (options.instances < 1) throw ConfigError("gradcheck: instances must be positive");
  if (!(options.step > 0.0)) throw ConfigError("gradcheck: step must be positive");
  const auto& all = gradcheck_components();
  for (const auto& name : options.components) {
    if (std::find(all.begin(), all.end(), name) == all.end()) {
      throw ConfigError("gradcheck: unknown component '" + name + "'");
    }
  }
  if (options.inject_fault &&
      std::find(all.begin(), all.end(), *options.inject_fault) == all.end()) {
    throw ConfigError("gradcheck: unknown component '" + *options.inject_fault + "'");
  }

  std::vector<ComponentResult> results;
  for (std::size_t c = 0; c < registry().size(); ++c) {
    const auto& [name, factory] = registry()[c];
    if (!options.components.empty() &&
        std::find(options.components.begin(), options.components.end(), name) ==
            options.components.end()) {
      continue;
    }
    const bool faulty = options.inject_fault && *options.inject_fault == name;
    ComponentResult result{name, 0, 0.0, false};
    for (int i = 0; i < options.instances; ++i) {
      const Case cs{kBatchSizes[i % 3], kDims[(i / 3) % 3], kLevels[(i / 9) % 2], i};
      Rng rng(derive_seed(options.seed, c, static_cast<std::uint64_t>(i)));
      Instance inst = factory(rng, cs);
      result.max_relative_error =
          std::max(result.max_relative_error, check_instance(inst, rng, options, faulty));
      ++result.instances;
    }
    result.passed = result.max_relative_error < options.tolerance;
    results.push_back(result);
  }
  return results;
}

}  // namespace rankuncert
