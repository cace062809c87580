// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/model.hpp"

#include <cmath>

#include "rankuncert/error.hpp"

namespace rankuncert {

std::string_view combiner_mode_name(CombinerMode mode) {
  return mode == CombinerMode::kAdd ? "add" : "concat_project";
}

CombinerMode parse_combiner_mode(std::string_view name) {
  if (name == "add") return CombinerMode::kAdd;
  if (name == "concat_project") return CombinerMode::kConcatProject;
  throw ConfigError("unknown combiner mode '" + std::string(name) +
                    "' (expected add or concat_project)");
}

CombinerParams CombinerParams::initialize(CombinerMode mode, int dim, Rng& rng) {
  CombinerParams p;
  p.mode = mode;
  if (mode == CombinerMode::kConcatProject) {
    const double bound = 1.0 / std::sqrt(2.0 * dim);
    p.projection = rng.uniform_matrix(2 * dim, dim, -bound, bound);
    p.bias = Matrix::Zero(1, dim);
  }
  return p;
}

ad::Var combine(ad::Var img, ad::Var txt, CombinerMode mode, std::optional<ad::Var> projection,
                std::optional<ad::Var> bias) {
  if (mode == CombinerMode::kAdd) {
    if (img.rows() != txt.rows() || img.cols() != txt.cols()) {
      throw ShapeError("combine (add): image is " + std::to_string(img.cols()) +
                       "-dim, text is " + std::to_string(txt.cols()) + "-dim");
    }
    return ad::add(img, txt);
  }
  if (!projection || !bias) throw ShapeError("combine (concat_project): missing projection");
  if (img.rows() != txt.rows() || projection->rows() != img.cols() + txt.cols() ||
      bias->cols() != projection->cols()) {
    throw ShapeError("combine (concat_project): image " + std::to_string(img.cols()) +
                     " + text " + std::to_string(txt.cols()) + " does not match a " +
                     std::to_string(projection->rows()) + "x" +
                     std::to_string(projection->cols()) + " projection");
  }
  return ad::add_row(ad::matmul(ad::concat_cols(img, txt), *projection), *bias);
}

Vector combine(const Vector& img, const Vector& txt, const CombinerParams& params) {
  ad::Tape tape;
  std::optional<ad::Var> proj, bias;
  if (params.mode == CombinerMode::kConcatProject) {
    proj = tape.constant(params.projection);
    bias = tape.constant(params.bias);
  }
  return Vector::from_row(
      combine(tape.constant(img.as_row()), tape.constant(txt.as_row()), params.mode, proj, bias)
          .value());
}

Model Model::initialize(const ModelShape& shape, Rng& rng) {
  if (shape.dim < 1) throw ConfigError("model: dim must be >= 1");
  Model m;
  m.shape_ = shape;
  m.combiner_ = CombinerParams::initialize(shape.combiner, shape.dim, rng);
  m.source_chain_ = UAChain::initialize(Side::kSource, shape.ua_length, shape.dim, shape.ua, rng);
  m.target_chain_ = UAChain::initialize(Side::kTarget, shape.ua_length, shape.dim, shape.ua, rng);
  return m;
}

Model Model::from_parameters(const ModelShape& shape, const ParameterMap& params) {
  Model m;
  m.shape_ = shape;
  m.combiner_.mode = shape.combiner;
  std::size_t used = 0;
  if (shape.combiner == CombinerMode::kConcatProject) {
    auto p = params.find("combiner.projection");
    auto b = params.find("combiner.bias");
    if (p == params.end() || b == params.end()) {
      throw ShapeError("model: concat_project combiner needs combiner.projection/bias");
    }
    if (p->second.rows() != 2 * shape.dim || p->second.cols() != shape.dim ||
        b->second.rows() != 1 || b->second.cols() != shape.dim) {
      throw ShapeError("model: combiner tensors do not match dim " + std::to_string(shape.dim));
    }
    m.combiner_.projection = p->second;
    m.combiner_.bias = b->second;
    used += 2;
  }
  for (Side side : {Side::kSource, Side::kTarget}) {
    std::vector<UABlock> blocks;
    UAChain probe(side, {}, shape.ua.chain_from_f0);
    for (int i = 0; i < shape.ua_length; ++i) {
      const std::string prefix = probe.block_prefix(static_cast<std::size_t>(i));
      ParameterMap local;
      for (const auto& [name, value] : params) {
        if (name.rfind(prefix, 0) == 0) local.emplace(name.substr(prefix.size()), value);
      }
      used += local.size();
      UABlock block = UABlock::from_parameters(local, shape.ua.tokens);
      if (block.dim() != shape.dim) {
        throw ShapeError("model: block " + prefix + " has dim " + std::to_string(block.dim()) +
                         ", expected " + std::to_string(shape.dim));
      }
      blocks.push_back(std::move(block));
    }
    (side == Side::kSource ? m.source_chain_ : m.target_chain_) =
        UAChain(side, std::move(blocks), shape.ua.chain_from_f0);
  }
  if (used != params.size()) throw ShapeError("model: unexpected extra parameters");
  return m;
}

ModelShape Model::infer_shape(const ParameterMap& params, int dim, bool chain_from_f0) {
  ModelShape shape;
  shape.dim = dim;
  shape.combiner = params.count("combiner.projection") != 0 ? CombinerMode::kConcatProject
                                                             : CombinerMode::kAdd;
  shape.ua.chain_from_f0 = chain_from_f0;
  int length = 0;
  while (params.count("ua.source." + std::to_string(length) + ".fc.weight") != 0) ++length;
  shape.ua_length = length;
  if (length > 0) {
    const Matrix& q = params.at("ua.source.0.attn.query");
    if (q.rows() < 1 || dim % q.rows() != 0) {
      throw ShapeError("model: attention width " + std::to_string(q.rows()) +
                       " does not divide dim " + std::to_string(dim));
    }
    shape.ua.tokens = static_cast<int>(dim / q.rows());
    shape.ua.separate_variance_head = params.count("ua.source.0.var_fc.weight") != 0;
  }
  return shape;
}

ParameterMap Model::parameters() const {
  ParameterMap out;
  for_each_parameter([&](const std::string& name, const Matrix& m) { out.emplace(name, m); });
  return out;
}

BoundModel bind_model(ad::Tape& tape, const Model& model) {
  std::map<std::string, ad::Var> vars;
  model.for_each_parameter(
      [&](const std::string& name, const Matrix& m) { vars.emplace(name, tape.variable(m, name)); });
  return bind_model(model.shape(), std::move(vars));
}

BoundModel bind_model(const ModelShape& shape, std::map<std::string, ad::Var> vars) {
  BoundModel b;
  b.combiner = shape.combiner;
  b.chain_from_f0 = shape.ua.chain_from_f0;
  if (shape.combiner == CombinerMode::kConcatProject) {
    b.projection = vars.at("combiner.projection");
    b.bias = vars.at("combiner.bias");
  }
  for (Side side : {Side::kSource, Side::kTarget}) {
    UAChain probe(side, {}, false);
    auto& blocks = side == Side::kSource ? b.source_blocks : b.target_blocks;
    for (int i = 0; i < shape.ua_length; ++i) {
      blocks.push_back(block_vars(vars, probe.block_prefix(static_cast<std::size_t>(i)),
                                  shape.ua.tokens, shape.ua.separate_variance_head));
    }
  }
  b.vars = std::move(vars);
  return b;
}

}  // namespace rankuncert
