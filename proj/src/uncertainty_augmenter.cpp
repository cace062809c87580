// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/uncertainty_augmenter.hpp"

#include <atomic>
#include <cmath>

#include "rankuncert/error.hpp"

namespace rankuncert {

namespace {

std::atomic<std::size_t> g_parameter_reads{0};

const Matrix& lookup(const ParameterMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ShapeError("UA block: missing parameter '" + name + "'");
  return it->second;
}

void check_shape(const std::string& name, const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError("UA block: parameter '" + name + "' is " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

ad::Var lookup_var(const std::map<std::string, ad::Var>& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw ShapeError("UA block: unbound parameter '" + name + "'");
  return it->second;
}

}  // namespace

std::string_view side_name(Side side) { return side == Side::kSource ? "source" : "target"; }

void UABlock::note_parameter_read() { g_parameter_reads.fetch_add(1, std::memory_order_relaxed); }

std::size_t ua_parameter_reads() { return g_parameter_reads.load(std::memory_order_relaxed); }

UABlock UABlock::initialize(int dim, const UAOptions& options, Rng& rng) {
  if (dim < 1) throw ConfigError("UA block: dim must be >= 1");
  if (options.tokens < 1 || dim % options.tokens != 0) {
    throw ConfigError("UA block: token count " + std::to_string(options.tokens) +
                      " must divide dim " + std::to_string(dim));
  }
  const int width = dim / options.tokens;
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  UABlock b;
  b.dim_ = dim;
  b.tokens_ = options.tokens;
  b.attn_query_ = rng.uniform_matrix(width, width, -bound, bound);
  b.attn_key_ = rng.uniform_matrix(width, width, -bound, bound);
  b.attn_value_ = rng.uniform_matrix(width, width, -bound, bound);
  b.fc_weight_ = rng.uniform_matrix(dim, dim, -bound, bound);
  b.fc_bias_ = rng.uniform_matrix(1, dim, -bound, bound);
  b.ln_gain_ = Matrix::Ones(1, dim);
  b.ln_bias_ = Matrix::Zero(1, dim);
  if (options.separate_variance_head) {
    b.var_fc_weight_ = rng.uniform_matrix(dim, dim, -bound, bound);
    b.var_fc_bias_ = rng.uniform_matrix(1, dim, -bound, bound);
  }
  return b;
}

UABlock UABlock::from_parameters(const ParameterMap& params, int tokens) {
  UABlock b;
  b.fc_weight_ = lookup(params, "fc.weight");
  const Eigen::Index dim = b.fc_weight_.rows();
  if (tokens < 1 || dim % tokens != 0) {
    throw ShapeError("UA block: token count " + std::to_string(tokens) + " must divide dim " +
                     std::to_string(dim));
  }
  const Eigen::Index width = dim / tokens;
  b.dim_ = static_cast<int>(dim);
  b.tokens_ = tokens;
  b.attn_query_ = lookup(params, "attn.query");
  b.attn_key_ = lookup(params, "attn.key");
  b.attn_value_ = lookup(params, "attn.value");
  b.fc_bias_ = lookup(params, "fc.bias");
  b.ln_gain_ = lookup(params, "ln.gain");
  b.ln_bias_ = lookup(params, "ln.bias");
  check_shape("attn.query", b.attn_query_, width, width);
  check_shape("attn.key", b.attn_key_, width, width);
  check_shape("attn.value", b.attn_value_, width, width);
  check_shape("fc.weight", b.fc_weight_, dim, dim);
  check_shape("fc.bias", b.fc_bias_, 1, dim);
  check_shape("ln.gain", b.ln_gain_, 1, dim);
  check_shape("ln.bias", b.ln_bias_, 1, dim);
  if (params.count("var_fc.weight") != 0) {
    b.var_fc_weight_ = lookup(params, "var_fc.weight");
    b.var_fc_bias_ = lookup(params, "var_fc.bias");
    check_shape("var_fc.weight", *b.var_fc_weight_, dim, dim);
    check_shape("var_fc.bias", *b.var_fc_bias_, 1, dim);
  }
  return b;
}

BlockVars bind_block(ad::Tape& tape, const UABlock& block, bool trainable) {
  std::map<std::string, ad::Var> vars;
  block.for_each_parameter([&](std::string_view name, const Matrix& m) {
    vars.emplace(std::string(name),
                 trainable ? tape.variable(m, std::string(name)) : tape.constant(m));
  });
  return block_vars(vars, "", block.tokens(), block.separate_variance_head());
}

BlockVars block_vars(const std::map<std::string, ad::Var>& vars, const std::string& prefix,
                     int tokens, bool separate_variance_head) {
  BlockVars b;
  b.attn_query = lookup_var(vars, prefix + "attn.query");
  b.attn_key = lookup_var(vars, prefix + "attn.key");
  b.attn_value = lookup_var(vars, prefix + "attn.value");
  b.fc_weight = lookup_var(vars, prefix + "fc.weight");
  b.fc_bias = lookup_var(vars, prefix + "fc.bias");
  b.ln_gain = lookup_var(vars, prefix + "ln.gain");
  b.ln_bias = lookup_var(vars, prefix + "ln.bias");
  if (separate_variance_head) {
    b.var_fc_weight = lookup_var(vars, prefix + "var_fc.weight");
    b.var_fc_bias = lookup_var(vars, prefix + "var_fc.bias");
  }
  b.tokens = tokens;
  return b;
}

UAOutput ua_forward(const BlockVars& block, ad::Var x, const Matrix& noise) {
  if (noise.rows() != x.rows() || noise.cols() != x.cols()) {
    throw ShapeError("ua_forward: noise shape does not match input");
  }
  ad::Tape& tape = *x.tape();
  ad::Var attended =
      ad::token_attention(x, block.attn_query, block.attn_key, block.attn_value, block.tokens);
  ad::Var trunk = ad::add(x, ad::add_row(ad::matmul(attended, block.fc_weight), block.fc_bias));
  ad::Var mean = ad::layer_norm_rows(trunk, block.ln_gain, block.ln_bias, kLayerNormEps);
  ad::Var log_var = trunk;
  if (block.var_fc_weight) {
    log_var = ad::add(x, ad::add_row(ad::matmul(attended, *block.var_fc_weight),
                                     *block.var_fc_bias));
  }
  ad::Var stddev = ad::exp(ad::scale(ad::clamp(log_var, kLogVarMin, kLogVarMax), 0.5));
  ad::Var sample = ad::add(mean, ad::mul(stddev, tape.constant(noise)));
  return {sample, mean, stddev};
}

UASample ua_forward(const UABlock& block, const Vector& f, const Vector& noise) {
  if (f.dim() != static_cast<std::size_t>(block.dim()) || noise.dim() != f.dim()) {
    throw ShapeError("ua_forward: block dim " + std::to_string(block.dim()) + ", input dim " +
                     std::to_string(f.dim()) + ", noise dim " + std::to_string(noise.dim()));
  }
  ad::Tape tape;
  BlockVars vars = bind_block(tape, block, false);
  UAOutput out = ua_forward(vars, tape.constant(f.as_row()), noise.as_row());
  return {Vector::from_row(out.sample.value()),
          DiagGaussian(Vector::from_row(out.mean.value()),
                       Vector::from_row(out.stddev.value()))};
}

UAChain::UAChain(Side side, std::vector<UABlock> blocks, bool chain_from_f0)
    : side_(side), blocks_(std::move(blocks)), chain_from_f0_(chain_from_f0) {
  for (const auto& b : blocks_) {
    if (b.dim() != blocks_.front().dim()) throw ShapeError("UAChain: blocks differ in dim");
  }
}

UAChain UAChain::initialize(Side side, int length, int dim, const UAOptions& options, Rng& rng) {
  if (length < 0) throw ConfigError("UAChain: length must be >= 0");
  std::vector<UABlock> blocks;
  blocks.reserve(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) blocks.push_back(UABlock::initialize(dim, options, rng));
  return UAChain(side, std::move(blocks), options.chain_from_f0);
}

std::string UAChain::block_prefix(std::size_t index) const {
  return "ua." + std::string(side_name(side_)) + "." + std::to_string(index) + ".";
}

ChainTrace chain_forward(const std::vector<BlockVars>& blocks, ad::Var f0,
                         const std::vector<Matrix>& noise, bool chain_from_f0) {
  if (noise.size() != blocks.size()) {
    throw ShapeError("chain_forward: " + std::to_string(blocks.size()) + " blocks but " +
                     std::to_string(noise.size()) + " noise matrices");
  }
  ChainTrace trace;
  trace.features.push_back(f0);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    ad::Var input = chain_from_f0 ? f0 : trace.features.back();
    UAOutput out = ua_forward(blocks[i], input, noise[i]);
    trace.features.push_back(out.sample);
    trace.means.push_back(out.mean);
    trace.stddevs.push_back(out.stddev);
  }
  return trace;
}

FeatureSequence chain_forward(const UAChain& chain, const Vector& f0, Rng& rng) {
  FeatureSequence seq{{f0}, {}};
  for (const UABlock& block : chain.blocks()) {
    const Vector& input = chain.chain_from_f0() ? f0 : seq.features.back();
    std::vector<double> eps(f0.dim());
    for (double& e : eps) e = rng.normal();
    UASample s = ua_forward(block, input, Vector(std::move(eps)));
    seq.features.push_back(std::move(s.sample));
    seq.distributions.push_back(std::move(s.dist));
  }
  return seq;
}

}  // namespace rankuncert
