// SPDX-License-Identifier: Apache-2.0
//
// Uncertainty augmenter (UA) blocks and chains.
//
// A block maps a feature f to a diagonal Gaussian through a shared trunk
//   h = f + fc(attn(f)),   mean = LN(h),   log(stddev^2) = h
// and draws a reparameterized sample mean + stddev * noise. A chain of n
// blocks turns f_0 into the sequence (f_0, f_1, ..., f_n).
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rankuncert/core_math.hpp"
#include "rankuncert/rng.hpp"

namespace rankuncert {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct UAOptions {
  /// Number of chunks the feature is split into for self-attention.
  int tokens = 8;
  /// Give log(stddev^2) its own fc instead of sharing the mean trunk.
  bool separate_variance_head = false;
  /// Feed every block f_0 instead of the previous block's sample.
  bool chain_from_f0 = false;

  friend bool operator==(const UAOptions&, const UAOptions&) = default;
};

enum class Side { kSource, kTarget };
std::string_view side_name(Side side);

class UABlock {
 public:
  /// Attention and fc weights ~ U(-1/sqrt(d), 1/sqrt(d)); LN gain 1, bias 0.
  static UABlock initialize(int dim, const UAOptions& options, Rng& rng);

  int dim() const noexcept { return dim_; }
  int tokens() const noexcept { return tokens_; }
  bool separate_variance_head() const noexcept { return var_fc_weight_.has_value(); }

  /// Visits (name, tensor) pairs in a fixed order. Counts as a parameter read.
  template <class F>
  void for_each_parameter(F&& fn) const {
    visit(*this, fn);
  }
  template <class F>
  void for_each_parameter(F&& fn) {
    visit(*this, fn);
  }

  /// Rebuilds a block from named tensors (the inverse of for_each_parameter).
  static UABlock from_parameters(const ParameterMap& params, int tokens);

 private:
  static void note_parameter_read();

  template <class Self, class F>
  static void visit(Self& self, F& fn) {
    note_parameter_read();
    fn("attn.query", self.attn_query_);
    fn("attn.key", self.attn_key_);
    fn("attn.value", self.attn_value_);
    fn("fc.weight", self.fc_weight_);
    fn("fc.bias", self.fc_bias_);
    fn("ln.gain", self.ln_gain_);
    fn("ln.bias", self.ln_bias_);
    if (self.var_fc_weight_) {
      fn("var_fc.weight", *self.var_fc_weight_);
      fn("var_fc.bias", *self.var_fc_bias_);
    }
  }

  int dim_ = 0;
  int tokens_ = 0;
  Matrix attn_query_, attn_key_, attn_value_;  // chunk x chunk
  Matrix fc_weight_;                           // d x d, row-vector convention x * W
  Matrix fc_bias_;                             // 1 x d
  Matrix ln_gain_, ln_bias_;                   // 1 x d
  std::optional<Matrix> var_fc_weight_, var_fc_bias_;
};

/// Process-wide count of UA parameter reads. Evaluation must never move it.
std::size_t ua_parameter_reads();

/// A block's parameters bound to tape variables.
struct BlockVars {
  ad::Var attn_query, attn_key, attn_value;
  ad::Var fc_weight, fc_bias;
  ad::Var ln_gain, ln_bias;
  std::optional<ad::Var> var_fc_weight, var_fc_bias;
  int tokens = 0;
};

/// Records the block's tensors on `tape`, as gradient-receiving variables
/// or as constants.
BlockVars bind_block(ad::Tape& tape, const UABlock& block, bool trainable);

/// Wraps already-bound variables looked up by `prefix + local name`.
BlockVars block_vars(const std::map<std::string, ad::Var>& vars, const std::string& prefix,
                     int tokens, bool separate_variance_head);

/// Batched block output: every row is one feature.
struct UAOutput {
  ad::Var sample;
  ad::Var mean;
  ad::Var stddev;
};

/// `x` and `noise` are (rows x d).
UAOutput ua_forward(const BlockVars& block, ad::Var x, const Matrix& noise);

struct UASample {
  Vector sample;
  DiagGaussian dist;
};

/// Single-vector block application.
UASample ua_forward(const UABlock& block, const Vector& f, const Vector& noise);

class UAChain {
 public:
  UAChain() = default;
  UAChain(Side side, std::vector<UABlock> blocks, bool chain_from_f0 = false);
  static UAChain initialize(Side side, int length, int dim, const UAOptions& options, Rng& rng);

  Side side() const noexcept { return side_; }
  std::size_t length() const noexcept { return blocks_.size(); }
  bool chain_from_f0() const noexcept { return chain_from_f0_; }
  const std::vector<UABlock>& blocks() const noexcept { return blocks_; }
  std::vector<UABlock>& blocks() noexcept { return blocks_; }

  /// Parameter-name prefix of block `index`, e.g. "ua.source.0.".
  std::string block_prefix(std::size_t index) const;

 private:
  Side side_ = Side::kSource;
  std::vector<UABlock> blocks_;
  bool chain_from_f0_ = false;
};

/// Batched chain output: features[0] is the input, features[i] the sample of
/// block i; means/stddevs[i - 1] describe the distribution of block i.
struct ChainTrace {
  std::vector<ad::Var> features;
  std::vector<ad::Var> means;
  std::vector<ad::Var> stddevs;
};

/// `noise[i]` feeds block i and has the shape of `f0`.
ChainTrace chain_forward(const std::vector<BlockVars>& blocks, ad::Var f0,
                         const std::vector<Matrix>& noise, bool chain_from_f0);

struct FeatureSequence {
  std::vector<Vector> features;
  std::vector<DiagGaussian> distributions;
};

/// Single-vector chain application; noise for block i is drawn from `rng`
/// in block order.
FeatureSequence chain_forward(const UAChain& chain, const Vector& f0, Rng& rng);

}  // namespace rankuncert
