// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rankuncert/core_math.hpp"
#include "rankuncert/rng.hpp"
#include "rankuncert/uncertainty_augmenter.hpp"

namespace rankuncert {

/// How a source image feature and its text feature fuse into f_s.
enum class CombinerMode {
  kAdd,            // f_s = img + txt
  kConcatProject,  // f_s = [img; txt] W + b, W is (2d x d)
};
std::string_view combiner_mode_name(CombinerMode mode);
CombinerMode parse_combiner_mode(std::string_view name);

struct CombinerParams {
  CombinerMode mode = CombinerMode::kAdd;
  Matrix projection;  // 2d x d, only in kConcatProject
  Matrix bias;        // 1 x d, only in kConcatProject

  /// Projection ~ U(-1/sqrt(2d), 1/sqrt(2d)), bias 0.
  static CombinerParams initialize(CombinerMode mode, int dim, Rng& rng);
};

Vector combine(const Vector& img, const Vector& txt, const CombinerParams& params);

/// Batched fusion; `projection`/`bias` are required in kConcatProject mode.
ad::Var combine(ad::Var img, ad::Var txt, CombinerMode mode,
                std::optional<ad::Var> projection = std::nullopt,
                std::optional<ad::Var> bias = std::nullopt);

/// Everything needed to rebuild a model's structure.
struct ModelShape {
  int dim = 0;
  CombinerMode combiner = CombinerMode::kAdd;
  int ua_length = 0;  // UA blocks per side
  UAOptions ua;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Combiner plus one UA chain per side. Parameter names:
///   combiner.projection, combiner.bias, ua.<side>.<i>.<tensor>
class Model {
 public:
  static Model initialize(const ModelShape& shape, Rng& rng);
  static Model from_parameters(const ModelShape& shape, const ParameterMap& params);
  /// Recovers the shape from parameter names and tensor sizes. `dim` is
  /// needed because an additive combiner with no UA carries no tensors.
  static ModelShape infer_shape(const ParameterMap& params, int dim, bool chain_from_f0 = false);

  const ModelShape& shape() const noexcept { return shape_; }
  int dim() const noexcept { return shape_.dim; }
  const CombinerParams& combiner() const noexcept { return combiner_; }
  const UAChain& chain(Side side) const {
    return side == Side::kSource ? source_chain_ : target_chain_;
  }

  /// Visits every trainable tensor in a fixed order: combiner first, then the
  /// source chain, then the target chain.
  template <class F>
  void for_each_parameter(F&& fn) {
    visit(*this, fn);
  }
  template <class F>
  void for_each_parameter(F&& fn) const {
    visit(*this, fn);
  }
  ParameterMap parameters() const;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& fn) {
    if (self.combiner_.mode == CombinerMode::kConcatProject) {
      fn(std::string("combiner.projection"), self.combiner_.projection);
      fn(std::string("combiner.bias"), self.combiner_.bias);
    }
    for (auto* chain : {&self.source_chain_, &self.target_chain_}) {
      for (std::size_t i = 0; i < chain->blocks().size(); ++i) {
        const std::string prefix = chain->block_prefix(i);
        chain->blocks()[i].for_each_parameter(
            [&](std::string_view name, auto& m) { fn(prefix + std::string(name), m); });
      }
    }
  }

  ModelShape shape_;
  CombinerParams combiner_;
  UAChain source_chain_;
  UAChain target_chain_;
};

/// A model's tensors recorded on a tape.
struct BoundModel {
  std::map<std::string, ad::Var> vars;
  std::optional<ad::Var> projection;
  std::optional<ad::Var> bias;
  std::vector<BlockVars> source_blocks;
  std::vector<BlockVars> target_blocks;
  CombinerMode combiner = CombinerMode::kAdd;
  bool chain_from_f0 = false;
};

BoundModel bind_model(ad::Tape& tape, const Model& model);
/// Same wiring over variables that are already on a tape, keyed by name.
BoundModel bind_model(const ModelShape& shape, std::map<std::string, ad::Var> vars);

}  // namespace rankuncert
