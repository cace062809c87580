// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "rankuncert/core_math.hpp"

namespace rankuncert {

struct AdamWHyper {
  double learning_rate = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;

  friend bool operator==(const AdamWHyper&, const AdamWHyper&) = default;
};

/// Adam moments keyed by parameter name.
struct AdamWState {
  std::uint64_t step = 0;
  ParameterMap first_moment;
  ParameterMap second_moment;
};

/// One decoupled-weight-decay update of a single tensor. `step` is the
/// 1-based count of updates including this one.
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
void adamw_update(Matrix& param, const Matrix& grad, Matrix& first_moment, Matrix& second_moment,
                  std::uint64_t step, const AdamWHyper& hyper);

/// Updates every tensor in `params` that has an entry in `grads`; moments are
/// created as zeros on first use.
void adamw_step(ParameterMap& params, const ParameterMap& grads, AdamWState& state,
                const AdamWHyper& hyper);

}  // namespace rankuncert
