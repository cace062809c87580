// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/optimizer.hpp"

#include <cmath>

#include "rankuncert/error.hpp"

namespace rankuncert {

void adamw_update(Matrix& param, const Matrix& grad, Matrix& first_moment, Matrix& second_moment,
                  std::uint64_t step, const AdamWHyper& hyper) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols() ||
      first_moment.rows() != param.rows() || first_moment.cols() != param.cols() ||
      second_moment.rows() != param.rows() || second_moment.cols() != param.cols()) {
    throw ShapeError("adamw_update: parameter, gradient and moments differ in shape");
  }
  if (step == 0) throw ConfigError("adamw_update: step counts from 1");
  first_moment = hyper.beta1 * first_moment + (1.0 - hyper.beta1) * grad;
  second_moment = hyper.beta2 * second_moment + (1.0 - hyper.beta2) * grad.cwiseAbs2();
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  Matrix m_hat = first_moment / c1;
  Matrix v_hat = second_moment / c2;
  Matrix adaptive = m_hat.array() / (v_hat.array().sqrt() + hyper.eps);
  param = param - hyper.learning_rate * adaptive - hyper.learning_rate * hyper.weight_decay * param;
}

void adamw_step(ParameterMap& params, const ParameterMap& grads, AdamWState& state,
                const AdamWHyper& hyper) {
  ++state.step;
  for (auto& [name, param] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) continue;
    auto m = state.first_moment.try_emplace(name, Matrix::Zero(param.rows(), param.cols())).first;
    auto v = state.second_moment.try_emplace(name, Matrix::Zero(param.rows(), param.cols())).first;
    adamw_update(param, g->second, m->second, v->second, state.step, hyper);
  }
}

}  // namespace rankuncert
