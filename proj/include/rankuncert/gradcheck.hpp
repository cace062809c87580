// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of the analytic gradients. Every instance
// draws random inputs and parameters, reduces the component's output to a
// scalar with fixed random weights, and compares a sample of gradient
// coordinates against central differences at 64-bit precision.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace rankuncert {

struct GradcheckOptions {
  /// Empty runs every component.
  std::vector<std::string> components;
  int instances = 100;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 1;
  /// Coordinates compared per instance, spread over all tensors.
  int coordinates = 32;
  /// Scales the analytic gradient of this component by 1.01 (negative control).
  std::optional<std::string> inject_fault;
};

struct ComponentResult {
  std::string component;
  int instances = 0;
  /// Largest of the per-instance errors |a - n| / max(|a|, |n|), taken
  /// norm-wise over the compared coordinates.
  double max_relative_error = 0.0;
  bool passed = false;
};

/// layer_norm, combine, ua_forward, chain_forward, loss_cl, loss_cs_pair,
/// loss_cs_total, loss_dr, loss_total.
const std::vector<std::string>& gradcheck_components();

/// Throws ConfigError for an unknown component name.
std::vector<ComponentResult> run_gradcheck(const GradcheckOptions& options);

}  // namespace rankuncert
