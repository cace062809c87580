// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

#include "rankuncert/autodiff.hpp"

namespace rankuncert {

/// Mixes a base seed with stream/index tags (splitmix64 finalizer) so that
/// every (seed, stream, index) triple gets an independent engine.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

/// Explicitly seeded random source. Not thread-safe; one per thread.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  ad::Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols);
  ad::Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi);

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

}  // namespace rankuncert
