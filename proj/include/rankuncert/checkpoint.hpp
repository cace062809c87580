// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container (little-endian):
//   "RUNC" | u32 version | u64 config digest | u32 dim | u32 epoch |
//   u64 optimizer step | parameters | first moments | second moments
// where each tensor group is
//   u32 count, then per tensor: u32 name length | name bytes |
//   u32 rows | u32 cols | f32[rows * cols] row-major
// Groups are written in name order.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "rankuncert/core_math.hpp"

namespace rankuncert {

inline constexpr char kCheckpointMagic[4] = {'R', 'U', 'N', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t config_digest = 0;
  std::uint32_t dim = 0;
  std::uint32_t epoch = 0;
  std::uint64_t optimizer_step = 0;
  ParameterMap parameters;
  ParameterMap first_moment;
  ParameterMap second_moment;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Tensors are narrowed to float32.
std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rankuncert
