// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the test binaries: scratch directories and small
// brute-force reference implementations that do not share code with the
// library.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace rankuncert::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("rankuncert-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline double brute_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Sorts the whole candidate list and reports the 1-based target position.
inline std::size_t brute_rank(const std::vector<double>& query,
                              const std::vector<std::vector<double>>& gallery,
                              const std::vector<std::string>& ids,
                              const std::vector<std::size_t>& candidates, std::size_t target) {
  std::vector<std::pair<double, std::string>> scored;
  for (auto c : candidates) scored.emplace_back(brute_cosine(query, gallery[c]), ids[c]);
  std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (scored[i].second == ids[target]) return i + 1;
  }
  return 0;
}

}  // namespace rankuncert::testing
