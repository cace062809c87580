// SPDX-License-Identifier: Apache-2.0
//
// Test-time retrieval: target features are computed once for the whole
// gallery, each query's combined feature is ranked against them by cosine
// similarity, and recall is the fraction of queries whose ground-truth target
// lands in the top K. The UA chains take no part.
#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "rankuncert/core_math.hpp"
#include "rankuncert/data.hpp"
#include "rankuncert/model.hpp"

namespace rankuncert {

/// Immutable set of candidate target features.
class Gallery {
 public:
  /// `features` row i belongs to `ids[i]`; ids must be unique.
  Gallery(std::vector<std::string> ids, Matrix features);

  std::size_t size() const noexcept { return ids_.size(); }
  int dim() const noexcept { return static_cast<int>(features_.cols()); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const Matrix& features() const noexcept { return features_; }
  /// Rows scaled to unit length.
  const Matrix& normalized() const noexcept { return normalized_; }
  std::optional<std::size_t> index_of(const std::string& id) const;

 private:
  std::vector<std::string> ids_;
  Matrix features_;
  Matrix normalized_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Query {
  std::string id;
  Matrix feature;  // 1 x d combined source feature
  std::string target_id;
  std::optional<std::vector<std::string>> subset_ids;
  std::optional<std::string> category;
};

/// Gallery ids by descending cosine similarity, ties by ascending id.
std::vector<std::string> rank_gallery(const Query& query, const Gallery& gallery);

/// 1-based position of the query's target in its ranking, optionally
/// restricted to the query's subset.
std::size_t target_rank(const Query& query, const Gallery& gallery, bool within_subset = false);

struct RecallReport {
  std::vector<int> ks;
  std::vector<double> recalls;  // fractions, aligned with ks
  std::map<std::string, std::vector<double>> per_category;
  /// Unweighted mean over `per_category`, aligned with ks.
  std::vector<double> category_mean;
  std::vector<int> subset_ks;
  std::vector<double> subset_recalls;
  /// (R@5 + R_subset@1) / 2 when both are present.
  std::optional<double> overall;

  double recall_at(int k) const;
  std::optional<double> subset_recall_at(int k) const;
  nlohmann::json to_json() const;
  /// Percentages with two decimals in a fixed-width table.
  std::string to_table() const;
};

/// Fraction of queries whose target is in the top K, for every K. A K larger
/// than the gallery is a ConfigError. Queries are ranked on up to `threads`
/// threads; the result does not depend on it.
RecallReport recall_at_k(std::span<const Query> queries, const Gallery& gallery,
                         const std::vector<int>& ks, int threads = 1);

/// Same, with each ranking restricted to the query's subset. The report's
/// `subset_ks`/`subset_recalls` are filled.
RecallReport recall_subset_at_k(std::span<const Query> queries, const Gallery& gallery,
                                const std::vector<int>& ks, int threads = 1);

/// Unweighted mean of the per-K recalls of several reports (same ks).
RecallReport category_average(const std::vector<RecallReport>& reports);

double overall_score(double recall_at_5, double subset_recall_at_1);

struct EvalOptions {
  std::vector<int> ks = {1, 5, 10, 50};
  /// Empty disables subset recall.
  std::vector<int> subset_ks;
  bool per_category = false;
  int threads = 1;
};

/// Gallery of every target and subset image referenced by `dataset`, with raw
/// image features as target features.
Gallery build_gallery(const Dataset& dataset);
/// One query per triplet, fused by the model's combiner only.
std::vector<Query> build_queries(const Model& model, const Dataset& dataset);

/// Full test-time pipeline: gallery once, then every query. With
/// `per_category`, each category is ranked against its own gallery.
RecallReport evaluate(const Model& model, const Dataset& dataset, const EvalOptions& options);

}  // namespace rankuncert
