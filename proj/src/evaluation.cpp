// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>
#include <thread>

#include "rankuncert/error.hpp"

namespace rankuncert {

Gallery::Gallery(std::vector<std::string> ids, Matrix features)
    : ids_(std::move(ids)), features_(std::move(features)) {
  if (static_cast<Eigen::Index>(ids_.size()) != features_.rows()) {
    throw ShapeError("gallery: " + std::to_string(ids_.size()) + " ids for " +
                     std::to_string(features_.rows()) + " feature rows");
  }
  normalized_ = features_;
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i], i).second) {
      throw DomainError("gallery: duplicate id '" + ids_[i] + "'");
    }
    const double norm = features_.row(static_cast<Eigen::Index>(i)).norm();
    if (!(norm > 1e-12)) throw DomainError("gallery: zero-norm feature for '" + ids_[i] + "'");
    normalized_.row(static_cast<Eigen::Index>(i)) /= norm;
  }
}

std::optional<std::size_t> Gallery::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

namespace {

Eigen::VectorXd similarities(const Query& query, const Gallery& gallery) {
  if (gallery.size() == 0) throw DomainError("empty gallery");
  if (query.feature.rows() != 1 || query.feature.cols() != gallery.dim()) {
    throw ShapeError("query '" + query.id + "' has dim " + std::to_string(query.feature.cols()) +
                     ", gallery has dim " + std::to_string(gallery.dim()));
  }
  const double norm = query.feature.norm();
  if (!(norm > 1e-12)) throw DomainError("query '" + query.id + "' has a zero-norm feature");
  Eigen::VectorXd q = query.feature.row(0).transpose() / norm;
  return gallery.normalized() * q;
}

std::size_t require_index(const Gallery& gallery, const std::string& id, const Query& query) {
  auto idx = gallery.index_of(id);
  if (!idx) throw DomainError("query '" + query.id + "': id '" + id + "' is not in the gallery");
  return *idx;
}

void check_ks(const std::vector<int>& ks, std::optional<std::size_t> limit) {
  if (ks.empty()) throw ConfigError("recall: no K values given");
  for (int k : ks) {
    if (k < 1) throw ConfigError("recall: K must be positive, got " + std::to_string(k));
    if (limit && static_cast<std::size_t>(k) > *limit) {
      throw ConfigError("recall: K=" + std::to_string(k) + " exceeds gallery size " +
                        std::to_string(*limit));
    }
  }
}

std::vector<std::size_t> all_ranks(std::span<const Query> queries, const Gallery& gallery,
                                   bool within_subset, int threads) {
  if (queries.empty()) throw DomainError("recall: no queries");
  std::vector<std::size_t> ranks(queries.size());
  const std::size_t workers =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, queries.size());
  if (workers == 1) {
    for (std::size_t i = 0; i < queries.size(); ++i) {
      ranks[i] = target_rank(queries[i], gallery, within_subset);
    }
    return ranks;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < queries.size(); i += workers) {
          ranks[i] = target_rank(queries[i], gallery, within_subset);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return ranks;
}

std::vector<double> recall_from_ranks(const std::vector<std::size_t>& ranks,
                                      const std::vector<int>& ks) {
  std::vector<double> out;
  for (int k : ks) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(),
                                    [k](std::size_t r) { return r <= static_cast<std::size_t>(k); });
    out.push_back(static_cast<double>(hits) / static_cast<double>(ranks.size()));
  }
  return out;
}

std::vector<double> mean_columns(const std::vector<std::vector<double>>& rows) {
  std::vector<double> out(rows.front().size(), 0.0);
  for (const auto& r : rows) {
    if (r.size() != out.size()) throw ShapeError("category_average: reports differ in ks");
    for (std::size_t i = 0; i < r.size(); ++i) out[i] += r[i];
  }
  for (double& v : out) v /= static_cast<double>(rows.size());
  return out;
}

}  // namespace

std::vector<std::string> rank_gallery(const Query& query, const Gallery& gallery) {
  const Eigen::VectorXd sims = similarities(query, gallery);
  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), 0);
  const auto& ids = gallery.ids();
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ia = static_cast<Eigen::Index>(a), ib = static_cast<Eigen::Index>(b);
    if (sims[ia] != sims[ib]) return sims[ia] > sims[ib];
    return ids[a] < ids[b];
  });
  std::vector<std::string> out;
  out.reserve(order.size());
  for (auto i : order) out.push_back(ids[i]);
  return out;
}

std::size_t target_rank(const Query& query, const Gallery& gallery, bool within_subset) {
  const Eigen::VectorXd sims = similarities(query, gallery);
  const std::size_t target = require_index(gallery, query.target_id, query);
  const double st = sims[static_cast<Eigen::Index>(target)];
  const auto& ids = gallery.ids();
  auto beats = [&](std::size_t j) {
    const double sj = sims[static_cast<Eigen::Index>(j)];
    return sj > st || (sj == st && ids[j] < ids[target]);
  };
  std::size_t ahead = 0;
  if (within_subset) {
    if (!query.subset_ids) throw DomainError("query '" + query.id + "' has no subset");
    bool has_target = false;
    std::set<std::size_t> seen;
    for (const auto& id : *query.subset_ids) {
      const std::size_t j = require_index(gallery, id, query);
      if (!seen.insert(j).second) continue;
      if (j == target) {
        has_target = true;
        continue;
      }
      if (beats(j)) ++ahead;
    }
    if (!has_target) {
      throw DomainError("query '" + query.id + "': target '" + query.target_id +
                        "' is not in its subset");
    }
  } else {
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      if (j != target && beats(j)) ++ahead;
    }
  }
  return ahead + 1;
}

double RecallReport::recall_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == k) return recalls[i];
  }
  throw ConfigError("report has no recall at K=" + std::to_string(k));
}

std::optional<double> RecallReport::subset_recall_at(int k) const {
  for (std::size_t i = 0; i < subset_ks.size(); ++i) {
    if (subset_ks[i] == k) return subset_recalls[i];
  }
  return std::nullopt;
}

nlohmann::json RecallReport::to_json() const {
  nlohmann::json j;
  j["ks"] = ks;
  j["recalls"] = recalls;
  j["per_category"] = per_category;
  if (!category_mean.empty()) j["category_mean"] = category_mean;
  if (!subset_ks.empty()) {
    j["subset_ks"] = subset_ks;
    j["subset_recalls"] = subset_recalls;
  } else {
    j["subset_recalls"] = nullptr;
  }
  j["overall"] = overall ? nlohmann::json(*overall) : nlohmann::json(nullptr);
  return j;
}

std::string RecallReport::to_table() const {
  auto cell = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%9.2f", 100.0 * v);
    return std::string(buf);
  };
  auto head = [](const std::string& s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%9s", s.c_str());
    return std::string(buf);
  };
  std::string header = "          ";
  std::string body;
  for (int k : ks) header += head("R@" + std::to_string(k));
  for (int k : subset_ks) header += head("Rs@" + std::to_string(k));
  if (overall) header += head("Overall");
  auto line = [&](const std::string& label, const std::vector<double>& values,
                  bool with_extras) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%-10s", label.substr(0, 10).c_str());
    std::string out = buf;
    for (double v : values) out += cell(v);
    if (with_extras) {
      for (double v : subset_recalls) out += cell(v);
      if (overall) out += cell(*overall);
    }
    return out + "\n";
  };
  for (const auto& [name, values] : per_category) body += line(name, values, false);
  if (!category_mean.empty()) body += line("average", category_mean, false);
  body += line("all", recalls, true);
  return header + "\n" + body;
}

RecallReport recall_at_k(std::span<const Query> queries, const Gallery& gallery,
                         const std::vector<int>& ks, int threads) {
  if (gallery.size() == 0) throw DomainError("empty gallery");
  check_ks(ks, gallery.size());
  RecallReport report;
  report.ks = ks;
  report.recalls = recall_from_ranks(all_ranks(queries, gallery, false, threads), ks);
  return report;
}

RecallReport recall_subset_at_k(std::span<const Query> queries, const Gallery& gallery,
                                const std::vector<int>& ks, int threads) {
  if (gallery.size() == 0) throw DomainError("empty gallery");
  check_ks(ks, std::nullopt);
  for (const auto& q : queries) {
    if (!q.subset_ids) throw DomainError("query '" + q.id + "' has no subset ids");
  }
  RecallReport report;
  report.subset_ks = ks;
  report.subset_recalls = recall_from_ranks(all_ranks(queries, gallery, true, threads), ks);
  return report;
}

RecallReport category_average(const std::vector<RecallReport>& reports) {
  if (reports.empty()) throw ConfigError("category_average: no reports");
  RecallReport out;
  out.ks = reports.front().ks;
  out.subset_ks = reports.front().subset_ks;
  std::vector<std::vector<double>> recalls, subset;
  for (const auto& r : reports) {
    if (r.ks != out.ks || r.subset_ks != out.subset_ks) {
      throw ShapeError("category_average: reports differ in ks");
    }
    recalls.push_back(r.recalls);
    subset.push_back(r.subset_recalls);
  }
  if (!out.ks.empty()) out.recalls = mean_columns(recalls);
  if (!out.subset_ks.empty()) out.subset_recalls = mean_columns(subset);
  return out;
}

double overall_score(double recall_at_5, double subset_recall_at_1) {
  return (recall_at_5 + subset_recall_at_1) / 2.0;
}

Gallery build_gallery(const Dataset& dataset) {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  auto add = [&](const std::string& id) {
    if (seen.insert(id).second) ids.push_back(id);
  };
  for (const auto& r : dataset.records()) {
    add(r.target_image_id);
    if (r.subset_ids) {
      for (const auto& id : *r.subset_ids) add(id);
    }
  }
  Matrix features(static_cast<Eigen::Index>(ids.size()), dataset.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto row = dataset.images().find(ids[i]);
    if (!row) throw DataError(DataError::Kind::kDanglingId, "gallery id '" + ids[i] + "'");
    features.row(static_cast<Eigen::Index>(i)) = dataset.images().row_matrix(*row);
  }
  return Gallery(std::move(ids), std::move(features));
}

std::vector<Query> build_queries(const Model& model, const Dataset& dataset) {
  if (dataset.dim() != model.dim()) {
    throw ShapeError("model dim " + std::to_string(model.dim()) + " != data dim " +
                     std::to_string(dataset.dim()));
  }
  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), 0);
  ad::Tape tape;
  const CombinerParams& comb = model.combiner();
  std::optional<ad::Var> proj, bias;
  if (comb.mode == CombinerMode::kConcatProject) {
    proj = tape.constant(comb.projection);
    bias = tape.constant(comb.bias);
  }
  ad::Var fused = combine(tape.constant(dataset.source_images(all)),
                          tape.constant(dataset.source_texts(all)), comb.mode, proj, bias);
  std::vector<Query> queries;
  queries.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& r = dataset.records()[i];
    queries.push_back(Query{r.source_image_id + "+" + r.source_text_id,
                            fused.value().row(static_cast<Eigen::Index>(i)), r.target_image_id,
                            r.subset_ids, r.category});
  }
  return queries;
}

RecallReport evaluate(const Model& model, const Dataset& dataset, const EvalOptions& options) {
  const Gallery gallery = build_gallery(dataset);
  const std::vector<Query> queries = build_queries(model, dataset);
  RecallReport report = recall_at_k(queries, gallery, options.ks, options.threads);
  if (!options.subset_ks.empty()) {
    RecallReport subset = recall_subset_at_k(queries, gallery, options.subset_ks, options.threads);
    report.subset_ks = subset.subset_ks;
    report.subset_recalls = subset.subset_recalls;
    auto r5 = std::find(report.ks.begin(), report.ks.end(), 5);
    if (r5 != report.ks.end()) {
      if (auto rs1 = report.subset_recall_at(1)) {
        report.overall = overall_score(report.recalls[static_cast<std::size_t>(r5 - report.ks.begin())], *rs1);
      }
    }
  }
  if (options.per_category) {
    std::vector<RecallReport> parts;
    for (const auto& category : dataset.categories()) {
      Dataset part = dataset.filter_category(category);
      RecallReport r = recall_at_k(build_queries(model, part), build_gallery(part), options.ks,
                                   options.threads);
      report.per_category[category] = r.recalls;
      parts.push_back(std::move(r));
    }
    if (!parts.empty()) report.category_mean = category_average(parts).recalls;
  }
  return report;
}

}  // namespace rankuncert
