// SPDX-License-Identifier: Apache-2.0
//
// Embedding stores, triplet manifests and the synthetic many-to-many world.
//
// `.emb` layout (all little-endian):
//   offset 0   4 bytes   magic "RUEM"
//   offset 4   u32       format version (1)
//   offset 8   u32       dim
//   offset 12  u32       count
//   offset 16  f32[count * dim], row-major
// The `.ids` sidecar next to it holds one UTF-8 id per line, in row order.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "rankuncert/core_math.hpp"

namespace rankuncert {

inline constexpr char kStoreMagic[4] = {'R', 'U', 'E', 'M'};
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::size_t kStoreHeaderBytes = 16;

/// Immutable table of named float32 embeddings.
class EmbeddingStore {
 public:
  /// Validates: dim >= 1, ids.size() * dim == values.size(), unique ids and
  /// finite values.
  EmbeddingStore(int dim, std::vector<std::string> ids, std::vector<float> values);

  int dim() const noexcept { return dim_; }
  std::size_t count() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<float>& values() const noexcept { return values_; }
  std::span<const float> row(std::size_t index) const;
  /// Row as a 1 x dim double matrix.
  Matrix row_matrix(std::size_t index) const;
  std::optional<std::size_t> find(const std::string& id) const;

  friend bool operator==(const EmbeddingStore& a, const EmbeddingStore& b) {
    return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.values_ == b.values_;
  }

 private:
  int dim_;
  std::vector<std::string> ids_;
  std::vector<float> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// The `.ids` sidecar path for a `.emb` path.
std::filesystem::path ids_path_for(const std::filesystem::path& emb_path);

std::string encode_store(const EmbeddingStore& store);
/// `ids_text` is the sidecar content.
EmbeddingStore decode_store(std::string_view bytes, std::string_view ids_text);
void save_store(const EmbeddingStore& store, const std::filesystem::path& emb_path);
EmbeddingStore load_store(const std::filesystem::path& emb_path);

enum class Split { kTrain, kVal, kTest };
std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct TripletRecord {
  std::string source_image_id;
  std::string source_text_id;
  std::string target_image_id;
  Split split = Split::kTrain;
  std::optional<std::string> category;
  std::optional<std::vector<std::string>> subset_ids;

  friend bool operator==(const TripletRecord&, const TripletRecord&) = default;
};

nlohmann::json to_json(const TripletRecord& record);
TripletRecord triplet_from_json(const nlohmann::json& j);

/// Parses a JSON-lines manifest; blank lines are skipped. Rejects duplicate
/// records within a split.
std::vector<TripletRecord> parse_manifest(std::string_view text);
std::vector<TripletRecord> load_manifest(const std::filesystem::path& path);
std::string format_manifest(const std::vector<TripletRecord>& records);
void save_manifest(const std::vector<TripletRecord>& records, const std::filesystem::path& path);

/// A triplet with its three ids resolved to store rows.
struct ResolvedTriplet {
  std::size_t source_image_row = 0;
  std::size_t source_text_row = 0;
  std::size_t target_image_row = 0;
};

/// Triplets of one split bound to their stores.
class Dataset {
 public:
  Dataset(std::shared_ptr<const EmbeddingStore> images,
          std::shared_ptr<const EmbeddingStore> texts, std::vector<TripletRecord> records,
          std::vector<ResolvedTriplet> rows);

  std::size_t size() const noexcept { return rows_.size(); }
  bool empty() const noexcept { return rows_.empty(); }
  int dim() const noexcept { return images_->dim(); }
  const EmbeddingStore& images() const noexcept { return *images_; }
  const EmbeddingStore& texts() const noexcept { return *texts_; }
  std::shared_ptr<const EmbeddingStore> image_store() const noexcept { return images_; }
  std::shared_ptr<const EmbeddingStore> text_store() const noexcept { return texts_; }
  const std::vector<TripletRecord>& records() const noexcept { return records_; }
  const std::vector<ResolvedTriplet>& rows() const noexcept { return rows_; }

  /// Stacked (count x dim) features for the given row indices.
  Matrix source_images(std::span<const std::size_t> indices) const;
  Matrix source_texts(std::span<const std::size_t> indices) const;
  Matrix targets(std::span<const std::size_t> indices) const;

  /// Sub-dataset keeping only rows whose category equals `category`.
  Dataset filter_category(const std::string& category) const;
  /// Distinct categories in first-seen order.
  std::vector<std::string> categories() const;

 private:
  std::shared_ptr<const EmbeddingStore> images_;
  std::shared_ptr<const EmbeddingStore> texts_;
  std::vector<TripletRecord> records_;
  std::vector<ResolvedTriplet> rows_;
};

/// Keeps records of `split` (all records when nullopt) and resolves their ids.
/// Every unresolved id, including subset ids, is listed in one DataError.
Dataset resolve_triplets(const std::vector<TripletRecord>& manifest, std::optional<Split> split,
                         std::shared_ptr<const EmbeddingStore> images,
                         std::shared_ptr<const EmbeddingStore> texts);

// -- synthetic many-to-many world ---------------------------------------------

struct SynthSpec {
  int dim = 64;
  int num_clusters = 32;
  int sources_per_target = 4;
  int targets_per_source = 2;
  double noise_sigma = 0.05;
  std::uint64_t seed = 7;
  int train_triplets = 2048;
  int val_triplets = 512;
  /// Spread of target anchors around their cluster direction.
  double cluster_spread = 0.5;

  void validate() const;
};

struct SourceTargets {
  std::string source_image_id;
  std::string source_text_id;
  std::vector<std::string> target_ids;
};

struct SyntheticWorld {
  EmbeddingStore images;  // source images and target images
  EmbeddingStore texts;
  std::vector<TripletRecord> manifest;
  /// Ground-truth correspondence graph: every source pair with all targets
  /// it may legitimately retrieve.
  std::vector<SourceTargets> ground_truth;

  nlohmann::json ground_truth_json() const;
};

/// Anchor directions are grouped in clusters whose centers have pairwise
/// cosine <= 0.5. Each anchor owns `targets_per_source` near-duplicate target
/// images and `sources_per_target` (image, text) pairs with
/// image + text = anchor + N(0, noise_sigma^2 I). Every (pair, target)
/// combination becomes one manifest row. Deterministic in `spec`.
SyntheticWorld generate_synthetic(const SynthSpec& spec);

}  // namespace rankuncert
