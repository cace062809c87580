// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/data.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "rankuncert/error.hpp"
#include "rankuncert/rng.hpp"

namespace rankuncert {

namespace fs = std::filesystem;

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(start, end - start));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }
  return lines;
}

}  // namespace

// -- EmbeddingStore -------------------------------------------------------

EmbeddingStore::EmbeddingStore(int dim, std::vector<std::string> ids, std::vector<float> values)
    : dim_(dim), ids_(std::move(ids)), values_(std::move(values)) {
  if (dim_ < 1) throw DataError(DataError::Kind::kSchema, "embedding store: dim must be >= 1");
  if (values_.size() != ids_.size() * static_cast<std::size_t>(dim_)) {
    throw DataError(DataError::Kind::kIdCount,
                    "embedding store: " + std::to_string(ids_.size()) + " ids but " +
                        std::to_string(values_.size() / static_cast<std::size_t>(dim_)) +
                        " rows");
  }
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i], i).second) {
      throw DataError(DataError::Kind::kDuplicateId,
                      "embedding store: duplicate id '" + ids_[i] + "'");
    }
    for (float v : row(i)) {
      if (!std::isfinite(v)) {
        throw DataError(DataError::Kind::kNonFinite,
                        "embedding store: non-finite value in row '" + ids_[i] + "'");
      }
    }
  }
}

std::span<const float> EmbeddingStore::row(std::size_t index) const {
  return std::span<const float>(values_).subspan(index * static_cast<std::size_t>(dim_),
                                                 static_cast<std::size_t>(dim_));
}

Matrix EmbeddingStore::row_matrix(std::size_t index) const {
  Matrix m(1, dim_);
  auto r = row(index);
  for (int j = 0; j < dim_; ++j) m(0, j) = static_cast<double>(r[static_cast<std::size_t>(j)]);
  return m;
}

std::optional<std::size_t> EmbeddingStore::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

fs::path ids_path_for(const fs::path& emb_path) {
  fs::path p = emb_path;
  p.replace_extension(".ids");
  return p;
}

std::string encode_store(const EmbeddingStore& store) {
  std::string out;
  out.reserve(kStoreHeaderBytes + 4 * store.values().size());
  out.append(kStoreMagic, 4);
  put_u32(out, kStoreVersion);
  put_u32(out, static_cast<std::uint32_t>(store.dim()));
  put_u32(out, static_cast<std::uint32_t>(store.count()));
  for (float v : store.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

EmbeddingStore decode_store(std::string_view bytes, std::string_view ids_text) {
  using Kind = DataError::Kind;
  if (bytes.size() < kStoreHeaderBytes) {
    throw DataError(Kind::kTruncated, "embedding store: truncated header, expected " +
                                          std::to_string(kStoreHeaderBytes) + " bytes, got " +
                                          std::to_string(bytes.size()));
  }
  if (bytes.substr(0, 4) != std::string_view(kStoreMagic, 4)) {
    throw DataError(Kind::kMagic, "embedding store: bad magic at byte offset 0");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kStoreVersion) {
    throw DataError(Kind::kVersion, "embedding store: unsupported version " +
                                        std::to_string(version) + " at byte offset 4");
  }
  const std::uint32_t dim = get_u32(bytes, 8);
  const std::uint32_t count = get_u32(bytes, 12);
  if (dim < 1) throw DataError(Kind::kSchema, "embedding store: dim 0 at byte offset 8");
  const std::uint64_t expected = kStoreHeaderBytes + 4ULL * dim * count;
  if (bytes.size() != expected) {
    throw DataError(Kind::kTruncated, "embedding store: length mismatch, expected " +
                                          std::to_string(expected) + " bytes, got " +
                                          std::to_string(bytes.size()));
  }
  std::vector<std::string> ids;
  for (auto& line : split_lines(ids_text)) ids.push_back(std::move(line));
  if (ids.size() != count) {
    throw DataError(Kind::kIdCount, "embedding store: header count " + std::to_string(count) +
                                        " but sidecar has " + std::to_string(ids.size()) +
                                        " ids");
  }
  std::vector<float> values(static_cast<std::size_t>(dim) * count);
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = std::bit_cast<float>(get_u32(bytes, kStoreHeaderBytes + 4 * i));
  }
  return EmbeddingStore(static_cast<int>(dim), std::move(ids), std::move(values));
}

void save_store(const EmbeddingStore& store, const fs::path& emb_path) {
  std::string ids;
  for (const auto& id : store.ids()) {
    if (id.find('\n') != std::string::npos) {
      throw DataError(DataError::Kind::kSchema, "embedding store: id contains a newline");
    }
    ids += id;
    ids += '\n';
  }
  write_file(emb_path, encode_store(store));
  write_file(ids_path_for(emb_path), ids);
}

EmbeddingStore load_store(const fs::path& emb_path) {
  std::string bytes = read_file(emb_path);
  std::string ids = read_file(ids_path_for(emb_path));
  try {
    return decode_store(bytes, ids);
  } catch (const DataError& e) {
    throw DataError(e.kind(), emb_path.string() + ": " + e.what());
  }
}

// -- manifest -------------------------------------------------------------

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw DataError(DataError::Kind::kSchema, "unknown split '" + std::string(name) + "'");
}

nlohmann::json to_json(const TripletRecord& record) {
  nlohmann::json j;
  j["source_image_id"] = record.source_image_id;
  j["source_text_id"] = record.source_text_id;
  j["target_image_id"] = record.target_image_id;
  j["split"] = std::string(split_name(record.split));
  if (record.category) j["category"] = *record.category;
  if (record.subset_ids) j["subset_ids"] = *record.subset_ids;
  return j;
}

TripletRecord triplet_from_json(const nlohmann::json& j) {
  using Kind = DataError::Kind;
  if (!j.is_object()) throw DataError(Kind::kSchema, "manifest record is not an object");
  auto required = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) {
      throw DataError(Kind::kSchema, std::string("manifest record lacks string field '") + key +
                                         "'");
    }
    return j[key].get<std::string>();
  };
  TripletRecord r;
  r.source_image_id = required("source_image_id");
  r.source_text_id = required("source_text_id");
  r.target_image_id = required("target_image_id");
  r.split = parse_split(required("split"));
  if (j.contains("category") && !j["category"].is_null()) {
    if (!j["category"].is_string()) throw DataError(Kind::kSchema, "'category' must be a string");
    r.category = j["category"].get<std::string>();
  }
  if (j.contains("subset_ids") && !j["subset_ids"].is_null()) {
    const auto& s = j["subset_ids"];
    if (!s.is_array()) throw DataError(Kind::kSchema, "'subset_ids' must be an array");
    std::vector<std::string> ids;
    for (const auto& v : s) {
      if (!v.is_string()) throw DataError(Kind::kSchema, "'subset_ids' entries must be strings");
      ids.push_back(v.get<std::string>());
    }
    r.subset_ids = std::move(ids);
  }
  return r;
}

std::vector<TripletRecord> parse_manifest(std::string_view text) {
  std::vector<TripletRecord> records;
  std::set<std::tuple<int, std::string, std::string, std::string>> seen;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    TripletRecord r;
    try {
      r = triplet_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(DataError::Kind::kSchema,
                      "manifest line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(e.kind(), "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    auto key = std::make_tuple(static_cast<int>(r.split), r.source_image_id, r.source_text_id,
                               r.target_image_id);
    if (!seen.insert(key).second) {
      throw DataError(DataError::Kind::kDuplicateRecord,
                      "manifest line " + std::to_string(line_no) + ": duplicate record (" +
                          r.source_image_id + ", " + r.source_text_id + ", " +
                          r.target_image_id + ") in split " + std::string(split_name(r.split)));
    }
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<TripletRecord> load_manifest(const fs::path& path) {
  std::string text = read_file(path);
  try {
    return parse_manifest(text);
  } catch (const DataError& e) {
    throw DataError(e.kind(), path.string() + ": " + e.what());
  }
}

std::string format_manifest(const std::vector<TripletRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

void save_manifest(const std::vector<TripletRecord>& records, const fs::path& path) {
  write_file(path, format_manifest(records));
}

// -- Dataset --------------------------------------------------------------

Dataset::Dataset(std::shared_ptr<const EmbeddingStore> images,
                 std::shared_ptr<const EmbeddingStore> texts, std::vector<TripletRecord> records,
                 std::vector<ResolvedTriplet> rows)
    : images_(std::move(images)),
      texts_(std::move(texts)),
      records_(std::move(records)),
      rows_(std::move(rows)) {
  if (!images_ || !texts_) throw DataError(DataError::Kind::kSchema, "dataset: missing store");
  if (images_->dim() != texts_->dim()) {
    throw DataError(DataError::Kind::kSchema,
                    "dataset: image dim " + std::to_string(images_->dim()) + " != text dim " +
                        std::to_string(texts_->dim()));
  }
  if (records_.size() != rows_.size()) {
    throw DataError(DataError::Kind::kSchema, "dataset: records and rows differ in length");
  }
}

namespace {

template <class RowOf>
Matrix gather(const EmbeddingStore& store, std::span<const std::size_t> indices, RowOf row_of) {
  Matrix m(static_cast<Eigen::Index>(indices.size()), store.dim());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto r = store.row(row_of(indices[i]));
    for (int j = 0; j < store.dim(); ++j) {
      m(static_cast<Eigen::Index>(i), j) = static_cast<double>(r[static_cast<std::size_t>(j)]);
    }
  }
  return m;
}

}  // namespace

Matrix Dataset::source_images(std::span<const std::size_t> indices) const {
  return gather(*images_, indices, [&](std::size_t i) { return rows_.at(i).source_image_row; });
}

Matrix Dataset::source_texts(std::span<const std::size_t> indices) const {
  return gather(*texts_, indices, [&](std::size_t i) { return rows_.at(i).source_text_row; });
}

Matrix Dataset::targets(std::span<const std::size_t> indices) const {
  return gather(*images_, indices, [&](std::size_t i) { return rows_.at(i).target_image_row; });
}

Dataset Dataset::filter_category(const std::string& category) const {
  std::vector<TripletRecord> records;
  std::vector<ResolvedTriplet> rows;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (records_[i].category == category) {
      records.push_back(records_[i]);
      rows.push_back(rows_[i]);
    }
  }
  return Dataset(images_, texts_, std::move(records), std::move(rows));
}

std::vector<std::string> Dataset::categories() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : records_) {
    if (r.category && seen.insert(*r.category).second) out.push_back(*r.category);
  }
  return out;
}

Dataset resolve_triplets(const std::vector<TripletRecord>& manifest, std::optional<Split> split,
                         std::shared_ptr<const EmbeddingStore> images,
                         std::shared_ptr<const EmbeddingStore> texts) {
  std::vector<std::string> missing;
  std::set<std::string> missing_seen;
  auto resolve = [&](const EmbeddingStore& store, const std::string& id,
                     std::string_view kind) -> std::size_t {
    if (auto row = store.find(id)) return *row;
    std::string tagged = std::string(kind) + ":" + id;
    if (missing_seen.insert(tagged).second) missing.push_back(std::move(tagged));
    return 0;
  };
  std::vector<TripletRecord> records;
  std::vector<ResolvedTriplet> rows;
  for (const auto& r : manifest) {
    if (split && r.split != *split) continue;
    ResolvedTriplet t;
    t.source_image_row = resolve(*images, r.source_image_id, "image");
    t.source_text_row = resolve(*texts, r.source_text_id, "text");
    t.target_image_row = resolve(*images, r.target_image_id, "image");
    if (r.subset_ids) {
      for (const auto& id : *r.subset_ids) resolve(*images, id, "image");
    }
    records.push_back(r);
    rows.push_back(t);
  }
  if (!missing.empty()) {
    std::string msg = "unresolved ids (" + std::to_string(missing.size()) + "):";
    for (const auto& id : missing) msg += " " + id;
    throw DataError(DataError::Kind::kDanglingId, msg);
  }
  return Dataset(std::move(images), std::move(texts), std::move(records), std::move(rows));
}

// -- synthetic world ------------------------------------------------------

void SynthSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synth spec: " + msg); };
  if (dim < 1) fail("dim must be positive");
  if (num_clusters < 1) fail("num_clusters must be positive");
  if (sources_per_target < 1) fail("sources_per_target must be positive");
  if (targets_per_source < 1) fail("targets_per_source must be positive");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be >= 0");
  if (!(cluster_spread >= 0.0) || !std::isfinite(cluster_spread)) {
    fail("cluster_spread must be >= 0");
  }
  const int per_anchor = sources_per_target * targets_per_source;
  if (train_triplets < 0 || val_triplets < 0 || train_triplets % per_anchor != 0 ||
      val_triplets % per_anchor != 0) {
    fail("train/val triplet counts must be non-negative multiples of sources_per_target * "
         "targets_per_source (" + std::to_string(per_anchor) + ")");
  }
}

nlohmann::json SyntheticWorld::ground_truth_json() const {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : ground_truth) {
    edges.push_back({{"source_image_id", e.source_image_id},
                     {"source_text_id", e.source_text_id},
                     {"target_ids", e.target_ids}});
  }
  return {{"edges", edges}};
}

namespace {

Eigen::RowVectorXd unit_gaussian(Rng& rng, int dim) {
  Eigen::RowVectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v.normalized();
}

std::vector<Eigen::RowVectorXd> cluster_centers(const SynthSpec& spec, Rng& rng) {
  constexpr double kMaxCos = 0.5;
  const long max_attempts = 1000L * spec.num_clusters;
  std::vector<Eigen::RowVectorXd> centers;
  long attempts = 0;
  while (static_cast<int>(centers.size()) < spec.num_clusters) {
    if (++attempts > max_attempts) {
      throw ConfigError("synth spec: cannot place " + std::to_string(spec.num_clusters) +
                        " clusters in dim " + std::to_string(spec.dim) +
                        " with pairwise cosine <= 0.5");
    }
    Eigen::RowVectorXd c = unit_gaussian(rng, spec.dim);
    bool ok = true;
    for (const auto& other : centers) ok = ok && c.dot(other) <= kMaxCos;
    if (ok) centers.push_back(std::move(c));
  }
  return centers;
}

}  // namespace

SyntheticWorld generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto centers = cluster_centers(spec, rng);
  const int per_anchor = spec.sources_per_target * spec.targets_per_source;
  const int train_anchors = spec.train_triplets / per_anchor;
  const int total_anchors = train_anchors + spec.val_triplets / per_anchor;
  const double inv_sqrt_dim = 1.0 / std::sqrt(static_cast<double>(spec.dim));

  std::vector<std::string> image_ids, text_ids;
  std::vector<float> image_values, text_values;
  auto append = [](std::vector<float>& dst, const Eigen::RowVectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) dst.push_back(static_cast<float>(v[i]));
  };
  auto noise = [&](double scale) {
    Eigen::RowVectorXd v(spec.dim);
    for (int i = 0; i < spec.dim; ++i) v[i] = scale * rng.normal();
    return v;
  };

  std::vector<TripletRecord> manifest;
  std::vector<SourceTargets> truth;
  for (int a = 0; a < total_anchors; ++a) {
    const auto& center = centers[static_cast<std::size_t>(a % spec.num_clusters)];
    Eigen::RowVectorXd anchor = (center + noise(spec.cluster_spread * inv_sqrt_dim)).normalized();
    const std::string prefix = "a" + std::to_string(a) + "/";
    const Split split = a < train_anchors ? Split::kTrain : Split::kVal;

    std::vector<std::string> targets;
    for (int t = 0; t < spec.targets_per_source; ++t) {
      targets.push_back(prefix + "tgt" + std::to_string(t));
      image_ids.push_back(targets.back());
      append(image_values, anchor + noise(spec.noise_sigma));
    }
    for (int s = 0; s < spec.sources_per_target; ++s) {
      const std::string img_id = prefix + "src" + std::to_string(s);
      const std::string txt_id = prefix + "txt" + std::to_string(s);
      Eigen::RowVectorXd img = noise(inv_sqrt_dim);
      Eigen::RowVectorXd txt = anchor - img + noise(spec.noise_sigma);
      image_ids.push_back(img_id);
      append(image_values, img);
      text_ids.push_back(txt_id);
      append(text_values, txt);
      for (const auto& target : targets) {
        manifest.push_back({img_id, txt_id, target, split, std::nullopt, std::nullopt});
      }
      truth.push_back({img_id, txt_id, targets});
    }
  }
  return SyntheticWorld{
      EmbeddingStore(spec.dim, std::move(image_ids), std::move(image_values)),
      EmbeddingStore(spec.dim, std::move(text_ids), std::move(text_values)), std::move(manifest),
      std::move(truth)};
}

}  // namespace rankuncert
