// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "rankuncert/error.hpp"

namespace rankuncert {

namespace {

class Writer {
 public:
  void bytes(std::string_view b) { out_.append(b); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void tensors(const ParameterMap& group) {
    u32(static_cast<std::uint32_t>(group.size()));
    for (const auto& [name, m] : group) {
      u32(static_cast<std::uint32_t>(name.size()));
      bytes(name);
      u32(static_cast<std::uint32_t>(m.rows()));
      u32(static_cast<std::uint32_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.size(); ++i) f32(m.data()[i]);
    }
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::string_view bytes(std::size_t n) {
    if (in_.size() - pos_ < n) {
      throw DataError(DataError::Kind::kTruncated,
                      "checkpoint: truncated at byte offset " + std::to_string(pos_) + ", need " +
                          std::to_string(n) + " more bytes, have " +
                          std::to_string(in_.size() - pos_));
    }
    auto out = in_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint32_t u32() {
    auto b = bytes(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto b = bytes(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  ParameterMap tensors() {
    ParameterMap group;
    const std::uint32_t count = u32();
    for (std::uint32_t t = 0; t < count; ++t) {
      std::string name(bytes(u32()));
      const std::uint32_t rows = u32();
      const std::uint32_t cols = u32();
      if (4ULL * rows * cols > in_.size() - pos_) {
        throw DataError(DataError::Kind::kTruncated,
                        "checkpoint: tensor '" + name + "' runs past the end of the file");
      }
      Matrix m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        const float v = std::bit_cast<float>(u32());
        if (!std::isfinite(v)) {
          throw DataError(DataError::Kind::kNonFinite,
                          "checkpoint: non-finite value in tensor '" + name + "'");
        }
        m.data()[i] = static_cast<double>(v);
      }
      if (!group.emplace(std::move(name), std::move(m)).second) {
        throw DataError(DataError::Kind::kDuplicateId, "checkpoint: duplicate tensor name");
      }
    }
    return group;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u64(c.config_digest);
  w.u32(c.dim);
  w.u32(c.epoch);
  w.u64(c.optimizer_step);
  w.tensors(c.parameters);
  w.tensors(c.first_moment);
  w.tensors(c.second_moment);
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) {
    throw DataError(DataError::Kind::kMagic, "checkpoint: bad magic at byte offset 0");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError(DataError::Kind::kVersion,
                    "checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_digest = r.u64();
  c.dim = r.u32();
  c.epoch = r.u32();
  c.optimizer_step = r.u64();
  c.parameters = r.tensors();
  c.first_moment = r.tensors();
  c.second_moment = r.tensors();
  if (r.remaining() != 0) {
    throw DataError(DataError::Kind::kTruncated,
                    "checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const DataError& e) {
    throw DataError(e.kind(), path.string() + ": " + e.what());
  }
}

}  // namespace rankuncert
