// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "opera/vec.hpp"

namespace opera {

/// Dense row-major table of embeddings. Rows are kept at unit L2 norm by
/// every mutating operation in this library; persistence uses f32 rows, so
/// norms of loaded tables are exact only to f32 rounding (well within 1e-5).
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::size_t count, std::size_t dim)
      : count_(count), dim_(dim), data_(count * dim, 0.0) {}

  std::size_t count() const { return count_; }
  std::size_t dim() const { return dim_; }

  std::span<double> row(std::size_t i) {
    return {data_.data() + i * dim_, dim_};
  }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * dim_, dim_};
  }

  void normalize_rows() {
    for (std::size_t i = 0; i < count_; ++i) normalize(row(i));
  }

  void save(const std::filesystem::path& path) const;
  static EmbeddingTable load(const std::filesystem::path& path);

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
    return a.count_ == b.count_ && a.dim_ == b.dim_ && a.data_ == b.data_;
  }

 private:
  std::size_t count_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

namespace detail {

constexpr char kEmbeddingMagic[] = "OPEMB1\n";
constexpr std::size_t kEmbeddingMagicLen = 7;

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return __builtin_bswap32(v);
  }
  return v;
}

}  // namespace detail

inline void EmbeddingTable::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os.write(detail::kEmbeddingMagic, detail::kEmbeddingMagicLen);
  nlohmann::json header = {{"count", count_}, {"dim", dim_}, {"dtype", "f32le"}};
  std::string line = header.dump();
  line.push_back('\n');
  os.write(line.data(), static_cast<std::streamsize>(line.size()));
  std::vector<std::uint32_t> buf(dim_);
  for (std::size_t i = 0; i < count_; ++i) {
    auto r = row(i);
    for (std::size_t j = 0; j < dim_; ++j) {
      float f = static_cast<float>(r[j]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof(bits));
      buf[j] = detail::to_le(bits);
    }
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(dim_ * sizeof(std::uint32_t)));
  }
  if (!os) throw std::runtime_error("short write: " + path.string());
}

inline EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  char magic[detail::kEmbeddingMagicLen];
  is.read(magic, detail::kEmbeddingMagicLen);
  if (!is || std::memcmp(magic, detail::kEmbeddingMagic, detail::kEmbeddingMagicLen) != 0) {
    throw std::runtime_error("not an embedding file (bad magic): " + path.string());
  }
  std::string header_line;
  if (!std::getline(is, header_line)) {
    throw std::runtime_error("missing embedding header: " + path.string());
  }
  nlohmann::json header = nlohmann::json::parse(header_line, nullptr, false);
  if (header.is_discarded() || !header.contains("count") || !header.contains("dim") ||
      header.value("dtype", "") != "f32le") {
    throw std::runtime_error("malformed embedding header: " + path.string());
  }
  EmbeddingTable table(header["count"].get<std::size_t>(), header["dim"].get<std::size_t>());
  std::vector<std::uint32_t> buf(table.dim_);
  for (std::size_t i = 0; i < table.count_; ++i) {
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(table.dim_ * sizeof(std::uint32_t)));
    if (!is) throw std::runtime_error("truncated embedding file: " + path.string());
    auto r = table.row(i);
    for (std::size_t j = 0; j < table.dim_; ++j) {
      std::uint32_t bits = detail::to_le(buf[j]);
      float f;
      std::memcpy(&f, &bits, sizeof(f));
      r[j] = static_cast<double>(f);
    }
  }
  return table;
}

}  // namespace opera
