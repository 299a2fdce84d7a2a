#ifndef NDCRF_DETAIL_VERTEX_TABLE_HPP
#define NDCRF_DETAIL_VERTEX_TABLE_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "ndcrf/errors.hpp"

namespace ndcrf::detail {

/// Open-addressing hash map from d-dimensional int16 lattice keys to dense
/// vertex indices. Linear probing; capacity is the requested entry budget
/// rounded up to a power of two and never grows, so a full table is a
/// reported error rather than a rehash.
class VertexTable {
 public:
  VertexTable() = default;
  VertexTable(int key_dim, std::int64_t max_entries);

  /// Returns the vertex index for key, inserting a fresh one if absent.
  std::int32_t insert(std::span<const std::int16_t> key);

  /// Returns the vertex index for key, or -1 if absent.
  std::int32_t find(std::span<const std::int16_t> key) const;

  std::int64_t size() const noexcept { return n_entries_; }
  std::int64_t capacity() const noexcept { return capacity_; }
  int key_dim() const noexcept { return key_dim_; }

 private:
  std::uint64_t hash(std::span<const std::int16_t> key) const noexcept {
    std::uint64_t h = 0;
    for (int i = 0; i < key_dim_; ++i)
      h = (h + static_cast<std::uint16_t>(key[i])) * 2654435761ull;
    return h & static_cast<std::uint64_t>(capacity_ - 1);
  }
  bool key_equals(std::int64_t slot, std::span<const std::int16_t> key) const noexcept {
    const std::int16_t* s = slot_keys_.data() + slot * key_dim_;
    for (int i = 0; i < key_dim_; ++i)
      if (s[i] != key[i]) return false;
    return true;
  }

  int key_dim_ = 0;
  std::int64_t capacity_ = 0;
  std::int64_t n_entries_ = 0;
  std::vector<std::int32_t> slot_vertex_;  // -1 = empty
  std::vector<std::int16_t> slot_keys_;
};

}  // namespace ndcrf::detail

#endif
