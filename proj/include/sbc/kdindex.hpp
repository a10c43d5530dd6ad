// Hybrid-memory k-d tree over one feature subset. The inner tree (split
// planes and leaf directory) lives in memory; leaves are packed
// consecutively in a separate file and read only when a query touches them.
//
// On disk an index is a pair of little-endian files:
//   <base>.tree    "KDX1", D, subset dims, leaf_size, n, layout, record width,
//                  catalog d, preorder inner nodes (u16 split dim, f64 value),
//                  leaf directory (u64 byte offset, u32 record count)
//   <base>.leaves  packed records (u64 id, f64 x record width)
#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sbc/core.hpp"

namespace sbc {

/// Ts leaves store the D subset coordinates; Ta leaves store all d.
enum class LeafLayout : std::uint8_t { Ts = 0, Ta = 1 };

std::string_view to_string(LeafLayout layout) noexcept;
LeafLayout parse_layout(std::string_view name);

inline constexpr std::size_t kDefaultLeafSize = 5632;

struct KdBuildOptions {
  std::size_t leaf_size = kDefaultLeafSize;
  LeafLayout layout = LeafLayout::Ts;
};

struct QueryStats {
  std::size_t leaves_visited = 0;
  std::size_t bytes_read = 0;
};

struct RangeQueryOptions {
  /// Stop after this many leaves (the remaining subtrees are skipped).
  std::size_t max_leaves = std::numeric_limits<std::size_t>::max();
};

/// Records matched by one query: ids[i] with coords[i*width, (i+1)*width).
struct RangeResult {
  std::vector<InstanceId> ids;
  std::vector<double> coords;
  std::size_t width = 0;
  QueryStats stats;

  std::size_t size() const noexcept { return ids.size(); }
  std::span<const double> record(std::size_t i) const noexcept {
    return {coords.data() + i * width, width};
  }
};

struct Neighbor {
  InstanceId id;
  double distance;
};

class KdIndex {
 public:
  struct InnerNode {
    double split_value = 0.0;
    /// >= 0: inner node index; < 0: leaf number ~child.
    std::int32_t left = 0;
    std::int32_t right = 0;
    /// Position of the split feature within the subset.
    std::uint16_t split_pos = 0;
  };

  struct LeafEntry {
    std::uint64_t offset = 0;
    std::uint32_t count = 0;
  };

  /// Opens `<base>.tree` and `<base>.leaves`. Throws StorageError.
  static KdIndex open(const std::filesystem::path& base);

  KdIndex(KdIndex&&) noexcept;
  KdIndex& operator=(KdIndex&&) noexcept;
  ~KdIndex();

  const FeatureSubset& subset() const noexcept { return subset_; }
  LeafLayout layout() const noexcept { return layout_; }
  std::size_t leaf_size() const noexcept { return leaf_size_; }
  std::size_t size() const noexcept { return n_; }
  std::size_t catalog_dims() const noexcept { return catalog_dims_; }
  /// Coordinates per record: D for Ts, d for Ta.
  std::size_t record_width() const noexcept { return width_; }
  std::size_t record_bytes() const noexcept { return sizeof(std::uint64_t) + width_ * sizeof(double); }
  std::size_t leaf_count() const noexcept { return leaves_.size(); }
  std::size_t depth() const noexcept;
  const std::vector<InnerNode>& inner_nodes() const noexcept { return inner_; }
  const std::vector<LeafEntry>& leaf_directory() const noexcept { return leaves_; }
  /// Bytes held in memory for the inner tree and leaf directory.
  std::size_t inner_memory_bytes() const noexcept;
  const std::filesystem::path& base_path() const noexcept { return base_; }

  /// All records inside `box` on the subset dimensions. `box` has catalog
  /// dimensionality; a bound on a dimension outside the subset throws
  /// ConfigError.
  RangeResult range_query(const Box& box, const RangeQueryOptions& opts = {}) const;
  /// Same query with bounds given per subset position (D entries each).
  RangeResult range_query_subspace(std::span<const double> lower, std::span<const double> upper,
                                   const RangeQueryOptions& opts = {}) const;

  /// Exact K nearest records by Euclidean distance in subset space (`q` has
  /// D entries, in subset order). Ties go to the smaller id. Throws
  /// DomainError unless 1 <= K <= n.
  std::vector<Neighbor> knn_query(std::span<const double> q, std::size_t k,
                                  QueryStats* stats = nullptr) const;

  /// Reads leaf `i` (ids and coordinates).
  RangeResult read_leaf(std::size_t i) const;

  /// Advises the OS to drop cached pages of the leaves file.
  void drop_page_cache() const;

 private:
  KdIndex() = default;
  double subset_coord(std::span<const double> record, std::size_t pos) const noexcept {
    return layout_ == LeafLayout::Ts ? record[pos] : record[subset_[pos]];
  }
  void load_leaf(std::size_t i, std::vector<unsigned char>& buf, QueryStats& stats) const;

  FeatureSubset subset_;
  LeafLayout layout_ = LeafLayout::Ts;
  std::size_t leaf_size_ = 0;
  std::size_t n_ = 0;
  std::size_t width_ = 0;
  std::size_t catalog_dims_ = 0;
  std::vector<InnerNode> inner_;
  std::vector<LeafEntry> leaves_;
  std::filesystem::path base_;
  int fd_ = -1;
};

/// Builds `<base>.tree` / `<base>.leaves` for `catalog` projected on
/// `subset`, median-splitting on subset dimensions cycled by depth until a
/// partition holds at most leaf_size records. Throws ConfigError for
/// leaf_size < 1 or an empty catalog, StorageError on I/O failure.
KdIndex build_index(const LabeledDataset& catalog, const FeatureSubset& subset,
                    const KdBuildOptions& opts, const std::filesystem::path& base);

std::filesystem::path tree_path(const std::filesystem::path& base);
std::filesystem::path leaves_path(const std::filesystem::path& base);

}  // namespace sbc
