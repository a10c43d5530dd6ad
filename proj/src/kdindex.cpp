#include "sbc/kdindex.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <queue>
#include <utility>

#include "sbc/binio.hpp"

namespace sbc {

namespace {

constexpr char kTreeMagic[5] = "KDX1";

std::string errno_text() { return std::strerror(errno); }

}  // namespace

std::string_view to_string(LeafLayout layout) noexcept {
  return layout == LeafLayout::Ts ? "Ts" : "Ta";
}

LeafLayout parse_layout(std::string_view name) {
  std::string lower;
  for (char c : name) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "ts") return LeafLayout::Ts;
  if (lower == "ta") return LeafLayout::Ta;
  throw ConfigError("unknown leaf layout '" + std::string(name) + "' (expected Ts or Ta)");
}

std::filesystem::path tree_path(const std::filesystem::path& base) {
  return std::filesystem::path(base.string() + ".tree");
}

std::filesystem::path leaves_path(const std::filesystem::path& base) {
  return std::filesystem::path(base.string() + ".leaves");
}

KdIndex::KdIndex(KdIndex&& other) noexcept { *this = std::move(other); }

KdIndex& KdIndex::operator=(KdIndex&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) ::close(fd_);
    subset_ = std::move(other.subset_);
    layout_ = other.layout_;
    leaf_size_ = other.leaf_size_;
    n_ = other.n_;
    width_ = other.width_;
    catalog_dims_ = other.catalog_dims_;
    inner_ = std::move(other.inner_);
    leaves_ = std::move(other.leaves_);
    base_ = std::move(other.base_);
    fd_ = std::exchange(other.fd_, -1);
  }
  return *this;
}

KdIndex::~KdIndex() {
  if (fd_ >= 0) ::close(fd_);
}

std::size_t KdIndex::depth() const noexcept {
  if (inner_.empty()) return 0;
  std::size_t best = 0;
  std::vector<std::pair<std::int32_t, std::size_t>> stack{{0, 1}};
  while (!stack.empty()) {
    auto [node, d] = stack.back();
    stack.pop_back();
    best = std::max(best, d);
    for (std::int32_t child : {inner_[node].left, inner_[node].right}) {
      if (child >= 0) stack.emplace_back(child, d + 1);
    }
  }
  return best;
}

std::size_t KdIndex::inner_memory_bytes() const noexcept {
  return inner_.size() * sizeof(InnerNode) + leaves_.size() * sizeof(LeafEntry);
}

namespace {

// Computes the tree shape for `count` records: a partition is split iff it
// holds more than leaf_size records, the left half taking ceil(count / 2).
class TreeBuilder {
 public:
  TreeBuilder(const std::vector<double>& keys, std::size_t dims, std::size_t leaf_size,
              std::vector<std::uint32_t>& perm)
      : keys_(keys), dims_(dims), leaf_size_(leaf_size), perm_(perm) {}

  std::int32_t build(std::size_t lo, std::size_t hi, std::size_t depth) {
    if (hi - lo <= leaf_size_) {
      const auto leaf = static_cast<std::int32_t>(ranges.size());
      ranges.emplace_back(lo, hi);
      return ~leaf;
    }
    const std::size_t pos = depth % dims_;
    const std::size_t mid = lo + (hi - lo + 1) / 2;
    auto key = [&](std::uint32_t r) { return keys_[static_cast<std::size_t>(r) * dims_ + pos]; };
    std::nth_element(perm_.begin() + static_cast<std::ptrdiff_t>(lo),
                     perm_.begin() + static_cast<std::ptrdiff_t>(mid - 1),
                     perm_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::uint32_t a, std::uint32_t b) { return key(a) < key(b); });
    const auto idx = static_cast<std::int32_t>(nodes.size());
    KdIndex::InnerNode node;
    node.split_value = key(perm_[mid - 1]);
    node.split_pos = static_cast<std::uint16_t>(pos);
    nodes.push_back(node);
    const std::int32_t left = build(lo, mid, depth + 1);
    const std::int32_t right = build(mid, hi, depth + 1);
    nodes[idx].left = left;
    nodes[idx].right = right;
    return idx;
  }

  std::vector<KdIndex::InnerNode> nodes;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;

 private:
  const std::vector<double>& keys_;
  std::size_t dims_;
  std::size_t leaf_size_;
  std::vector<std::uint32_t>& perm_;
};

// Rebuilds child links from the preorder node stream and the partition sizes.
struct ShapeReader {
  std::istream& is;
  const FeatureSubset& subset;
  std::size_t leaf_size;
  std::vector<KdIndex::InnerNode>& nodes;
  std::size_t declared_nodes;
  std::vector<std::size_t> leaf_counts;

  std::int32_t read(std::size_t count) {
    if (count <= leaf_size) {
      leaf_counts.push_back(count);
      return ~static_cast<std::int32_t>(leaf_counts.size() - 1);
    }
    if (nodes.size() >= declared_nodes) throw StorageError("k-d tree node stream too short");
    const auto dim = binio::read<std::uint16_t>(is);
    const std::size_t pos = subset.position_of(dim);
    if (pos == subset.size()) throw StorageError("k-d tree split dimension not in subset");
    KdIndex::InnerNode node;
    node.split_pos = static_cast<std::uint16_t>(pos);
    node.split_value = binio::read<double>(is);
    const auto idx = static_cast<std::int32_t>(nodes.size());
    nodes.push_back(node);
    const std::size_t left_count = (count + 1) / 2;
    const std::int32_t left = read(left_count);
    const std::int32_t right = read(count - left_count);
    nodes[idx].left = left;
    nodes[idx].right = right;
    return idx;
  }
};

}  // namespace

KdIndex build_index(const LabeledDataset& catalog, const FeatureSubset& subset,
                    const KdBuildOptions& opts, const std::filesystem::path& base) {
  if (opts.leaf_size < 1) throw ConfigError("leaf size must be at least 1");
  if (catalog.empty()) throw ConfigError("cannot index an empty catalog");
  if (catalog.rows() >= std::numeric_limits<std::uint32_t>::max()) {
    throw ConfigError("catalog too large for a single index");
  }
  for (FeatureIndex dim : subset.dims()) {
    if (dim >= catalog.dims()) throw ConfigError("subset " + subset.to_string() + " exceeds catalog d");
    if (dim > std::numeric_limits<std::uint16_t>::max()) throw ConfigError("feature index exceeds u16");
  }
  const std::size_t n = catalog.rows();
  const std::size_t dims = subset.size();
  const std::size_t d = catalog.dims();
  const std::size_t width = opts.layout == LeafLayout::Ts ? dims : d;

  std::vector<double> keys(n * dims);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < dims; ++j) keys[r * dims + j] = catalog.at(r, subset[j]);
  }
  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::uint32_t{0});

  TreeBuilder builder(keys, dims, opts.leaf_size, perm);
  builder.build(0, n, 0);
  keys.clear();
  keys.shrink_to_fit();

  std::vector<KdIndex::LeafEntry> directory;
  directory.reserve(builder.ranges.size());
  {
    std::vector<char> buffer(1 << 20);
    std::ofstream leaves;
    leaves.rdbuf()->pubsetbuf(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    leaves.open(leaves_path(base), std::ios::binary | std::ios::trunc);
    if (!leaves) throw StorageError("cannot create " + leaves_path(base).string());
    std::uint64_t offset = 0;
    const std::size_t record_bytes = sizeof(std::uint64_t) + width * sizeof(double);
    for (auto [lo, hi] : builder.ranges) {
      directory.push_back({offset, static_cast<std::uint32_t>(hi - lo)});
      for (std::size_t i = lo; i < hi; ++i) {
        const std::size_t r = perm[i];
        binio::write<std::uint64_t>(leaves, catalog.id(r));
        if (opts.layout == LeafLayout::Ts) {
          for (std::size_t j = 0; j < dims; ++j) binio::write<double>(leaves, catalog.at(r, subset[j]));
        } else {
          const auto row = catalog.row(r);
          leaves.write(reinterpret_cast<const char*>(row.data()),
                       static_cast<std::streamsize>(row.size() * sizeof(double)));
        }
      }
      offset += (hi - lo) * record_bytes;
    }
    leaves.flush();
    if (!leaves) throw StorageError("write failed: " + leaves_path(base).string());
  }

  {
    std::ofstream tree(tree_path(base), std::ios::binary | std::ios::trunc);
    if (!tree) throw StorageError("cannot create " + tree_path(base).string());
    binio::write_magic(tree, kTreeMagic);
    binio::write<std::uint32_t>(tree, static_cast<std::uint32_t>(dims));
    for (FeatureIndex dim : subset.dims()) binio::write<std::uint32_t>(tree, dim);
    binio::write<std::uint64_t>(tree, opts.leaf_size);
    binio::write<std::uint64_t>(tree, n);
    binio::write<std::uint8_t>(tree, static_cast<std::uint8_t>(opts.layout));
    binio::write<std::uint32_t>(tree, static_cast<std::uint32_t>(width));
    binio::write<std::uint32_t>(tree, static_cast<std::uint32_t>(d));
    binio::write<std::uint32_t>(tree, static_cast<std::uint32_t>(builder.nodes.size()));
    for (const auto& node : builder.nodes) {
      binio::write<std::uint16_t>(tree, static_cast<std::uint16_t>(subset[node.split_pos]));
      binio::write<double>(tree, node.split_value);
    }
    binio::write<std::uint32_t>(tree, static_cast<std::uint32_t>(directory.size()));
    for (const auto& leaf : directory) {
      binio::write<std::uint64_t>(tree, leaf.offset);
      binio::write<std::uint32_t>(tree, leaf.count);
    }
    tree.flush();
    if (!tree) throw StorageError("write failed: " + tree_path(base).string());
  }
  return KdIndex::open(base);
}

KdIndex KdIndex::open(const std::filesystem::path& base) {
  std::ifstream is(tree_path(base), std::ios::binary);
  if (!is) throw StorageError("cannot open " + tree_path(base).string());
  binio::expect_magic(is, kTreeMagic);

  KdIndex idx;
  idx.base_ = base;
  const auto dims = binio::read<std::uint32_t>(is);
  std::vector<FeatureIndex> subset(dims);
  for (auto& dim : subset) dim = binio::read<std::uint32_t>(is);
  idx.leaf_size_ = binio::read<std::uint64_t>(is);
  idx.n_ = binio::read<std::uint64_t>(is);
  const auto layout = binio::read<std::uint8_t>(is);
  if (layout > 1) throw StorageError("unknown leaf layout tag");
  idx.layout_ = static_cast<LeafLayout>(layout);
  idx.width_ = binio::read<std::uint32_t>(is);
  idx.catalog_dims_ = binio::read<std::uint32_t>(is);
  try {
    idx.subset_ = FeatureSubset(std::move(subset), idx.catalog_dims_);
  } catch (const ConfigError& e) {
    throw StorageError(std::string("corrupt index header: ") + e.what());
  }
  const std::size_t expected_width = idx.layout_ == LeafLayout::Ts ? dims : idx.catalog_dims_;
  if (idx.width_ != expected_width || idx.leaf_size_ < 1 || idx.n_ < 1) {
    throw StorageError("inconsistent index header in " + tree_path(base).string());
  }

  const auto node_count = binio::read<std::uint32_t>(is);
  idx.inner_.reserve(node_count);
  ShapeReader shape{is, idx.subset_, idx.leaf_size_, idx.inner_, node_count, {}};
  shape.read(idx.n_);
  if (idx.inner_.size() != node_count) throw StorageError("k-d tree node count mismatch");

  const auto leaf_count = binio::read<std::uint32_t>(is);
  if (leaf_count != shape.leaf_counts.size()) throw StorageError("leaf directory size mismatch");
  idx.leaves_.resize(leaf_count);
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < leaf_count; ++i) {
    idx.leaves_[i].offset = binio::read<std::uint64_t>(is);
    idx.leaves_[i].count = binio::read<std::uint32_t>(is);
    if (idx.leaves_[i].offset != expected_offset || idx.leaves_[i].count != shape.leaf_counts[i]) {
      throw StorageError("leaf directory entry " + std::to_string(i) + " inconsistent");
    }
    expected_offset += idx.leaves_[i].count * idx.record_bytes();
  }

  idx.fd_ = ::open(leaves_path(base).c_str(), O_RDONLY | O_CLOEXEC);
  if (idx.fd_ < 0) throw StorageError("cannot open " + leaves_path(base).string() + ": " + errno_text());
  const off_t size = ::lseek(idx.fd_, 0, SEEK_END);
  if (size < 0 || static_cast<std::uint64_t>(size) != expected_offset) {
    throw StorageError("leaves file " + leaves_path(base).string() + " has unexpected size");
  }
  return idx;
}

void KdIndex::load_leaf(std::size_t i, std::vector<unsigned char>& buf, QueryStats& stats) const {
  const LeafEntry& leaf = leaves_[i];
  const std::size_t bytes = leaf.count * record_bytes();
  buf.resize(bytes);
  std::size_t done = 0;
  while (done < bytes) {
    const ssize_t got = ::pread(fd_, buf.data() + done, bytes - done,
                                static_cast<off_t>(leaf.offset + done));
    if (got < 0) {
      if (errno == EINTR) continue;
      throw StorageError("read failed on " + leaves_path(base_).string() + ": " + errno_text());
    }
    if (got == 0) throw StorageError("unexpected end of " + leaves_path(base_).string());
    done += static_cast<std::size_t>(got);
  }
  ++stats.leaves_visited;
  stats.bytes_read += bytes;
}

RangeResult KdIndex::read_leaf(std::size_t i) const {
  RangeResult out;
  out.width = width_;
  std::vector<unsigned char> buf;
  load_leaf(i, buf, out.stats);
  const std::size_t rb = record_bytes();
  out.ids.resize(leaves_[i].count);
  out.coords.resize(leaves_[i].count * width_);
  for (std::size_t r = 0; r < leaves_[i].count; ++r) {
    std::memcpy(&out.ids[r], buf.data() + r * rb, sizeof(std::uint64_t));
    std::memcpy(out.coords.data() + r * width_, buf.data() + r * rb + sizeof(std::uint64_t),
                width_ * sizeof(double));
  }
  return out;
}

RangeResult KdIndex::range_query(const Box& box, const RangeQueryOptions& opts) const {
  if (box.dims() != catalog_dims_) {
    throw DomainError("query box has " + std::to_string(box.dims()) + " dimensions, catalog has " +
                      std::to_string(catalog_dims_));
  }
  for (std::size_t i = 0; i < box.dims(); ++i) {
    if (box.is_bounded(i) && !subset_.contains(static_cast<FeatureIndex>(i))) {
      throw ConfigError("query box bounds dimension " + std::to_string(i) + " outside index subset " +
                        subset_.to_string());
    }
  }
  std::vector<double> lower(subset_.size()), upper(subset_.size());
  for (std::size_t j = 0; j < subset_.size(); ++j) {
    lower[j] = box.lower(subset_[j]);
    upper[j] = box.upper(subset_[j]);
  }
  return range_query_subspace(lower, upper, opts);
}

RangeResult KdIndex::range_query_subspace(std::span<const double> lower, std::span<const double> upper,
                                          const RangeQueryOptions& opts) const {
  if (lower.size() != subset_.size() || upper.size() != subset_.size()) {
    throw DomainError("subspace bounds must have one entry per subset dimension");
  }
  RangeResult out;
  out.width = width_;
  for (std::size_t j = 0; j < lower.size(); ++j) {
    if (!(lower[j] < upper[j])) return out;
  }

  std::vector<unsigned char> buf;
  const std::size_t rb = record_bytes();
  std::vector<double> record(width_);
  auto scan_leaf = [&](std::size_t leaf) {
    load_leaf(leaf, buf, out.stats);
    for (std::size_t r = 0; r < leaves_[leaf].count; ++r) {
      const unsigned char* p = buf.data() + r * rb;
      std::memcpy(record.data(), p + sizeof(std::uint64_t), width_ * sizeof(double));
      bool inside = true;
      for (std::size_t j = 0; j < lower.size() && inside; ++j) {
        const double v = subset_coord(record, j);
        inside = v > lower[j] && v <= upper[j];
      }
      if (!inside) continue;
      InstanceId id;
      std::memcpy(&id, p, sizeof(id));
      out.ids.push_back(id);
      out.coords.insert(out.coords.end(), record.begin(), record.end());
    }
  };

  if (inner_.empty()) {
    if (opts.max_leaves > 0) scan_leaf(0);
    return out;
  }
  // Left points satisfy x <= split, right points x >= split (equal keys may
  // straddle the split), so both tests are conservative.
  std::vector<std::int32_t> stack{0};
  while (!stack.empty() && out.stats.leaves_visited < opts.max_leaves) {
    const std::int32_t node = stack.back();
    stack.pop_back();
    if (node < 0) {
      scan_leaf(static_cast<std::size_t>(~node));
      continue;
    }
    const InnerNode& in = inner_[static_cast<std::size_t>(node)];
    if (upper[in.split_pos] >= in.split_value) stack.push_back(in.right);
    if (lower[in.split_pos] < in.split_value) stack.push_back(in.left);
  }
  return out;
}

std::vector<Neighbor> KdIndex::knn_query(std::span<const double> q, std::size_t k,
                                         QueryStats* stats) const {
  if (q.size() != subset_.size()) throw DomainError("kNN query must have one entry per subset dimension");
  if (k < 1 || k > n_) {
    throw DomainError("K must be in [1, " + std::to_string(n_) + "], got " + std::to_string(k));
  }
  const std::size_t dims = subset_.size();
  struct Pending {
    double min_d2;
    std::int32_t node;
    std::vector<double> lo, hi;
    bool operator>(const Pending& o) const noexcept { return min_d2 > o.min_d2; }
  };
  auto region_d2 = [&](const std::vector<double>& lo, const std::vector<double>& hi) {
    double s = 0.0;
    for (std::size_t j = 0; j < dims; ++j) {
      const double gap = q[j] < lo[j] ? lo[j] - q[j] : (q[j] > hi[j] ? q[j] - hi[j] : 0.0);
      s += gap * gap;
    }
    return s;
  };

  using Cand = std::pair<double, InstanceId>;  // (squared distance, id), max-heap
  std::priority_queue<Cand> best;
  std::priority_queue<Pending, std::vector<Pending>, std::greater<>> frontier;
  frontier.push({0.0, inner_.empty() ? ~std::int32_t{0} : 0, std::vector<double>(dims, -kInf),
                 std::vector<double>(dims, kInf)});

  QueryStats local;
  std::vector<unsigned char> buf;
  std::vector<double> record(width_);
  const std::size_t rb = record_bytes();
  while (!frontier.empty()) {
    Pending cur = frontier.top();
    frontier.pop();
    if (best.size() == k && cur.min_d2 > best.top().first) break;
    if (cur.node < 0) {
      const auto leaf = static_cast<std::size_t>(~cur.node);
      load_leaf(leaf, buf, local);
      for (std::size_t r = 0; r < leaves_[leaf].count; ++r) {
        const unsigned char* p = buf.data() + r * rb;
        std::memcpy(record.data(), p + sizeof(std::uint64_t), width_ * sizeof(double));
        double d2 = 0.0;
        for (std::size_t j = 0; j < dims; ++j) {
          const double diff = subset_coord(record, j) - q[j];
          d2 += diff * diff;
        }
        InstanceId id;
        std::memcpy(&id, p, sizeof(id));
        const Cand cand{d2, id};
        if (best.size() < k) {
          best.push(cand);
        } else if (cand < best.top()) {
          best.pop();
          best.push(cand);
        }
      }
      continue;
    }
    const InnerNode& in = inner_[static_cast<std::size_t>(cur.node)];
    Pending left{0.0, in.left, cur.lo, cur.hi};
    left.hi[in.split_pos] = std::min(left.hi[in.split_pos], in.split_value);
    left.min_d2 = region_d2(left.lo, left.hi);
    Pending right{0.0, in.right, std::move(cur.lo), std::move(cur.hi)};
    right.lo[in.split_pos] = std::max(right.lo[in.split_pos], in.split_value);
    right.min_d2 = region_d2(right.lo, right.hi);
    frontier.push(std::move(left));
    frontier.push(std::move(right));
  }

  std::vector<Neighbor> out(best.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = {best.top().second, std::sqrt(best.top().first)};
    best.pop();
  }
  if (stats) *stats = local;
  return out;
}

void KdIndex::drop_page_cache() const {
#ifdef POSIX_FADV_DONTNEED
  // Dirty pages of a freshly built index are not dropped; flush them first.
  ::fdatasync(fd_);
  ::posix_fadvise(fd_, 0, 0, POSIX_FADV_DONTNEED);
#endif
}

}  // namespace sbc
