#include "sbc/tree.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>

#include "sbc/binio.hpp"

namespace sbc {

DecisionTree::DecisionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {
  if (nodes_.empty()) throw DomainError("decision tree needs at least one node");
}

DecisionTree DecisionTree::leaf(Label label, ClassCounts counts) {
  TreeNode n;
  n.label = label;
  n.counts = counts;
  return DecisionTree({n});
}

std::size_t DecisionTree::leaf_count() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

std::size_t DecisionTree::depth() const noexcept {
  std::size_t best = 0;
  std::vector<std::pair<std::uint32_t, std::size_t>> stack{{0, 0}};
  while (!stack.empty()) {
    auto [i, depth] = stack.back();
    stack.pop_back();
    best = std::max(best, depth);
    if (!nodes_[i].is_leaf()) {
      stack.emplace_back(nodes_[i].left, depth + 1);
      stack.emplace_back(nodes_[i].right, depth + 1);
    }
  }
  return best;
}

std::vector<FeatureIndex> DecisionTree::split_dims() const {
  std::vector<FeatureIndex> dims;
  for (const TreeNode& n : nodes_) {
    if (!n.is_leaf()) dims.push_back(n.dim);
  }
  std::sort(dims.begin(), dims.end());
  dims.erase(std::unique(dims.begin(), dims.end()), dims.end());
  return dims;
}

void DecisionTree::write(std::ostream& os) const {
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(nodes_.size()));
  // Nodes are stored in preorder (children follow their parent, left first).
  for (const TreeNode& n : nodes_) {
    binio::write<std::uint8_t>(os, static_cast<std::uint8_t>(n.kind));
    if (n.is_leaf()) {
      binio::write<std::uint8_t>(os, n.label);
      binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(n.counts.neg));
      binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(n.counts.pos));
    } else {
      binio::write<std::uint32_t>(os, n.dim);
      binio::write<double>(os, n.theta);
    }
  }
}

namespace {

std::uint32_t read_subtree(std::istream& is, std::vector<TreeNode>& nodes, std::size_t remaining) {
  if (nodes.size() >= remaining) throw StorageError("tree record stream longer than declared");
  const auto kind = binio::read<std::uint8_t>(is);
  const auto idx = static_cast<std::uint32_t>(nodes.size());
  nodes.emplace_back();
  if (kind == 0) {
    nodes[idx].kind = TreeNode::Kind::Leaf;
    nodes[idx].label = binio::read<std::uint8_t>(is);
    nodes[idx].counts.neg = binio::read<std::uint32_t>(is);
    nodes[idx].counts.pos = binio::read<std::uint32_t>(is);
    if (nodes[idx].label > 1) throw StorageError("tree leaf label out of range");
  } else if (kind == 1) {
    nodes[idx].kind = TreeNode::Kind::Internal;
    nodes[idx].dim = binio::read<std::uint32_t>(is);
    nodes[idx].theta = binio::read<double>(is);
    const std::uint32_t left = read_subtree(is, nodes, remaining);
    const std::uint32_t right = read_subtree(is, nodes, remaining);
    nodes[idx].left = left;
    nodes[idx].right = right;
    // Internal counts are not stored; they are the sum over the children.
    nodes[idx].counts = nodes[left].counts + nodes[right].counts;
    nodes[idx].label = majority_label(nodes[idx].counts, 0);
  } else {
    throw StorageError("unknown tree node tag " + std::to_string(kind));
  }
  return idx;
}

}  // namespace

DecisionTree DecisionTree::read(std::istream& is) {
  const auto count = binio::read<std::uint32_t>(is);
  if (count == 0) throw StorageError("empty tree record");
  std::vector<TreeNode> nodes;
  nodes.reserve(count);
  read_subtree(is, nodes, count);
  if (nodes.size() != count) throw StorageError("tree record stream shorter than declared");
  return DecisionTree(std::move(nodes));
}

Label majority_label(ClassCounts counts, Label tie_label) noexcept {
  if (counts.pos == counts.neg) return tie_label;
  return counts.pos > counts.neg ? 1 : 0;
}

namespace {

struct Split {
  GainValue gain = -1.0;
  FeatureIndex dim = 0;
  double theta = 0.0;

  bool worse_than(GainValue g, FeatureIndex d, double t) const noexcept {
    if (g != gain) return g > gain;
    if (d != dim) return d < dim;
    return t < theta;
  }
};

// Midpoint that routes `lo` left and `hi` right under x <= theta.
double midpoint(double lo, double hi) noexcept {
  const double mid = lo + (hi - lo) / 2.0;
  return mid < hi ? mid : lo;
}

class Builder {
 public:
  Builder(const LabeledDataset& data, const TreeConfig& cfg, std::vector<FeatureIndex> pool)
      : data_(data), cfg_(cfg), pool_(std::move(pool)), rng_(cfg.rng_seed) {}

  std::vector<TreeNode> run(std::vector<std::size_t> rows) {
    build(rows, 0);
    return std::move(nodes_);
  }

 private:
  std::uint32_t build(std::vector<std::size_t>& rows, std::size_t depth) {
    ClassCounts counts;
    for (std::size_t r : rows) counts.add(data_.label(r));

    const auto idx = static_cast<std::uint32_t>(nodes_.size());
    TreeNode leaf;
    leaf.label = majority_label(counts, 0);
    leaf.counts = counts;
    nodes_.push_back(leaf);

    if (counts.pure()) return idx;
    if (cfg_.max_depth && depth >= *cfg_.max_depth) return idx;
    if (rows.size() < cfg_.min_samples_split) return idx;

    const Split split = best_split(rows, counts);
    if (split.gain <= 0.0) return idx;

    std::vector<std::size_t> left, right;
    for (std::size_t r : rows) {
      (data_.at(r, split.dim) <= split.theta ? left : right).push_back(r);
    }
    if (left.empty() || right.empty()) return idx;
    rows.clear();
    rows.shrink_to_fit();

    nodes_[idx].kind = TreeNode::Kind::Internal;
    nodes_[idx].dim = split.dim;
    nodes_[idx].theta = split.theta;
    const std::uint32_t l = build(left, depth + 1);
    const std::uint32_t r = build(right, depth + 1);
    nodes_[idx].left = l;
    nodes_[idx].right = r;
    return idx;
  }

  std::vector<FeatureIndex> sample_features() {
    std::vector<FeatureIndex> pool = pool_;
    const std::size_t mu = std::min(cfg_.mu, pool.size());
    for (std::size_t i = 0; i < mu; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng_)]);
    }
    pool.resize(mu);
    return pool;
  }

  Split best_split(const std::vector<std::size_t>& rows, ClassCounts total) {
    Split best;
    for (FeatureIndex dim : sample_features()) {
      if (cfg_.extremely_randomized) {
        random_split(rows, total, dim, best);
      } else {
        exact_split(rows, total, dim, best);
      }
    }
    return best;
  }

  void exact_split(const std::vector<std::size_t>& rows, ClassCounts total, FeatureIndex dim,
                   Split& best) {
    scratch_.clear();
    for (std::size_t r : rows) scratch_.emplace_back(data_.at(r, dim), data_.label(r));
    std::sort(scratch_.begin(), scratch_.end());
    ClassCounts left;
    for (std::size_t i = 0; i + 1 < scratch_.size(); ++i) {
      left.add(scratch_[i].second);
      if (scratch_[i].first == scratch_[i + 1].first) continue;
      const double theta = midpoint(scratch_[i].first, scratch_[i + 1].first);
      const GainValue g = split_gain(left, total - left);
      if (best.worse_than(g, dim, theta)) best = {g, dim, theta};
    }
  }

  void random_split(const std::vector<std::size_t>& rows, ClassCounts total, FeatureIndex dim,
                    Split& best) {
    double lo = kInf, hi = -kInf;
    for (std::size_t r : rows) {
      lo = std::min(lo, data_.at(r, dim));
      hi = std::max(hi, data_.at(r, dim));
    }
    if (!(lo < hi)) return;
    std::uniform_real_distribution<double> draw(lo, hi);
    double theta = draw(rng_);
    if (!(theta < hi)) theta = lo;
    ClassCounts left;
    for (std::size_t r : rows) {
      if (data_.at(r, dim) <= theta) left.add(data_.label(r));
    }
    const GainValue g = split_gain(left, total - left);
    if (best.worse_than(g, dim, theta)) best = {g, dim, theta};
  }

  const LabeledDataset& data_;
  const TreeConfig& cfg_;
  std::vector<FeatureIndex> pool_;
  std::mt19937_64 rng_;
  std::vector<TreeNode> nodes_;
  std::vector<std::pair<double, Label>> scratch_;
};

std::vector<FeatureIndex> resolve_pool(const TreeConfig& cfg, std::size_t d) {
  std::vector<FeatureIndex> pool = cfg.feature_pool;
  if (pool.empty()) {
    pool.resize(d);
    std::iota(pool.begin(), pool.end(), FeatureIndex{0});
  }
  if (cfg.min_samples_split < 1) throw ConfigError("min_samples_split must be at least 1");
  for (FeatureIndex f : pool) {
    if (f >= d) throw ConfigError("feature pool index " + std::to_string(f) + " out of range");
  }
  if (cfg.mu < 1 || cfg.mu > pool.size()) {
    throw ConfigError("mu must be in [1, " + std::to_string(pool.size()) + "], got " +
                      std::to_string(cfg.mu));
  }
  return pool;
}

}  // namespace

DecisionTree top_down_construct(const LabeledDataset& data, std::span<const std::size_t> rows,
                                const TreeConfig& cfg) {
  if (rows.empty()) throw DomainError("cannot grow a tree on an empty set");
  if (!data.has_labels()) throw DomainError("tree construction needs labels");
  Builder builder(data, cfg, resolve_pool(cfg, data.dims()));
  return DecisionTree(builder.run({rows.begin(), rows.end()}));
}

DecisionTree top_down_construct(const LabeledDataset& data, const TreeConfig& cfg) {
  std::vector<std::size_t> rows(data.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return top_down_construct(data, rows, cfg);
}

std::vector<Box> positive_leaf_boxes(const DecisionTree& tree, std::size_t d) {
  std::vector<Box> boxes;
  struct Frame {
    std::uint32_t node;
    std::vector<double> lower, upper;
  };
  std::vector<Frame> stack;
  stack.push_back({0, std::vector<double>(d, -kInf), std::vector<double>(d, kInf)});
  while (!stack.empty()) {
    Frame f = std::move(stack.back());
    stack.pop_back();
    const TreeNode& n = tree.nodes()[f.node];
    if (n.is_leaf()) {
      if (n.label == 1) boxes.emplace_back(std::move(f.lower), std::move(f.upper));
      continue;
    }
    Frame right{n.right, f.lower, f.upper};
    right.lower[n.dim] = std::max(right.lower[n.dim], n.theta);
    if (right.lower[n.dim] > right.upper[n.dim]) right.lower[n.dim] = right.upper[n.dim];
    Frame left{n.left, std::move(f.lower), std::move(f.upper)};
    left.upper[n.dim] = std::min(left.upper[n.dim], n.theta);
    if (left.upper[n.dim] < left.lower[n.dim]) left.upper[n.dim] = left.lower[n.dim];
    // Right pushed first so boxes come out in left-to-right leaf order.
    stack.push_back(std::move(right));
    stack.push_back(std::move(left));
  }
  return boxes;
}

}  // namespace sbc
