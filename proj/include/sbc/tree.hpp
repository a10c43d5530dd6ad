// Classical top-down decision trees (Gini, exact midpoint thresholds) and
// extraction of the boxes covering positive leaves.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "sbc/core.hpp"

namespace sbc {

/// A tree node. Internal nodes route x left iff x[dim] <= theta.
struct TreeNode {
  enum class Kind : std::uint8_t { Leaf = 0, Internal = 1 };

  Kind kind = Kind::Leaf;
  FeatureIndex dim = 0;
  double theta = 0.0;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  Label label = 0;
  ClassCounts counts;

  bool is_leaf() const noexcept { return kind == Kind::Leaf; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct TreeConfig {
  /// Features sampled per split (mu).
  std::size_t mu = 1;
  std::optional<std::size_t> max_depth;
  std::size_t min_samples_split = 2;
  /// Usable features. Empty means all features of the dataset.
  std::vector<FeatureIndex> feature_pool;
  std::uint64_t rng_seed = 0;
  /// Extremely randomized trees: one uniform random threshold per sampled
  /// feature instead of the exhaustive midpoint search.
  bool extremely_randomized = false;
};

/// Immutable binary tree stored as a flat node array; node 0 is the root.
class DecisionTree {
 public:
  DecisionTree() = default;
  explicit DecisionTree(std::vector<TreeNode> nodes);

  static DecisionTree leaf(Label label, ClassCounts counts = {});

  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  const TreeNode& root() const noexcept { return nodes_.front(); }
  bool is_single_leaf() const noexcept { return nodes_.size() == 1; }
  std::size_t leaf_count() const noexcept;
  std::size_t depth() const noexcept;
  /// Distinct split dimensions used anywhere in the tree, ascending.
  std::vector<FeatureIndex> split_dims() const;

  /// `feature(dim)` returns the coordinate of the routed point in `dim`.
  template <typename FeatureFn>
  Label predict_with(FeatureFn&& feature) const {
    std::uint32_t i = 0;
    while (nodes_[i].kind == TreeNode::Kind::Internal) {
      const TreeNode& n = nodes_[i];
      i = feature(n.dim) <= n.theta ? n.left : n.right;
    }
    return nodes_[i].label;
  }

  Label predict(std::span<const double> x) const {
    return predict_with([x](FeatureIndex dim) { return x[dim]; });
  }

  /// Preorder record stream: leaf = {u8 0, u8 label, u32 n_neg, u32 n_pos},
  /// internal = {u8 1, u32 dim, f64 theta}, followed by left then right subtree.
  void write(std::ostream& os) const;
  static DecisionTree read(std::istream& is);

  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;

 private:
  std::vector<TreeNode> nodes_;
};

/// Majority label of `counts`; ties go to `tie_label`.
Label majority_label(ClassCounts counts, Label tie_label = 0) noexcept;

/// Recursive top-down construction over `rows` of `data` (rows may repeat,
/// e.g. for bootstrap samples). Throws DomainError if `rows` is empty and
/// ConfigError on an invalid config.
DecisionTree top_down_construct(const LabeledDataset& data, std::span<const std::size_t> rows,
                                const TreeConfig& cfg);
DecisionTree top_down_construct(const LabeledDataset& data, const TreeConfig& cfg);

inline Label tree_predict(const DecisionTree& tree, std::span<const double> x) {
  return tree.predict(x);
}

/// One box per positive leaf, built from the root-to-leaf split constraints.
/// Dimensions never split on along the path stay unbounded.
std::vector<Box> positive_leaf_boxes(const DecisionTree& tree, std::size_t d);

}  // namespace sbc
