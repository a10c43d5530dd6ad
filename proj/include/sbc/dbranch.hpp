// Bottom-up construction of decision branches: boxes grown around single
// positive instances inside low-dimensional feature subsets, each paired
// with a small top-down subtree over the instances it captured.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbc/core.hpp"
#include "sbc/tree.hpp"

namespace sbc {

/// B: branch is a single leaf. Ts: branch tree uses the box's D features.
/// Ta: branch tree uses all d features.
enum class Variant : std::uint8_t { B = 0, Ts = 1, Ta = 2 };

std::string_view to_string(Variant v) noexcept;
/// Accepts "B", "Ts", "Ta" (case-insensitive). Throws ConfigError otherwise.
Variant parse_variant(std::string_view name);

struct DBranchConfig {
  std::vector<FeatureSubset> subsets;
  /// Subsets tried per box.
  std::size_t p = 1;
  /// Features tried per split of the branch trees.
  std::size_t mu = 1;
  Variant variant = Variant::B;
  /// Boundary candidates swept per side and dimension.
  std::size_t p_m = 20;
  std::uint64_t rng_seed = 0;

  std::size_t subset_size() const noexcept { return subsets.empty() ? 0 : subsets.front().size(); }
  /// Throws ConfigError when p is outside [1, k], subsets differ in size,
  /// reference features >= d, or p_m / mu is zero.
  void validate(std::size_t d) const;
};

struct DecisionBranch {
  Box box;
  FeatureSubset subset;
  DecisionTree branch;

  friend bool operator==(const DecisionBranch&, const DecisionBranch&) = default;
};

class DecisionBranchModel {
 public:
  DecisionBranchModel() = default;
  DecisionBranchModel(std::size_t d, Variant variant, std::vector<DecisionBranch> branches)
      : d_(d), variant_(variant), branches_(std::move(branches)) {}

  std::size_t dims() const noexcept { return d_; }
  Variant variant() const noexcept { return variant_; }
  const std::vector<DecisionBranch>& branches() const noexcept { return branches_; }
  std::size_t size() const noexcept { return branches_.size(); }

  /// 1 iff some branch box contains x and that branch's tree predicts 1.
  Label predict(std::span<const double> x) const;

  friend bool operator==(const DecisionBranchModel&, const DecisionBranchModel&) = default;

 private:
  std::size_t d_ = 0;
  Variant variant_ = Variant::B;
  std::vector<DecisionBranch> branches_;
};

class DBranchEnsemble {
 public:
  DBranchEnsemble() = default;
  explicit DBranchEnsemble(std::vector<DecisionBranchModel> models);

  const std::vector<DecisionBranchModel>& models() const noexcept { return models_; }
  std::size_t size() const noexcept { return models_.size(); }
  std::size_t dims() const noexcept { return models_.front().dims(); }
  /// Majority vote: 1 iff strictly more than M/2 members predict 1.
  Label predict(std::span<const double> x) const;

  friend bool operator==(const DBranchEnsemble&, const DBranchEnsemble&) = default;

 private:
  std::vector<DecisionBranchModel> models_;
};

/// Seed of ensemble member `index`, derived from the ensemble seed.
std::uint64_t member_seed(std::uint64_t seed, std::size_t index) noexcept;

/// Result of one greedy box search.
struct GainBox {
  Box box;
  GainValue gain = 0.0;
};

/// A point set S given as row indices into a labeled dataset.
struct PointSet {
  const LabeledDataset& data;
  std::span<const std::size_t> rows;
};

/// Box bounded only on `order` that contains `x_prime` and every point of S
/// equal to it on those dimensions, and no other point of S. Each bound is
/// drawn uniformly between x_prime and its nearest differing neighbor among
/// the points still inside the partially built box.
Box initial_empty_box(std::span<const double> x_prime, PointSet s,
                      std::span<const FeatureIndex> order, std::mt19937_64& rng);

/// Re-places both boundaries of `box` along `dim`, left then right. Each
/// side is swept outward from x' over at most `p_m` points of S-bar (the
/// points inside the box with `dim` ignored) and the bound goes to the
/// gain-maximizing position. The current bound is also a candidate and
/// wins ties, so gain never drops.
Box expand_box(std::span<const double> x_prime, PointSet s, Box box, FeatureIndex dim,
               std::size_t p_m);

/// Random permutation of the subset, initial empty box, one expansion per
/// dimension in that order, then the gain of the inside/outside partition.
GainBox greedy_max_gain_box(PointSet s, std::span<const double> x_prime,
                            const FeatureSubset& subset, std::size_t p_m, std::mt19937_64& rng);

/// Gain of splitting S into the points inside `box` and the rest.
GainValue box_gain(PointSet s, const Box& box);

struct RemovalResult {
  std::vector<std::size_t> kept;     ///< rows outside the box
  std::vector<std::size_t> removed;  ///< rows inside the box
};

RemovalResult remove_instances(PointSet s, const Box& box);

/// Throws DomainError if T has no positive instance or contains identical
/// feature rows with different labels; ConfigError on an invalid config.
DecisionBranchModel fit_decision_branches(const LabeledDataset& t, const DBranchConfig& cfg);

inline Label model_predict(const DecisionBranchModel& model, std::span<const double> x) {
  return model.predict(x);
}

/// Fits `members` models with seeds member_seed(cfg.rng_seed, i), using up to
/// `threads` worker threads. The result does not depend on `threads`.
DBranchEnsemble ensemble_fit(const LabeledDataset& t, const DBranchConfig& cfg, std::size_t members,
                             std::size_t threads = 1);

inline Label ensemble_predict(const DBranchEnsemble& ens, std::span<const double> x) {
  return ens.predict(x);
}

/// Model file header written by write_models.
struct ModelFileHeader {
  std::uint32_t d = 0;
  std::uint32_t subset_size = 0;
  std::uint32_t k = 0;
  Variant variant = Variant::B;
  std::uint64_t seed = 0;
};

/// Versioned binary model file ("DBM1"): header, member count, then per
/// member its branches (subset dims, box bounds as f64, preorder tree).
void write_models(std::ostream& os, const ModelFileHeader& header, const DBranchEnsemble& ens);
DBranchEnsemble read_models(std::istream& is, ModelFileHeader* header = nullptr);

void save_models(const std::string& path, const ModelFileHeader& header, const DBranchEnsemble& ens);
DBranchEnsemble load_models(const std::string& path, ModelFileHeader* header = nullptr);

}  // namespace sbc
