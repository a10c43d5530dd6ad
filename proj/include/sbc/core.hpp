// Domain types shared by every module: labeled point sets, boxes with
// extended-real bounds, feature subsets, and Gini impurity/gain.
#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbc {

using Label = std::uint8_t;
using InstanceId = std::uint64_t;
using FeatureIndex = std::uint32_t;
using GainValue = double;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StorageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major n x d feature matrix with binary labels and unique ids.
///
/// Catalogs carry no labels; in that case `labels()` is empty and
/// `has_labels()` is false. Everything else requires labels for every row.
class LabeledDataset {
 public:
  LabeledDataset() = default;

  /// Validates shape, finiteness, binary labels and id uniqueness.
  /// Throws DomainError on any violation.
  LabeledDataset(std::size_t dims, std::vector<double> features, std::vector<Label> labels,
                 std::vector<InstanceId> ids);

  static LabeledDataset unlabeled(std::size_t dims, std::vector<double> features,
                                  std::vector<InstanceId> ids);

  std::size_t rows() const noexcept { return ids_.size(); }
  std::size_t dims() const noexcept { return dims_; }
  bool empty() const noexcept { return ids_.empty(); }
  bool has_labels() const noexcept { return !labels_.empty() || ids_.empty(); }

  std::span<const double> row(std::size_t i) const noexcept {
    return {features_.data() + i * dims_, dims_};
  }
  double at(std::size_t i, std::size_t dim) const noexcept { return features_[i * dims_ + dim]; }
  Label label(std::size_t i) const noexcept { return labels_[i]; }
  InstanceId id(std::size_t i) const noexcept { return ids_[i]; }

  std::span<const double> features() const noexcept { return features_; }
  std::span<const Label> labels() const noexcept { return labels_; }
  std::span<const InstanceId> ids() const noexcept { return ids_; }

  std::size_t count_label(Label y) const noexcept;

  /// Copy of the given rows, in the given order.
  LabeledDataset subset(std::span<const std::size_t> rows) const;

 private:
  std::size_t dims_ = 0;
  std::vector<double> features_;
  std::vector<Label> labels_;
  std::vector<InstanceId> ids_;
};

/// Ordered list of D distinct feature indices in [0, d).
class FeatureSubset {
 public:
  FeatureSubset() = default;
  /// Throws ConfigError if dims is empty, has duplicates, or any index >= d.
  FeatureSubset(std::vector<FeatureIndex> dims, std::size_t d);

  std::size_t size() const noexcept { return dims_.size(); }
  std::span<const FeatureIndex> dims() const noexcept { return dims_; }
  FeatureIndex operator[](std::size_t i) const noexcept { return dims_[i]; }
  bool contains(FeatureIndex dim) const noexcept;
  /// Position of `dim` within the subset, or size() if absent.
  std::size_t position_of(FeatureIndex dim) const noexcept;

  std::string to_string() const;

  friend bool operator==(const FeatureSubset&, const FeatureSubset&) = default;

 private:
  std::vector<FeatureIndex> dims_;
};

/// Axis-aligned box (l_1, r_1] x ... x (l_d, r_d] over the extended reals.
class Box {
 public:
  Box() = default;
  /// Fully unbounded box in d dimensions.
  explicit Box(std::size_t d);
  /// Throws DomainError if sizes differ, a bound is NaN, or lower > upper.
  Box(std::vector<double> lower, std::vector<double> upper);

  std::size_t dims() const noexcept { return lower_.size(); }
  double lower(std::size_t i) const noexcept { return lower_[i]; }
  double upper(std::size_t i) const noexcept { return upper_[i]; }
  std::span<const double> lowers() const noexcept { return lower_; }
  std::span<const double> uppers() const noexcept { return upper_; }

  void set_bounds(std::size_t i, double lower, double upper);
  void set_lower(std::size_t i, double lower) { set_bounds(i, lower, upper_[i]); }
  void set_upper(std::size_t i, double upper) { set_bounds(i, lower_[i], upper); }
  void unbound(std::size_t i) noexcept {
    lower_[i] = -kInf;
    upper_[i] = kInf;
  }

  bool is_bounded(std::size_t i) const noexcept { return lower_[i] > -kInf || upper_[i] < kInf; }
  /// n_b: number of (half-)bounded dimensions.
  std::size_t bounded_dims() const noexcept;
  /// True if some dimension is an empty slab (lower == upper).
  bool is_empty() const noexcept;

  /// Membership without a size check; `x` must have dims() entries.
  bool contains_unchecked(std::span<const double> x) const noexcept {
    for (std::size_t i = 0; i < lower_.size(); ++i) {
      if (!(x[i] > lower_[i] && x[i] <= upper_[i])) return false;
    }
    return true;
  }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  std::vector<double> lower_;
  std::vector<double> upper_;
};

/// Throws DomainError on dimension mismatch.
bool box_contains(const Box& box, std::span<const double> point);

struct ClassCounts {
  std::size_t neg = 0;
  std::size_t pos = 0;

  std::size_t total() const noexcept { return neg + pos; }
  void add(Label y) noexcept { y ? ++pos : ++neg; }
  void remove(Label y) noexcept { y ? --pos : --neg; }
  bool pure() const noexcept { return neg == 0 || pos == 0; }

  static ClassCounts of(std::span<const Label> labels) noexcept;

  friend ClassCounts operator+(ClassCounts a, ClassCounts b) noexcept {
    return {a.neg + b.neg, a.pos + b.pos};
  }
  friend ClassCounts operator-(ClassCounts a, ClassCounts b) noexcept {
    return {a.neg - b.neg, a.pos - b.pos};
  }
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

/// Gini impurity sum_c p_c (1 - p_c). Throws DomainError on an empty set.
double gini(std::span<const Label> labels);
double gini(ClassCounts counts);

/// Q(S) - |I|/|S| Q(I) - |O|/|S| Q(O); an empty part has weight zero.
/// Throws DomainError if both parts are empty.
GainValue split_gain(ClassCounts inside, ClassCounts outside);
GainValue split_gain(std::span<const Label> labels_in, std::span<const Label> labels_out);

/// Gain of the axis split {x_dim <= theta} / {x_dim > theta} over the
/// given rows of `data`. Throws DomainError if `rows` is empty.
GainValue axis_split_gain(const LabeledDataset& data, std::span<const std::size_t> rows,
                          FeatureIndex dim, double theta);
GainValue axis_split_gain(const LabeledDataset& data, FeatureIndex dim, double theta);

}  // namespace sbc
