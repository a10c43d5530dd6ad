#include "sbc/core.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sbc {

namespace {

void validate_common(std::size_t dims, const std::vector<double>& features,
                     const std::vector<InstanceId>& ids) {
  if (dims == 0) throw DomainError("dataset must have at least one feature");
  if (features.size() != ids.size() * dims) {
    throw DomainError("feature matrix size " + std::to_string(features.size()) +
                      " does not match " + std::to_string(ids.size()) + " rows x " +
                      std::to_string(dims) + " columns");
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!std::isfinite(features[i])) {
      throw DomainError("non-finite feature value at row " + std::to_string(i / dims) +
                        ", column " + std::to_string(i % dims));
    }
  }
  std::vector<InstanceId> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  auto dup = std::adjacent_find(sorted.begin(), sorted.end());
  if (dup != sorted.end()) throw DomainError("duplicate instance id " + std::to_string(*dup));
}

}  // namespace

LabeledDataset::LabeledDataset(std::size_t dims, std::vector<double> features,
                               std::vector<Label> labels, std::vector<InstanceId> ids)
    : dims_(dims), features_(std::move(features)), labels_(std::move(labels)), ids_(std::move(ids)) {
  validate_common(dims_, features_, ids_);
  if (labels_.size() != ids_.size()) {
    throw DomainError("label count " + std::to_string(labels_.size()) + " does not match " +
                      std::to_string(ids_.size()) + " rows");
  }
  for (Label y : labels_) {
    if (y > 1) throw DomainError("labels must be 0 or 1, got " + std::to_string(int{y}));
  }
}

LabeledDataset LabeledDataset::unlabeled(std::size_t dims, std::vector<double> features,
                                         std::vector<InstanceId> ids) {
  validate_common(dims, features, ids);
  LabeledDataset out;
  out.dims_ = dims;
  out.features_ = std::move(features);
  out.ids_ = std::move(ids);
  return out;
}

std::size_t LabeledDataset::count_label(Label y) const noexcept {
  return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), y));
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
  LabeledDataset out;
  out.dims_ = dims_;
  out.features_.reserve(rows.size() * dims_);
  out.ids_.reserve(rows.size());
  for (std::size_t r : rows) {
    auto x = row(r);
    out.features_.insert(out.features_.end(), x.begin(), x.end());
    out.ids_.push_back(ids_[r]);
    if (!labels_.empty()) out.labels_.push_back(labels_[r]);
  }
  return out;
}

FeatureSubset::FeatureSubset(std::vector<FeatureIndex> dims, std::size_t d) : dims_(std::move(dims)) {
  if (dims_.empty()) throw ConfigError("feature subset must not be empty");
  if (dims_.size() > d) throw ConfigError("feature subset larger than feature count");
  std::vector<FeatureIndex> sorted = dims_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("feature subset " + to_string() + " has duplicate indices");
  }
  if (sorted.back() >= d) {
    throw ConfigError("feature index " + std::to_string(sorted.back()) + " out of range for d=" +
                      std::to_string(d));
  }
}

bool FeatureSubset::contains(FeatureIndex dim) const noexcept {
  return std::find(dims_.begin(), dims_.end(), dim) != dims_.end();
}

std::size_t FeatureSubset::position_of(FeatureIndex dim) const noexcept {
  return static_cast<std::size_t>(std::find(dims_.begin(), dims_.end(), dim) - dims_.begin());
}

std::string FeatureSubset::to_string() const {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << '}';
  return os.str();
}

Box::Box(std::size_t d) : lower_(d, -kInf), upper_(d, kInf) {}

Box::Box(std::vector<double> lower, std::vector<double> upper)
    : lower_(std::move(lower)), upper_(std::move(upper)) {
  if (lower_.size() != upper_.size()) throw DomainError("box bound vectors differ in length");
  for (std::size_t i = 0; i < lower_.size(); ++i) set_bounds(i, lower_[i], upper_[i]);
}

void Box::set_bounds(std::size_t i, double lower, double upper) {
  if (std::isnan(lower) || std::isnan(upper)) throw DomainError("box bound is NaN");
  if (lower > upper) {
    throw DomainError("box lower bound exceeds upper bound in dimension " + std::to_string(i));
  }
  lower_[i] = lower;
  upper_[i] = upper;
}

std::size_t Box::bounded_dims() const noexcept {
  std::size_t n = 0;
  for (std::size_t i = 0; i < lower_.size(); ++i) n += is_bounded(i) ? 1 : 0;
  return n;
}

bool Box::is_empty() const noexcept {
  for (std::size_t i = 0; i < lower_.size(); ++i) {
    if (lower_[i] == upper_[i]) return true;
  }
  return false;
}

bool box_contains(const Box& box, std::span<const double> point) {
  if (point.size() != box.dims()) {
    throw DomainError("point has " + std::to_string(point.size()) + " dimensions, box has " +
                      std::to_string(box.dims()));
  }
  return box.contains_unchecked(point);
}

ClassCounts ClassCounts::of(std::span<const Label> labels) noexcept {
  ClassCounts c;
  for (Label y : labels) c.add(y);
  return c;
}

double gini(ClassCounts counts) {
  if (counts.total() == 0) throw DomainError("gini impurity of an empty set");
  const double n = static_cast<double>(counts.total());
  const double p1 = static_cast<double>(counts.pos) / n;
  const double p0 = static_cast<double>(counts.neg) / n;
  return p0 * (1.0 - p0) + p1 * (1.0 - p1);
}

double gini(std::span<const Label> labels) { return gini(ClassCounts::of(labels)); }

GainValue split_gain(ClassCounts inside, ClassCounts outside) {
  const ClassCounts all = inside + outside;
  if (all.total() == 0) throw DomainError("split gain of an empty set");
  const double n = static_cast<double>(all.total());
  double weighted = 0.0;
  if (inside.total() > 0) weighted += static_cast<double>(inside.total()) / n * gini(inside);
  if (outside.total() > 0) weighted += static_cast<double>(outside.total()) / n * gini(outside);
  // Gini is concave, so the exact gain is never negative; clamp rounding noise.
  return std::max(0.0, gini(all) - weighted);
}

GainValue split_gain(std::span<const Label> labels_in, std::span<const Label> labels_out) {
  return split_gain(ClassCounts::of(labels_in), ClassCounts::of(labels_out));
}

GainValue axis_split_gain(const LabeledDataset& data, std::span<const std::size_t> rows,
                          FeatureIndex dim, double theta) {
  if (rows.empty()) throw DomainError("axis split gain of an empty set");
  ClassCounts left, right;
  for (std::size_t r : rows) {
    (data.at(r, dim) <= theta ? left : right).add(data.label(r));
  }
  return split_gain(left, right);
}

GainValue axis_split_gain(const LabeledDataset& data, FeatureIndex dim, double theta) {
  std::vector<std::size_t> rows(data.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return axis_split_gain(data, rows, dim, theta);
}

}  // namespace sbc
