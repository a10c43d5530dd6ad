#include "sbc/dbranch.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <thread>

#include "sbc/binio.hpp"

namespace sbc {

std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::B: return "B";
    case Variant::Ts: return "Ts";
    case Variant::Ta: return "Ta";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  std::string lower;
  for (char c : name) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "b") return Variant::B;
  if (lower == "ts") return Variant::Ts;
  if (lower == "ta") return Variant::Ta;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected B, Ts or Ta)");
}

void DBranchConfig::validate(std::size_t d) const {
  if (subsets.empty()) throw ConfigError("at least one feature subset is required");
  if (p < 1 || p > subsets.size()) {
    throw ConfigError("p must be in [1, k=" + std::to_string(subsets.size()) + "], got " +
                      std::to_string(p));
  }
  if (p_m < 1) throw ConfigError("p_m must be at least 1");
  if (mu < 1) throw ConfigError("mu must be at least 1");
  const std::size_t size = subsets.front().size();
  for (const FeatureSubset& f : subsets) {
    if (f.size() != size) throw ConfigError("all feature subsets must have the same size");
    for (FeatureIndex dim : f.dims()) {
      if (dim >= d) throw ConfigError("feature subset " + f.to_string() + " exceeds d");
    }
  }
}

Label DecisionBranchModel::predict(std::span<const double> x) const {
  for (const DecisionBranch& b : branches_) {
    if (b.box.contains_unchecked(x) && b.branch.predict(x) == 1) return 1;
  }
  return 0;
}

DBranchEnsemble::DBranchEnsemble(std::vector<DecisionBranchModel> models) : models_(std::move(models)) {
  if (models_.empty()) throw ConfigError("an ensemble needs at least one model");
}

Label DBranchEnsemble::predict(std::span<const double> x) const {
  std::size_t votes = 0;
  for (const DecisionBranchModel& m : models_) votes += m.predict(x);
  return 2 * votes > models_.size() ? 1 : 0;
}

std::uint64_t member_seed(std::uint64_t seed, std::size_t index) noexcept {
  // splitmix64 over the member index, so neighbouring seeds decorrelate.
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

// Draws from the open interval (lo, hi). If no double lies strictly between
// them, returns `fallback`.
double draw_open(double lo, double hi, double fallback, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (int attempt = 0; attempt < 16; ++attempt) {
    const double v = dist(rng);
    if (v > lo && v < hi) return v;
  }
  const double mid = lo + (hi - lo) / 2.0;
  return (mid > lo && mid < hi) ? mid : fallback;
}

bool inside_ignoring(const Box& box, std::span<const double> x, FeatureIndex skip) noexcept {
  for (std::size_t i = 0; i < box.dims(); ++i) {
    if (i == skip) continue;
    if (!(x[i] > box.lower(i) && x[i] <= box.upper(i))) return false;
  }
  return true;
}

struct Partition {
  ClassCounts total;
  ClassCounts inside;
};

Partition count_partition(PointSet s, const Box& box) {
  Partition p;
  for (std::size_t r : s.rows) {
    const Label y = s.data.label(r);
    p.total.add(y);
    if (box.contains_unchecked(s.data.row(r))) p.inside.add(y);
  }
  return p;
}

// One side of an expansion: the points of S-bar beyond x' on that side,
// ordered by increasing distance to x'.
struct SideSweep {
  std::vector<std::pair<double, Label>> points;
  std::size_t currently_inside = 0;
};

// Picks how many of the ordered side points to place inside. `base` holds
// the points that stay inside whatever the bound (x', its ties in this
// dimension, the other side). Candidates are every count that ends on a
// change of coordinate among the p_m nearest points, plus the current
// bound, which wins ties so the gain never drops.
std::size_t best_absorb_count(const SideSweep& side, ClassCounts total, ClassCounts base,
                              std::size_t p_m) {
  const auto& pts = side.points;
  ClassCounts cur = base;
  for (std::size_t j = 0; j < side.currently_inside; ++j) cur.add(pts[j].second);
  std::size_t best = side.currently_inside;
  GainValue best_gain = split_gain(cur, total - cur);

  cur = base;
  const std::size_t limit = std::min(pts.size(), p_m);
  for (std::size_t absorbed = 0; absorbed <= limit; ++absorbed) {
    if (absorbed > 0) cur.add(pts[absorbed - 1].second);
    const bool cut = absorbed == 0 || absorbed == pts.size() ||
                     pts[absorbed].first != pts[absorbed - 1].first;
    if (!cut || absorbed == side.currently_inside) continue;
    const GainValue g = split_gain(cur, total - cur);
    if (g > best_gain) {
      best_gain = g;
      best = absorbed;
    }
  }
  return best;
}

}  // namespace

Box initial_empty_box(std::span<const double> x_prime, PointSet s,
                      std::span<const FeatureIndex> order, std::mt19937_64& rng) {
  Box box(x_prime.size());
  std::vector<std::size_t> active(s.rows.begin(), s.rows.end());
  for (FeatureIndex dim : order) {
    const double xv = x_prime[dim];
    double below = -kInf, above = kInf;
    for (std::size_t r : active) {
      const double v = s.data.at(r, dim);
      if (v < xv) below = std::max(below, v);
      if (v > xv) above = std::min(above, v);
    }
    // Lower bound l needs below <= l < xv; upper bound r needs xv <= r < above.
    const double lower = below == -kInf ? -kInf : draw_open(below, xv, below, rng);
    const double upper = above == kInf ? kInf : draw_open(xv, above, xv, rng);
    box.set_bounds(dim, lower, upper);
    std::erase_if(active, [&](std::size_t r) {
      const double v = s.data.at(r, dim);
      return !(v > lower && v <= upper);
    });
  }
  return box;
}

Box expand_box(std::span<const double> x_prime, PointSet s, Box box, FeatureIndex dim,
               std::size_t p_m) {
  const double xv = x_prime[dim];

  for (int pass = 0; pass < 2; ++pass) {
    const bool left = pass == 0;
    SideSweep side;
    ClassCounts total, base;
    for (std::size_t r : s.rows) {
      const auto x = s.data.row(r);
      const Label y = s.data.label(r);
      total.add(y);
      if (!inside_ignoring(box, x, dim)) continue;
      const double v = x[dim];
      if (left ? v < xv : v > xv) {
        side.points.emplace_back(v, y);
        if (v > box.lower(dim) && v <= box.upper(dim)) ++side.currently_inside;
      } else if (v > box.lower(dim) && v <= box.upper(dim)) {
        base.add(y);
      }
    }
    if (left) {
      std::sort(side.points.begin(), side.points.end(),
                [](const auto& a, const auto& b) { return a.first > b.first; });
    } else {
      std::sort(side.points.begin(), side.points.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
    }
    // Points inside the current bound form a prefix of the ordered side.
    const std::size_t absorb = best_absorb_count(side, total, base, p_m);
    if (absorb == side.currently_inside) continue;
    const auto& pts = side.points;

    double bound;
    if (absorb == pts.size()) {
      bound = left ? -kInf : kInf;
    } else {
      const double in_v = absorb == 0 ? xv : pts[absorb - 1].first;
      const double out_v = pts[absorb].first;
      const double mid = out_v + (in_v - out_v) / 2.0;
      if (left) {
        // out_v <= l < in_v
        bound = (mid >= out_v && mid < in_v) ? mid : out_v;
      } else {
        // in_v <= r < out_v
        bound = (mid >= in_v && mid < out_v) ? mid : in_v;
      }
    }
    if (left) {
      box.set_lower(dim, bound);
    } else {
      box.set_upper(dim, bound);
    }
  }
  return box;
}

GainValue box_gain(PointSet s, const Box& box) {
  const Partition p = count_partition(s, box);
  return split_gain(p.inside, p.total - p.inside);
}

GainBox greedy_max_gain_box(PointSet s, std::span<const double> x_prime,
                            const FeatureSubset& subset, std::size_t p_m, std::mt19937_64& rng) {
  std::vector<FeatureIndex> order(subset.dims().begin(), subset.dims().end());
  std::shuffle(order.begin(), order.end(), rng);
  Box box = initial_empty_box(x_prime, s, order, rng);
  for (FeatureIndex dim : order) box = expand_box(x_prime, s, std::move(box), dim, p_m);
  const GainValue g = box_gain(s, box);
  return {std::move(box), g};
}

RemovalResult remove_instances(PointSet s, const Box& box) {
  RemovalResult out;
  for (std::size_t r : s.rows) {
    (box.contains_unchecked(s.data.row(r)) ? out.removed : out.kept).push_back(r);
  }
  return out;
}

namespace {

void reject_conflicting_duplicates(const LabeledDataset& t) {
  std::vector<std::size_t> order(t.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto row_less = [&](std::size_t a, std::size_t b) {
    const auto ra = t.row(a), rb = t.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  };
  std::sort(order.begin(), order.end(), row_less);
  for (std::size_t i = 1; i < order.size(); ++i) {
    const auto a = t.row(order[i - 1]), b = t.row(order[i]);
    if (std::equal(a.begin(), a.end(), b.begin()) && t.label(order[i - 1]) != t.label(order[i])) {
      throw DomainError("instances " + std::to_string(t.id(order[i - 1])) + " and " +
                        std::to_string(t.id(order[i])) +
                        " have identical features but different labels");
    }
  }
}

DecisionTree grow_branch(const LabeledDataset& t, const std::vector<std::size_t>& captured,
                         const FeatureSubset& subset, const DBranchConfig& cfg,
                         std::mt19937_64& rng) {
  ClassCounts counts;
  for (std::size_t r : captured) counts.add(t.label(r));
  if (cfg.variant == Variant::B) {
    // The box was grown around a positive, so a tie keeps it positive.
    return DecisionTree::leaf(majority_label(counts, 1), counts);
  }
  TreeConfig tc;
  tc.rng_seed = rng();
  if (cfg.variant == Variant::Ts) {
    tc.feature_pool.assign(subset.dims().begin(), subset.dims().end());
    tc.mu = std::min(cfg.mu, subset.size());
  } else {
    tc.mu = std::min(cfg.mu, t.dims());
  }
  return top_down_construct(t, captured, tc);
}

}  // namespace

DecisionBranchModel fit_decision_branches(const LabeledDataset& t, const DBranchConfig& cfg) {
  cfg.validate(t.dims());
  if (!t.has_labels()) throw DomainError("training set needs labels");
  if (t.count_label(1) == 0) throw DomainError("training set has no positive instance");
  reject_conflicting_duplicates(t);

  std::mt19937_64 rng(cfg.rng_seed);
  std::vector<std::size_t> negatives, positives;
  for (std::size_t i = 0; i < t.rows(); ++i) (t.label(i) ? positives : negatives).push_back(i);

  std::vector<std::size_t> subset_ids(cfg.subsets.size());
  std::vector<std::size_t> s_rows;
  std::vector<DecisionBranch> branches;

  while (!positives.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, positives.size() - 1);
    const std::size_t anchor = positives[pick(rng)];
    const auto x_prime = t.row(anchor);

    s_rows.assign(negatives.begin(), negatives.end());
    s_rows.insert(s_rows.end(), positives.begin(), positives.end());
    const PointSet s{t, s_rows};

    // p subsets uniformly without replacement (partial Fisher-Yates).
    std::iota(subset_ids.begin(), subset_ids.end(), std::size_t{0});
    for (std::size_t i = 0; i < cfg.p; ++i) {
      std::uniform_int_distribution<std::size_t> draw(i, subset_ids.size() - 1);
      std::swap(subset_ids[i], subset_ids[draw(rng)]);
    }

    // The first candidate is kept unless a later one is strictly better, so
    // a zero-gain iteration (e.g. only positives left) still yields a box.
    GainBox best;
    std::size_t best_subset = 0;
    for (std::size_t i = 0; i < cfg.p; ++i) {
      const FeatureSubset& f = cfg.subsets[subset_ids[i]];
      GainBox cand = greedy_max_gain_box(s, x_prime, f, cfg.p_m, rng);
      if (i == 0 || cand.gain > best.gain) {
        best = std::move(cand);
        best_subset = subset_ids[i];
      }
    }

    RemovalResult pos = remove_instances({t, positives}, best.box);
    RemovalResult neg = remove_instances({t, negatives}, best.box);
    positives = std::move(pos.kept);
    negatives = std::move(neg.kept);

    std::vector<std::size_t> captured = std::move(neg.removed);
    captured.insert(captured.end(), pos.removed.begin(), pos.removed.end());

    const FeatureSubset& subset = cfg.subsets[best_subset];
    DecisionTree branch = grow_branch(t, captured, subset, cfg, rng);
    branches.push_back({std::move(best.box), subset, std::move(branch)});
  }
  return DecisionBranchModel(t.dims(), cfg.variant, std::move(branches));
}

DBranchEnsemble ensemble_fit(const LabeledDataset& t, const DBranchConfig& cfg, std::size_t members,
                             std::size_t threads) {
  if (members < 1) throw ConfigError("ensemble size must be at least 1");
  cfg.validate(t.dims());
  std::vector<DecisionBranchModel> models(members);
  auto fit_member = [&](std::size_t i) {
    DBranchConfig member = cfg;
    member.rng_seed = member_seed(cfg.rng_seed, i);
    models[i] = fit_decision_branches(t, member);
  };
  threads = std::clamp<std::size_t>(threads, 1, members);
  if (threads == 1) {
    for (std::size_t i = 0; i < members; ++i) fit_member(i);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < members; i += threads) fit_member(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    pool.clear();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return DBranchEnsemble(std::move(models));
}

namespace {
constexpr char kModelMagic[5] = "DBM1";
constexpr std::uint16_t kModelVersion = 1;
}  // namespace

void write_models(std::ostream& os, const ModelFileHeader& header, const DBranchEnsemble& ens) {
  binio::write_magic(os, kModelMagic);
  binio::write<std::uint16_t>(os, kModelVersion);
  binio::write<std::uint32_t>(os, header.d);
  binio::write<std::uint32_t>(os, header.subset_size);
  binio::write<std::uint32_t>(os, header.k);
  binio::write<std::uint8_t>(os, static_cast<std::uint8_t>(header.variant));
  binio::write<std::uint64_t>(os, header.seed);
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(ens.size()));
  for (const DecisionBranchModel& m : ens.models()) {
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(m.size()));
    for (const DecisionBranch& b : m.branches()) {
      binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(b.subset.size()));
      for (FeatureIndex dim : b.subset.dims()) binio::write<std::uint32_t>(os, dim);
      for (double v : b.box.lowers()) binio::write<double>(os, v);
      for (double v : b.box.uppers()) binio::write<double>(os, v);
      b.branch.write(os);
    }
  }
}

DBranchEnsemble read_models(std::istream& is, ModelFileHeader* header_out) {
  binio::expect_magic(is, kModelMagic);
  if (binio::read<std::uint16_t>(is) != kModelVersion) throw StorageError("unsupported model version");
  ModelFileHeader h;
  h.d = binio::read<std::uint32_t>(is);
  h.subset_size = binio::read<std::uint32_t>(is);
  h.k = binio::read<std::uint32_t>(is);
  const auto variant = binio::read<std::uint8_t>(is);
  if (variant > 2) throw StorageError("unknown model variant tag");
  h.variant = static_cast<Variant>(variant);
  h.seed = binio::read<std::uint64_t>(is);
  const auto members = binio::read<std::uint32_t>(is);
  if (h.d == 0 || members == 0) throw StorageError("model file declares no dimensions or members");

  std::vector<DecisionBranchModel> models;
  for (std::uint32_t m = 0; m < members; ++m) {
    const auto count = binio::read<std::uint32_t>(is);
    std::vector<DecisionBranch> branches;
    branches.reserve(count);
    for (std::uint32_t b = 0; b < count; ++b) {
      const auto size = binio::read<std::uint32_t>(is);
      if (size == 0 || size > h.d) throw StorageError("bad subset size in model file");
      std::vector<FeatureIndex> dims(size);
      for (auto& dim : dims) dim = binio::read<std::uint32_t>(is);
      std::vector<double> lower(h.d), upper(h.d);
      for (auto& v : lower) v = binio::read<double>(is);
      for (auto& v : upper) v = binio::read<double>(is);
      try {
        branches.push_back({Box(std::move(lower), std::move(upper)),
                            FeatureSubset(std::move(dims), h.d), DecisionTree::read(is)});
      } catch (const std::logic_error& e) {
        throw StorageError(std::string("corrupt model branch: ") + e.what());
      }
    }
    models.emplace_back(h.d, h.variant, std::move(branches));
  }
  if (header_out) *header_out = h;
  return DBranchEnsemble(std::move(models));
}

void save_models(const std::string& path, const ModelFileHeader& header, const DBranchEnsemble& ens) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StorageError("cannot open " + path + " for writing");
  write_models(os, header, ens);
  if (!os) throw StorageError("write failed: " + path);
}

DBranchEnsemble load_models(const std::string& path, ModelFileHeader* header) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StorageError("cannot open " + path);
  return read_models(is, header);
}

}  // namespace sbc
