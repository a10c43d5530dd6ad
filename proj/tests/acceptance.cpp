// Acceptance checks. Prints one PASS/FAIL line per criterion. Exit status:
// 0 all passed, 1 some criterion failed on measured evidence, 77 the only
// failures are criteria whose external dataset is not installed.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "sbc/bench.hpp"
#include "sbc/dbranch.hpp"
#include "sbc/engine.hpp"
#include "sbc/kdindex.hpp"
#include "test_util.hpp"

using namespace sbc;

namespace {

// Pinned thresholds.
constexpr std::size_t kTrials = 300;
constexpr double kPipelineBudget = 600.0;
constexpr std::size_t kRangeBoxes = 1000;
constexpr std::size_t kRangeIndexes = 3;
constexpr std::size_t kKnnQueries = 100;
constexpr double kRangeBudget = 60.0;
constexpr double kIrisMinF1 = 0.88;
constexpr double kParityGap = 0.07;
constexpr double kParityBudget = 900.0;
constexpr double kMinLift = 0.04;
constexpr double kLiftBudget = 1800.0;
constexpr double kMaxExponent = 0.75;
constexpr double kMinSpeedup = 10.0;
constexpr double kMaxAnswerFraction = 0.001;
constexpr double kScalingBudget = 2700.0;
constexpr std::size_t kPropertyTrials = 200;
constexpr double kPropertyBudget = 300.0;
constexpr double kMinRatio = 1.7;
constexpr double kMaxRatio = 2.3;
constexpr double kLeafBudget = 300.0;

enum class Status { Pass, Fail, Unavailable };

struct Outcome {
  Status status = Status::Pass;
  std::string detail;
};

std::size_t threads() { return std::max(1u, std::thread::hardware_concurrency()); }

std::string fmt(double v, int digits = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::vector<std::size_t> all_rows(const LabeledDataset& s) {
  std::vector<std::size_t> r(s.rows());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = i;
  return r;
}

// Independent majority vote over boxes and trees.
Label oracle_predict(const DBranchEnsemble& ens, std::span<const double> x) {
  std::size_t votes = 0;
  for (const auto& m : ens.models()) {
    bool hit = false;
    for (const auto& b : m.branches()) {
      if (oracle::in_box(b.box, x) && oracle::eval_tree(b.branch, x) == 1) {
        hit = true;
        break;
      }
    }
    votes += hit;
  }
  return 2 * votes > ens.size() ? 1 : 0;
}

// ---------------------------------------------------------------- catalogs

// Catalog of one of four shapes: uniform, rare clusters, coarse grid (ties
// and duplicates), or half the columns on a coarse grid.
LabeledDataset random_catalog(std::size_t n, std::size_t d, int shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 0.03);
  const int levels = std::uniform_int_distribution<int>(3, 12)(rng);
  std::vector<double> center(d);
  for (auto& c : center) c = 0.2 + 0.6 * u(rng);
  std::vector<double> x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const bool in_cluster = shape == 1 && u(rng) < 0.05;
    for (std::size_t j = 0; j < d; ++j) {
      double v = in_cluster ? center[j] + g(rng) : u(rng);
      if (shape == 2 || (shape == 3 && j % 2 == 0)) v = std::floor(v * levels) / levels;
      x[i * d + j] = v;
    }
  }
  std::vector<InstanceId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = 13 * i + 5;
  std::shuffle(ids.begin(), ids.end(), rng);
  return LabeledDataset::unlabeled(d, std::move(x), std::move(ids));
}

// Training set drawn from catalog rows: the n_pos nearest rows to a random
// anchor, a few scattered positives, and random negatives. Feature rows
// already taken are skipped so labels never conflict.
LabeledDataset training_set(const LabeledDataset& cat, std::size_t n_pos, std::size_t n_neg,
                            std::mt19937_64& rng) {
  const std::size_t n = cat.rows(), d = cat.dims();
  const std::size_t anchor = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::vector<std::pair<double, std::size_t>> by_dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += (cat.at(i, j) - cat.at(anchor, j)) * (cat.at(i, j) - cat.at(anchor, j));
    by_dist[i] = {s, i};
  }
  std::sort(by_dist.begin(), by_dist.end());

  std::set<std::vector<double>> seen;
  std::vector<double> x;
  std::vector<Label> y;
  std::vector<InstanceId> ids;
  auto take = [&](std::size_t r, Label label) {
    std::vector<double> f(cat.row(r).begin(), cat.row(r).end());
    if (!seen.insert(f).second) return;
    x.insert(x.end(), f.begin(), f.end());
    y.push_back(label);
    ids.push_back(cat.id(r));
  };
  for (std::size_t i = 0; i < n && y.size() < n_pos; ++i) take(by_dist[i].second, 1);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (std::size_t i = 0; i < n_pos / 5; ++i) take(pick(rng), 1);
  for (std::size_t i = 0; i < n_neg; ++i) take(pick(rng), 0);
  return LabeledDataset(d, std::move(x), std::move(y), std::move(ids));
}

// ---------------------------------------------------------------- 1

Outcome pipeline_equivalence() {
  std::mt19937_64 rng(1);
  std::size_t mismatches = 0, nonempty = 0, total_ids = 0;
  std::string first_mismatch;
  for (std::size_t t = 0; t < kTrials; ++t) {
    const std::size_t D = 2 + t % 3;
    const Variant variant = static_cast<Variant>((t / 3) % 3);
    const std::size_t members = (t / 9) % 2 ? 5 : 1;
    const std::size_t d = std::uniform_int_distribution<std::size_t>(D + 1, 20)(rng);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1000, 10'000)(rng);
    const int shape = static_cast<int>(t % 4);
    const auto cat = random_catalog(n, d, shape, rng);

    PreprocessConfig pc;
    pc.k = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
    pc.subset_size = D;
    pc.leaf_size = std::array<std::size_t, 5>{8, 32, 64, 256, 1024}[rng() % 5];
    pc.layout = variant == Variant::Ta || rng() % 2 ? LeafLayout::Ta : LeafLayout::Ts;
    pc.seed = rng();
    testutil::TempDir dir;
    const auto iset = preprocess(cat, pc, dir.path());

    const std::size_t n_pos = std::uniform_int_distribution<std::size_t>(5, 40)(rng);
    const std::size_t n_neg = std::uniform_int_distribution<std::size_t>(20, 300)(rng);
    const auto train = training_set(cat, n_pos, n_neg, rng);

    DBranchConfig cfg;
    cfg.variant = variant;
    cfg.p = std::uniform_int_distribution<std::size_t>(1, pc.k)(rng);
    const std::size_t usable = variant == Variant::B ? 1 : variant == Variant::Ts ? D : d;
    cfg.mu = std::uniform_int_distribution<std::size_t>(1, usable)(rng);
    cfg.p_m = std::array<std::size_t, 3>{1, 5, 20}[rng() % 3];
    cfg.rng_seed = rng();

    QueryOptions opts;
    opts.members = members;
    DBranchEnsemble ens;
    const auto result = process_query(iset, train, cfg, opts, &ens);
    const auto scan = scan_oracle(cat, ens);
    std::vector<InstanceId> vote;
    for (std::size_t i = 0; i < cat.rows(); ++i) {
      if (oracle_predict(ens, cat.row(i))) vote.push_back(cat.id(i));
    }
    std::sort(vote.begin(), vote.end());
    if (result.positive_ids != scan || scan != vote) {
      if (mismatches++ == 0) {
        first_mismatch = "trial " + std::to_string(t) + " (" + std::to_string(result.positive_ids.size()) +
                         " vs " + std::to_string(scan.size()) + " ids)";
      }
    }
    nonempty += !scan.empty();
    total_ids += scan.size();
  }
  Outcome o;
  o.status = mismatches == 0 ? Status::Pass : Status::Fail;
  o.detail = std::to_string(kTrials) + " trials, " + std::to_string(mismatches) + " mismatches, " +
             std::to_string(nonempty) + " non-empty answers, " + std::to_string(total_ids) + " ids compared";
  if (mismatches) o.detail += "; first: " + first_mismatch;
  return o;
}

// ---------------------------------------------------------------- 2

Outcome range_exactness() {
  std::mt19937_64 rng(2);
  const std::size_t n = 10'000, d = 6;
  // Columns 3..5 on an 8-level grid so boundaries hit data values.
  auto cat = random_catalog(n, d, 3, rng);
  testutil::TempDir dir;
  std::size_t box_mismatch = 0, coord_mismatch = 0, knn_mismatch = 0, matched = 0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t k = 0; k < kRangeIndexes; ++k) {
    const std::size_t D = 2 + k;
    std::vector<FeatureIndex> dims(d);
    for (std::size_t i = 0; i < d; ++i) dims[i] = static_cast<FeatureIndex>(i);
    std::shuffle(dims.begin(), dims.end(), rng);
    dims.resize(D);
    const FeatureSubset subset(dims, d);
    KdBuildOptions opts;
    opts.leaf_size = std::array<std::size_t, 4>{1, 16, 100, 700}[rng() % 4];
    opts.layout = rng() % 2 ? LeafLayout::Ta : LeafLayout::Ts;
    const auto idx = build_index(cat, subset, opts, dir.path() / ("i" + std::to_string(k)));

    for (std::size_t b = 0; b < kRangeBoxes; ++b) {
      Box box = testdata::random_box(rng, d, subset.dims());
      if (b % 3 == 0) {
        // Bounds placed exactly on data values.
        const FeatureIndex dim = subset[rng() % D];
        double a = cat.at(rng() % n, dim), c = cat.at(rng() % n, dim);
        if (a > c) std::swap(a, c);
        box.set_bounds(dim, a, c);
      }
      const auto got = idx.range_query(box);
      const auto want = oracle::range_filter(cat, box);
      std::set<InstanceId> got_ids(got.ids.begin(), got.ids.end());
      if (got_ids != want || got.ids.size() != want.size()) ++box_mismatch;
      matched += want.size();
    }
    // Returned coordinates are the catalog's, bit for bit.
    std::map<InstanceId, std::size_t> row_of;
    for (std::size_t i = 0; i < n; ++i) row_of[cat.id(i)] = i;
    const auto everything = idx.range_query(Box(d));
    for (std::size_t i = 0; i < everything.size(); ++i) {
      const auto rec = everything.record(i);
      const auto row = cat.row(row_of.at(everything.ids[i]));
      for (std::size_t j = 0; j < rec.size(); ++j) {
        const double want = opts.layout == LeafLayout::Ts ? row[subset[j]] : row[j];
        if (std::memcmp(&rec[j], &want, sizeof(double)) != 0) ++coord_mismatch;
      }
    }

    for (std::size_t q = k; q < kKnnQueries; q += kRangeIndexes) {
      std::vector<double> point(D);
      if (q % 2 == 0) {
        const std::size_t r = rng() % n;
        for (std::size_t j = 0; j < D; ++j) point[j] = cat.at(r, subset[j]);
      } else {
        for (auto& v : point) v = u(rng);
      }
      const std::size_t K = std::uniform_int_distribution<std::size_t>(1, 50)(rng);
      const auto got = idx.knn_query(point, K);
      const auto want = oracle::knn(cat, subset, point, K);
      std::vector<InstanceId> got_ids;
      for (const auto& nb : got) got_ids.push_back(nb.id);
      if (got_ids != want) ++knn_mismatch;
    }
  }
  Outcome o;
  o.status = box_mismatch + coord_mismatch + knn_mismatch == 0 ? Status::Pass : Status::Fail;
  o.detail = std::to_string(kRangeBoxes * kRangeIndexes) + " boxes (" + std::to_string(matched) + " ids), " +
             std::to_string(box_mismatch) + " box mismatches, " + std::to_string(coord_mismatch) +
             " coordinate mismatches; " + std::to_string(kKnnQueries) + " kNN queries, " +
             std::to_string(knn_mismatch) + " mismatches";
  return o;
}

// ---------------------------------------------------------------- 3, 4

bool dataset_available(const std::string& name, std::string* why) {
  try {
    bench::load_dataset(name);
    return true;
  } catch (const StorageError& e) {
    *why = e.what();
    return false;
  }
}

bench::BenchReport run_bench(const std::string& dataset, std::vector<std::string> models) {
  bench::BenchConfig cfg;
  cfg.datasets = {dataset};
  cfg.models = std::move(models);
  cfg.threads = threads();
  return bench::run_benchmark(cfg);
}

std::string mean_std(const bench::ModelSummary& s) { return fmt(s.mean_f1) + " +- " + fmt(s.std_f1); }

bool all_match_scan(const bench::BenchReport& r) {
  return std::all_of(r.results.begin(), r.results.end(), [](const auto& t) { return t.pipeline_matches_scan; });
}

Outcome f1_parity() {
  Outcome o;
  bool ok = true;
  for (const std::string name : {"iris", "satimage"}) {
    std::string why;
    if (!dataset_available(name, &why)) {
      o.detail += name + ": dataset not installed; ";
      if (o.status == Status::Pass) o.status = Status::Unavailable;
      continue;
    }
    const auto r = run_bench(name, {"DBranch[B,4]", "DTree"});
    const auto* db = r.find(name, "DBranch[B,4]");
    const auto* dt = r.find(name, "DTree");
    const double gap = std::abs(db->mean_f1 - dt->mean_f1);
    const bool pass = (name != "iris" || db->mean_f1 >= kIrisMinF1) && gap <= kParityGap && all_match_scan(r);
    ok = ok && pass;
    o.detail += name + ": DBranch[B,4] " + mean_std(*db) + ", DTree " + mean_std(*dt) + ", gap " + fmt(gap) +
                " over " + std::to_string(db->tasks) + " tasks; ";
  }
  if (!ok) o.status = Status::Fail;
  o.detail.resize(o.detail.size() - 2);
  return o;
}

Outcome ensemble_lift() {
  std::string why;
  if (!dataset_available("satimage", &why)) return {Status::Unavailable, "satimage: dataset not installed"};
  const auto r = run_bench("satimage", {"DBranch[B,4]", "DBEns[B,4]"});
  const auto* single = r.find("satimage", "DBranch[B,4]");
  const auto* ens = r.find("satimage", "DBEns[B,4]");
  const double lift = ens->mean_f1 - single->mean_f1;
  Outcome o;
  o.status = lift >= kMinLift && all_match_scan(r) ? Status::Pass : Status::Fail;
  o.detail = "satimage: DBEns[B,4] (M=25) " + mean_std(*ens) + ", DBranch[B,4] " + mean_std(*single) +
             ", lift " + fmt(lift);
  return o;
}

// ---------------------------------------------------------------- 5

struct SpeedupResult {
  std::size_t qualifying = 0;
  std::size_t queries = 0;
  double min_speedup = std::numeric_limits<double>::infinity();
  double build_seconds = 0.0;
  bool exact = true;
  std::string rows;
};

// 10^7 uniform rows in [0, 1)^20 with rare tight clusters; each query is a
// B model trained on 30 cluster rows and 30000 random background rows.
SpeedupResult large_speedup(const std::filesystem::path& scratch) {
  constexpr std::size_t n = 10'000'000, d = 20, clusters = 5, cluster_rows = 1000, negatives = 30'000;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 0.004);
  std::vector<double> x(n * d);
  for (auto& v : x) v = u(rng);
  std::vector<std::vector<std::size_t>> members(clusters);
  std::set<std::size_t> planted;
  for (std::size_t c = 0; c < clusters; ++c) {
    std::vector<double> center(d);
    for (auto& v : center) v = 0.1 + 0.8 * u(rng);
    for (std::size_t i = 0; i < cluster_rows; ++i) {
      std::size_t r = rng() % n;
      while (!planted.insert(r).second) r = rng() % n;
      members[c].push_back(r);
      for (std::size_t j = 0; j < d; ++j) x[r * d + j] = center[j] + g(rng);
    }
  }
  std::vector<InstanceId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  const auto cat = LabeledDataset::unlabeled(d, std::move(x), std::move(ids));

  SpeedupResult out;
  PreprocessConfig pc;
  pc.k = 10;
  pc.subset_size = 3;
  pc.seed = 5;
  const auto t0 = std::chrono::steady_clock::now();
  const auto iset = preprocess(cat, pc, scratch / "large");
  out.build_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (std::size_t c = 0; c < clusters; ++c) {
    std::vector<std::size_t> rows(members[c].begin(), members[c].begin() + 30);
    while (rows.size() < 30 + negatives) {
      const std::size_t r = rng() % n;
      if (!planted.count(r)) rows.push_back(r);
    }
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    const std::set<std::size_t> pos(members[c].begin(), members[c].begin() + 30);
    std::vector<double> tx;
    std::vector<Label> ty;
    std::vector<InstanceId> tid;
    for (std::size_t r : rows) {
      tx.insert(tx.end(), cat.row(r).begin(), cat.row(r).end());
      ty.push_back(pos.count(r) ? 1 : 0);
      tid.push_back(cat.id(r));
    }
    const LabeledDataset train(d, std::move(tx), std::move(ty), std::move(tid));

    DBranchConfig cfg;
    cfg.variant = Variant::B;
    cfg.p = 3;
    cfg.rng_seed = c;
    cfg.subsets = iset.manifest().subsets;
    const auto model = fit_decision_branches(train, cfg);
    const DBranchEnsemble ens({model});
    iset.drop_page_cache();
    const auto result = answer_query(iset, ens);
    const auto s0 = std::chrono::steady_clock::now();
    const auto scan = scan_oracle(cat, ens);
    const double t_scan = std::chrono::duration<double>(std::chrono::steady_clock::now() - s0).count();
    out.exact = out.exact && scan == result.positive_ids;
    ++out.queries;
    const double fraction = static_cast<double>(scan.size()) / static_cast<double>(n);
    const double speedup = t_scan / result.timings.t_query;
    const auto warm = answer_query(iset, ens);
    std::size_t slabs = 0;
    for (const auto& b : model.branches()) slabs += b.box.bounded_dims() == 1;
    out.rows += " [" + std::to_string(scan.size()) + " ids, " + std::to_string(model.size()) + " boxes (" +
                std::to_string(slabs) + " bounded in one dim), " + std::to_string(result.stats.leaves_visited) +
                " leaves, t_query cold " + fmt(result.timings.t_query * 1e3, 1) + " ms, warm " +
                fmt(warm.timings.t_query * 1e3, 1) + " ms, scan " + fmt(t_scan * 1e3, 0) + " ms, " +
                fmt(speedup, 1) + "x]";
    if (fraction < kMaxAnswerFraction) {
      ++out.qualifying;
      out.min_speedup = std::min(out.min_speedup, speedup);
    }
  }
  return out;
}

Outcome scaling_shape() {
  testutil::TempDir dir;
  bench::ScalingConfig sc;
  sc.subset_size = 3;
  sc.max_leaves = 10;
  sc.sizes = {10'000, 100'000, 1'000'000};
  sc.scratch_dir = dir.path();
  const auto curve = bench::scaling_experiment(sc);
  std::string pts;
  for (const auto& p : curve.points) pts += std::to_string(p.n) + ":" + fmt(p.mean_t * 1e3, 3) + "ms ";
  const bool shape_ok = curve.exponent > 0.0 && curve.exponent <= kMaxExponent;

  const auto big = large_speedup(dir.path());
  const bool speed_ok = big.qualifying > 0 && big.min_speedup >= kMinSpeedup && big.exact;
  Outcome o;
  o.status = shape_ok && speed_ok ? Status::Pass : Status::Fail;
  o.detail = "exponent " + fmt(curve.exponent) + " (" + pts + "); N=1e7 build " + fmt(big.build_seconds, 0) +
             " s, " + std::to_string(big.qualifying) + "/" + std::to_string(big.queries) +
             " queries under 0.1% of N, min speedup " + fmt(big.min_speedup, 0) + "x, exact " +
             (big.exact ? "yes" : "no") + ";" + big.rows;
  return o;
}

// ---------------------------------------------------------------- 6

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b) {
  std::vector<std::filesystem::path> fa, fb;
  for (const auto& e : std::filesystem::directory_iterator(a)) fa.push_back(e.path().filename());
  for (const auto& e : std::filesystem::directory_iterator(b)) fb.push_back(e.path().filename());
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const auto& f : fa) {
    if (file_bytes(a / f) != file_bytes(b / f)) return false;
  }
  return true;
}

double gain_of(const LabeledDataset& s, const Box& box) {
  std::vector<int> in, out;
  for (std::size_t i = 0; i < s.rows(); ++i) (oracle::in_box(box, s.row(i)) ? in : out).push_back(s.label(i));
  return oracle::split_gain(in, out);
}

Outcome properties() {
  std::mt19937_64 rng(6);
  std::map<std::string, std::size_t> violations;
  std::size_t models = 0, boxes = 0, expansions = 0, index_sets = 0;
  for (std::size_t t = 0; t < kPropertyTrials; ++t) {
    const std::size_t D = 2 + t % 3, d = D + 1 + rng() % 8;
    const Variant variant = static_cast<Variant>(t % 3);
    const auto cat = random_catalog(800 + rng() % 1500, d, static_cast<int>(t % 4), rng);
    const auto train = training_set(cat, 5 + rng() % 30, 50 + rng() % 250, rng);
    DBranchConfig cfg;
    cfg.variant = variant;
    cfg.subsets = sample_subsets(d, 2 + rng() % 5, D, rng());
    cfg.p = 1 + rng() % cfg.subsets.size();
    cfg.mu = variant == Variant::B ? 1 : 1 + rng() % (variant == Variant::Ts ? D : d);
    cfg.p_m = 1 + rng() % 20;
    cfg.rng_seed = rng();
    const auto model = fit_decision_branches(train, cfg);
    ++models;

    for (const auto& b : model.branches()) {
      ++boxes;
      if (b.box.bounded_dims() > D) ++violations["n_b > D"];
      for (std::size_t j = 0; j < d; ++j) {
        if (b.box.is_bounded(j) && !b.subset.contains(static_cast<FeatureIndex>(j))) ++violations["bound off subset"];
      }
    }
    for (std::size_t i = 0; i < train.rows(); ++i) {
      if (!train.label(i)) continue;
      const bool covered = std::any_of(model.branches().begin(), model.branches().end(),
                                       [&](const auto& b) { return oracle::in_box(b.box, train.row(i)); });
      if (!covered) ++violations["uncovered positive"];
    }

    // Determinism: model, ensemble across thread counts, model file bytes.
    if (!(fit_decision_branches(train, cfg) == model)) ++violations["model not deterministic"];
    if (t % 6 == 0 && !(ensemble_fit(train, cfg, 3, 1) == ensemble_fit(train, cfg, 3, 3))) {
      ++violations["ensemble depends on threads"];
    }
    testutil::TempDir dir;
    const ModelFileHeader header{static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(D),
                                 static_cast<std::uint32_t>(cfg.subsets.size()), variant, cfg.rng_seed};
    const DBranchEnsemble ens({model});
    save_models((dir.path() / "a.dbm").string(), header, ens);
    const auto loaded = load_models((dir.path() / "a.dbm").string());
    save_models((dir.path() / "b.dbm").string(), header, loaded);
    if (!(loaded == ens) || file_bytes(dir.path() / "a.dbm") != file_bytes(dir.path() / "b.dbm")) {
      ++violations["model file round trip"];
    }

    // Initial-box purity and expansion monotonicity on the training set.
    const auto rows = all_rows(train);
    const FeatureSubset& f = cfg.subsets[rng() % cfg.subsets.size()];
    std::vector<FeatureIndex> order(f.dims().begin(), f.dims().end());
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t anchor = rng() % train.rows();
    const auto xp = train.row(anchor);
    Box box = initial_empty_box(xp, {train, rows}, order, rng);
    for (std::size_t r : rows) {
      bool dup = true;
      for (FeatureIndex j : order) dup = dup && train.at(r, j) == xp[j];
      if (oracle::in_box(box, train.row(r)) != dup) ++violations["initial box impure"];
    }
    for (FeatureIndex dim : order) {
      const double before = gain_of(train, box);
      box = expand_box(xp, {train, rows}, box, dim, cfg.p_m);
      ++expansions;
      if (gain_of(train, box) < before - 1e-12) ++violations["expansion lowered gain"];
      if (!oracle::in_box(box, xp)) ++violations["expansion dropped x'"];
    }

    // Index files: rebuilt bytes identical, reopened structure and records exact.
    if (t % 4 == 0) {
      ++index_sets;
      PreprocessConfig pc;
      pc.k = 3;
      pc.subset_size = D;
      pc.leaf_size = 1 + rng() % 200;
      pc.layout = rng() % 2 ? LeafLayout::Ta : LeafLayout::Ts;
      pc.seed = rng();
      const auto built = preprocess(cat, pc, dir.path() / "p1");
      preprocess(cat, pc, dir.path() / "p2");
      if (!same_tree(dir.path() / "p1", dir.path() / "p2")) ++violations["index files differ on rebuild"];
      const auto reopened = IndexSet::open(dir.path() / "p1");
      if (!(reopened.manifest() == built.manifest())) ++violations["manifest round trip"];
      std::map<InstanceId, std::size_t> row_of;
      for (std::size_t i = 0; i < cat.rows(); ++i) row_of[cat.id(i)] = i;
      for (std::size_t k = 0; k < built.indexes().size(); ++k) {
        const auto& a = built.indexes()[k];
        const auto& b = reopened.indexes()[k];
        const bool same_inner =
            a.inner_nodes().size() == b.inner_nodes().size() &&
            std::equal(a.inner_nodes().begin(), a.inner_nodes().end(), b.inner_nodes().begin(),
                       [](const auto& x, const auto& y) {
                         return std::memcmp(&x.split_value, &y.split_value, sizeof(double)) == 0 &&
                                x.left == y.left && x.right == y.right && x.split_pos == y.split_pos;
                       }) &&
            std::equal(a.leaf_directory().begin(), a.leaf_directory().end(), b.leaf_directory().begin(),
                       b.leaf_directory().end(),
                       [](const auto& x, const auto& y) { return x.offset == y.offset && x.count == y.count; });
        if (!same_inner) ++violations["inner tree round trip"];
        std::size_t records = 0;
        for (std::size_t leaf = 0; leaf < b.leaf_count(); ++leaf) {
          const auto r = b.read_leaf(leaf);
          records += r.size();
          for (std::size_t i = 0; i < r.size(); ++i) {
            const auto row = cat.row(row_of.at(r.ids[i]));
            for (std::size_t j = 0; j < r.width; ++j) {
              const double want = pc.layout == LeafLayout::Ts ? row[b.subset()[j]] : row[j];
              if (std::memcmp(&r.record(i)[j], &want, sizeof(double)) != 0) ++violations["leaf record bytes"];
            }
          }
        }
        if (records != cat.rows()) ++violations["leaf record count"];
      }
    }
  }
  std::size_t total = 0;
  std::string which;
  for (const auto& [name, count] : violations) {
    total += count;
    which += " " + name + "=" + std::to_string(count);
  }
  Outcome o;
  o.status = total == 0 ? Status::Pass : Status::Fail;
  o.detail = std::to_string(models) + " models, " + std::to_string(boxes) + " boxes, " + std::to_string(expansions) +
             " expansions, " + std::to_string(index_sets) + " index sets; " + std::to_string(total) + " violations" + which;
  return o;
}

// ---------------------------------------------------------------- 7

Outcome leaf_memory() {
  const auto cat = bench::uniform_catalog(100'000, 20, 7);
  testutil::TempDir dir;
  bool ok = true;
  std::string detail;
  for (std::size_t D : {3, 6}) {
    const auto subset = sample_subsets(20, 1, D, 7 + D).front();
    std::vector<std::size_t> bytes;
    for (std::size_t leaf : {5632, 2816, 1408, 704}) {
      KdBuildOptions opts;
      opts.leaf_size = leaf;
      bytes.push_back(build_index(cat, subset, opts, dir.path() / ("l" + std::to_string(leaf))).inner_memory_bytes());
    }
    detail += "D=" + std::to_string(D) + " bytes";
    for (auto b : bytes) detail += " " + std::to_string(b);
    detail += " ratios";
    for (std::size_t i = 1; i < bytes.size(); ++i) {
      const double ratio = static_cast<double>(bytes[i]) / static_cast<double>(bytes[i - 1]);
      ok = ok && ratio >= kMinRatio && ratio <= kMaxRatio;
      detail += " " + fmt(ratio, 2);
    }
    detail += "; ";
  }
  detail.resize(detail.size() - 2);
  return {ok ? Status::Pass : Status::Fail, detail};
}

struct Criterion {
  int number;
  std::string name;
  double budget;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  app.add_option("criteria", only, "Criterion numbers to run (default: all)")->check(CLI::Range(1, 7));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "pipeline equals scan oracle", kPipelineBudget, pipeline_equivalence},
      {2, "range and kNN exactness", kRangeBudget, range_exactness},
      {3, "F1 parity with DTree", kParityBudget, f1_parity},
      {4, "ensemble lift", kLiftBudget, ensemble_lift},
      {5, "scaling shape and large-N speedup", kScalingBudget, scaling_shape},
      {6, "structural invariants", kPropertyBudget, properties},
      {7, "leaf-size memory law", kLeafBudget, leaf_memory},
  };
  bool failed = false, unavailable = false;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.number) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Status::Fail, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.status != Status::Fail && secs > c.budget) {
      o.status = Status::Fail;
      o.detail += "; over time budget";
    }
    failed = failed || o.status == Status::Fail;
    unavailable = unavailable || o.status == Status::Unavailable;
    std::cout << (o.status == Status::Pass ? "PASS" : "FAIL") << " " << c.number << " " << c.name << ": "
              << o.detail << " [" << fmt(secs, 1) << " s, budget " << fmt(c.budget, 0) << " s]" << std::endl;
  }
  return failed ? 1 : unavailable ? 77 : 0;
}
