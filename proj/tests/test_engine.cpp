#include <doctest.h>

#include <fstream>
#include <random>

#include "oracles.hpp"
#include "sbc/catalog.hpp"
#include "sbc/engine.hpp"
#include "test_util.hpp"

using namespace sbc;

namespace {

// Training set drawn from catalog rows with a labeled cluster plus random
// negatives, so answers are neither empty nor the whole catalog.
LabeledDataset training_from(const LabeledDataset& cat, std::size_t n_pos, std::size_t n_neg,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t center = rng() % cat.rows();
  std::vector<std::pair<double, std::size_t>> by_dist;
  for (std::size_t i = 0; i < cat.rows(); ++i) {
    double d2 = 0;
    for (std::size_t j = 0; j < cat.dims(); ++j) {
      const double diff = cat.at(i, j) - cat.at(center, j);
      d2 += diff * diff;
    }
    by_dist.emplace_back(d2, i);
  }
  std::sort(by_dist.begin(), by_dist.end());
  std::vector<double> x;
  std::vector<Label> y;
  std::set<std::size_t> used;
  auto take = [&](std::size_t row, Label label) {
    if (!used.insert(row).second) return;
    auto r = cat.row(row);
    x.insert(x.end(), r.begin(), r.end());
    y.push_back(label);
  };
  for (std::size_t i = 0; i < n_pos; ++i) take(by_dist[i].second, 1);
  for (std::size_t i = 0; i < n_neg; ++i) take(by_dist[n_pos + rng() % (cat.rows() - n_pos)].second, 0);
  std::vector<InstanceId> ids(y.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return LabeledDataset(cat.dims(), std::move(x), std::move(y), std::move(ids));
}

}  // namespace

TEST_CASE("subset sampling") {
  auto s = sample_subsets(100, 2, 4, 1);
  REQUIRE(s.size() == 2);
  CHECK(s[0].size() == 4);
  CHECK_FALSE(s[0] == s[1]);
  CHECK(sample_subsets(100, 2, 4, 1) == s);

  auto all = sample_subsets(5, 10, 2, 3);
  std::set<std::vector<FeatureIndex>> distinct;
  for (const auto& f : all) distinct.insert({f.dims().begin(), f.dims().end()});
  CHECK(distinct.size() == 10);

  // C(4, 3) = 4 < 6: repeats are allowed.
  CHECK(sample_subsets(4, 6, 3, 0).size() == 6);
  CHECK(sample_subsets(6, 1, 6, 0)[0].size() == 6);
  CHECK_THROWS_AS(sample_subsets(3, 1, 4, 0), ConfigError);
  CHECK_THROWS_AS(sample_subsets(3, 0, 2, 0), ConfigError);
}

TEST_CASE("preprocess writes a manifest that reopens") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(2000, 6, 0.0, 3, false);
  PreprocessConfig cfg{4, 3, 100, LeafLayout::Ts, 42};
  Manifest first;
  {
    auto iset = preprocess(cat, cfg, dir.path() / "a");
    first = iset.manifest();
    CHECK(iset.indexes().size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(iset.indexes()[i].subset() == first.subsets[i]);
  }
  auto reopened = IndexSet::open(dir.path() / "a");
  CHECK(reopened.manifest() == first);
  CHECK(first.fingerprint == fingerprint(cat));

  auto again = preprocess(cat, cfg, dir.path() / "b");
  CHECK(again.manifest() == first);
  std::ifstream a(dir.path() / "a" / "manifest.json"), b(dir.path() / "b" / "manifest.json");
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);

  cfg.subset_size = 7;
  CHECK_THROWS_AS(preprocess(cat, cfg, dir.path() / "c"), ConfigError);
  CHECK_THROWS_AS(IndexSet::open(dir.path() / "nothing"), StorageError);
}

TEST_CASE("pipeline equals the scan oracle") {
  testutil::TempDir dir;
  std::mt19937_64 rng(2024);
  int trial = 0, runs = 0, informative = 0;
  for (std::size_t D : {2u, 3u}) {
    for (LeafLayout layout : {LeafLayout::Ts, LeafLayout::Ta}) {
      auto cat = (trial % 2 == 0) ? testdata::uniform(3000, 6, 0.0, rng(), false)
                                  : testdata::quantized(3000, 6, 6, rng());
      auto iset = preprocess(cat, {5, D, 64, layout, rng()}, dir.path() / ("s" + std::to_string(trial)));
      for (Variant v : {Variant::B, Variant::Ts, Variant::Ta}) {
        if (v == Variant::Ta && layout == LeafLayout::Ts) continue;
        for (std::size_t members : {1u, 3u}) {
          auto t = training_from(cat, 25, 120, rng());
          DBranchConfig cfg;
          cfg.variant = v;
          cfg.p = 2;
          cfg.mu = 2;
          cfg.rng_seed = rng();
          DBranchEnsemble ens;
          auto res = process_query(iset, t, cfg, {members, 2}, &ens);
          CHECK(res.positive_ids == scan_oracle(cat, ens));
          ++runs;
          informative += !res.positive_ids.empty() && res.positive_ids.size() < cat.rows() / 2;
          CHECK(std::is_sorted(res.positive_ids.begin(), res.positive_ids.end()));
          std::size_t candidates = 0;
          for (const auto& c : res.per_branch) {
            candidates += c.candidates;
            CHECK(c.positives <= c.candidates);
          }
          CHECK(res.positive_ids.size() <= candidates);
          CHECK(res.timings.t_train >= 0.0);
          CHECK(res.timings.t_query >= 0.0);
          CHECK(res.timings.t_total + 1e-3 >= res.timings.t_train + res.timings.t_query);
          for (const auto& m : ens.models()) {
            for (const auto& b : m.branches()) {
              CHECK(std::find(iset.manifest().subsets.begin(), iset.manifest().subsets.end(), b.subset) !=
                    iset.manifest().subsets.end());
            }
          }
        }
      }
      ++trial;
    }
  }
  CHECK(informative * 10 >= runs * 8);
}

TEST_CASE("single model pipeline equals model scan") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(1500, 4, 0.0, 5, false);
  auto iset = preprocess(cat, {3, 2, 50, LeafLayout::Ts, 1}, dir.path());
  auto t = training_from(cat, 20, 80, 9);
  DBranchConfig cfg;
  cfg.variant = Variant::Ts;
  cfg.p = 3;
  DBranchEnsemble ens;
  auto res = process_query(iset, t, cfg, {}, &ens);
  REQUIRE(ens.size() == 1);
  CHECK(res.positive_ids == scan_oracle(cat, ens.models()[0]));
  CHECK(res.per_branch.size() == ens.models()[0].size());
}

TEST_CASE("query configuration errors") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(500, 4, 0.0, 5, false);
  auto iset = preprocess(cat, {3, 2, 50, LeafLayout::Ts, 1}, dir.path());
  auto t = training_from(cat, 10, 40, 2);

  DBranchConfig ta;
  ta.variant = Variant::Ta;
  CHECK_THROWS_AS(process_query(iset, t, ta), ConfigError);

  DBranchConfig other;
  other.subsets = sample_subsets(4, 3, 2, 999);
  if (!(other.subsets == iset.manifest().subsets)) CHECK_THROWS_AS(process_query(iset, t, other), ConfigError);

  LabeledDataset narrow(3, {0, 0, 0}, {1}, {1});
  CHECK_THROWS_AS(process_query(iset, narrow, DBranchConfig{}), ConfigError);

  // A branch whose box matches nothing gives an empty answer.
  Box far(4);
  far.set_bounds(iset.manifest().subsets[0][0], 5.0, 6.0);
  std::vector<DecisionBranch> b{{far, iset.manifest().subsets[0], DecisionTree::leaf(1)}};
  DBranchEnsemble one({DecisionBranchModel(4, Variant::B, b)});
  auto res = answer_query(iset, one);
  CHECK(res.positive_ids.empty());
  CHECK(res.per_branch.at(0).candidates == 0);
}

TEST_CASE("scan oracle edge cases") {
  LabeledDataset empty = LabeledDataset::unlabeled(2, {}, {});
  DecisionBranchModel none(2, Variant::B, {});
  CHECK(scan_oracle(empty, none).empty());
  auto cat = testdata::uniform(100, 2, 0.0, 1, false);
  CHECK(scan_oracle(cat, none).empty());
}

TEST_CASE("csv round trip and errors") {
  testutil::TempDir dir;
  CatalogTable t;
  t.columns = {"a", "b"};
  t.dims = 2;
  t.features = {0.1, 1.0 / 3.0, -2.5e-7, 1e12};
  t.ids = {7, 9};
  t.labels = {2, 0};
  write_catalog_csv(dir.path() / "x.csv", t);
  auto back = read_catalog_csv(dir.path() / "x.csv");
  CHECK(back.columns == t.columns);
  CHECK(back.ids == t.ids);
  CHECK(back.labels == t.labels);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(back.features[i] - t.features[i]) <= 1e-12 * std::max(1.0, std::abs(t.features[i])));

  write_packed(dir.path() / "p", back);
  auto packed = load_catalog(dir.path() / "p.json");
  CHECK(packed.features == back.features);
  CHECK(packed.ids == back.ids);
  CHECK(packed.labels == back.labels);

  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream(dir.path() / name) << body;
    return dir.path() / name;
  };
  CHECK_THROWS_AS(read_catalog_csv(write("e.csv", "")), DomainError);
  CHECK_THROWS_WITH_AS(read_catalog_csv(write("m.csv", "id,a\n1,2\n2,x\n")), doctest::Contains("line 3"),
                       DomainError);
  CHECK_THROWS_WITH_AS(read_catalog_csv(write("f.csv", "a,b\n1,2\n3\n")), doctest::Contains("line 3"),
                       DomainError);
  CHECK_THROWS_AS(read_catalog_csv(write("h.csv", "id\n1\n")), DomainError);
  CHECK_THROWS_AS(read_catalog_csv(dir.path() / "absent.csv"), StorageError);

  auto noid = read_catalog_csv(write("n.csv", "a,b\n1,2\n3,4\n"));
  CHECK(noid.ids == std::vector<InstanceId>{0, 1});
  CHECK_FALSE(noid.has_labels());

  std::filesystem::resize_file(dir.path() / "p.f64", 8);
  CHECK_THROWS_AS(read_packed(dir.path() / "p"), StorageError);
}

TEST_CASE("one-vs-all view") {
  CatalogTable t;
  t.columns = {"a"};
  t.dims = 1;
  t.features = {1, 2, 3};
  t.ids = {1, 2, 3};
  t.labels = {0, 2, 2};
  auto ds = to_binary_dataset(t, 2);
  CHECK(ds.count_label(1) == 2);
  auto cat = to_catalog_dataset(std::move(t));
  CHECK_FALSE(cat.has_labels());
  CHECK(cat.rows() == 3);
}
