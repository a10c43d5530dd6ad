#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "sbc/kdindex.hpp"
#include "test_util.hpp"

using namespace sbc;

namespace {

std::set<InstanceId> ids_of(const RangeResult& r) { return {r.ids.begin(), r.ids.end()}; }

// Leaves and height of a tree that halves c records (larger half left)
// until a part holds at most `leaf` of them.
std::pair<std::size_t, std::size_t> shape(std::size_t c, std::size_t leaf) {
  if (c <= leaf) return {1, 0};
  auto [ll, lh] = shape((c + 1) / 2, leaf);
  auto [rl, rh] = shape(c / 2, leaf);
  return {ll + rl, 1 + std::max(lh, rh)};
}

}  // namespace

TEST_CASE("layout names") {
  CHECK(parse_layout("ta") == LeafLayout::Ta);
  CHECK(to_string(LeafLayout::Ts) == "Ts");
  CHECK_THROWS_AS(parse_layout("zz"), ConfigError);
}

TEST_CASE("range queries match a full scan") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(3000, 5, 0.0, 21, false);
  FeatureSubset f({4, 1, 2}, 5);
  for (LeafLayout layout : {LeafLayout::Ts, LeafLayout::Ta}) {
    auto idx = build_index(cat, f, {64, layout}, dir.path() / ("i" + std::string(to_string(layout))));
    CHECK(idx.size() == 3000);
    CHECK(idx.record_width() == (layout == LeafLayout::Ts ? 3u : 5u));
    std::mt19937_64 rng(5);
    for (int q = 0; q < 100; ++q) {
      Box box = testdata::random_box(rng, 5, f.dims());
      auto res = idx.range_query(box);
      CHECK(ids_of(res) == oracle::range_filter(cat, box));
      CHECK(res.ids.size() == ids_of(res).size());
      CHECK(res.stats.leaves_visited <= idx.leaf_count());
    }
  }
}

TEST_CASE("range queries are exact with heavy ties") {
  testutil::TempDir dir;
  // Five levels per dimension: many equal keys straddle split positions.
  auto cat = testdata::quantized(2000, 3, 5, 8);
  FeatureSubset f({0, 1, 2}, 3);
  auto idx = build_index(cat, f, {7, LeafLayout::Ts}, dir.path() / "q");
  std::vector<double> cuts{-0.5, 0.0, 0.5, 1.0, 2.0, 2.5, 3.0, 4.0, 4.5};
  std::mt19937_64 rng(2);
  for (int q = 0; q < 200; ++q) {
    Box box(3);
    for (std::size_t i = 0; i < 3; ++i) {
      double a = cuts[rng() % cuts.size()], b = cuts[rng() % cuts.size()];
      if (a > b) std::swap(a, b);
      box.set_bounds(i, a, b);
    }
    CHECK(ids_of(idx.range_query(box)) == oracle::range_filter(cat, box));
  }
}

TEST_CASE("returned records carry the right coordinates") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(500, 4, 0.0, 3, false);
  FeatureSubset f({3, 0}, 4);
  std::map<InstanceId, std::size_t> row_of;
  for (std::size_t i = 0; i < cat.rows(); ++i) row_of[cat.id(i)] = i;

  auto ts = build_index(cat, f, {16, LeafLayout::Ts}, dir.path() / "ts");
  auto r1 = ts.range_query(Box(4));
  CHECK(r1.size() == 500);
  for (std::size_t i = 0; i < r1.size(); ++i) {
    const auto row = cat.row(row_of.at(r1.ids[i]));
    CHECK(r1.record(i)[0] == row[3]);
    CHECK(r1.record(i)[1] == row[0]);
  }

  auto ta = build_index(cat, f, {16, LeafLayout::Ta}, dir.path() / "ta");
  auto r2 = ta.range_query(Box(4));
  for (std::size_t i = 0; i < r2.size(); ++i) {
    const auto row = cat.row(row_of.at(r2.ids[i]));
    for (std::size_t j = 0; j < 4; ++j) CHECK(r2.record(i)[j] == row[j]);
  }
}

TEST_CASE("bounds outside the subset are rejected") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(100, 3, 0.0, 1, false);
  auto idx = build_index(cat, FeatureSubset({0, 1}, 3), {}, dir.path() / "x");
  Box box(3);
  box.set_bounds(2, 0.1, 0.2);
  CHECK_THROWS_AS(idx.range_query(box), ConfigError);
  CHECK_THROWS_AS(idx.range_query(Box(2)), DomainError);
}

TEST_CASE("empty slab visits no leaves") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(1000, 2, 0.0, 1, false);
  auto idx = build_index(cat, FeatureSubset({0, 1}, 2), {32, LeafLayout::Ts}, dir.path() / "e");
  Box box(2);
  box.set_bounds(0, 0.5, 0.5);
  auto r = idx.range_query(box);
  CHECK(r.size() == 0);
  CHECK(r.stats.leaves_visited == 0);
}

TEST_CASE("leaf budget caps visited leaves") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(4000, 2, 0.0, 4, false);
  auto idx = build_index(cat, FeatureSubset({0, 1}, 2), {50, LeafLayout::Ts}, dir.path() / "b");
  RangeQueryOptions opts;
  opts.max_leaves = 3;
  auto r = idx.range_query(Box(2), opts);
  CHECK(r.stats.leaves_visited == 3);
  CHECK(r.size() <= 150);
}

TEST_CASE("tree shape follows n and leaf size") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(1000, 2, 0.0, 6, false);
  FeatureSubset f({0, 1}, 2);
  CHECK(shape(1000, 100).first == 16);
  for (std::size_t leaf : {1000u, 999u, 250u, 100u, 1u}) {
    auto idx = build_index(cat, f, {leaf, LeafLayout::Ts}, dir.path() / ("s" + std::to_string(leaf)));
    const auto [leaves, height] = shape(1000, leaf);
    CHECK(idx.depth() == height);
    CHECK(idx.leaf_count() == leaves);
    std::size_t total = 0;
    for (const auto& e : idx.leaf_directory()) {
      CHECK(e.count <= leaf);
      total += e.count;
    }
    CHECK(total == 1000);
    CHECK(idx.inner_memory_bytes() ==
          idx.inner_nodes().size() * sizeof(KdIndex::InnerNode) +
              idx.leaf_count() * sizeof(KdIndex::LeafEntry));
  }
  CHECK_THROWS_AS(build_index(cat, f, {0, LeafLayout::Ts}, dir.path() / "z"), ConfigError);
}

TEST_CASE("split dimension cycles through the subset by depth") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(800, 4, 0.0, 7, false);
  FeatureSubset f({2, 0, 3}, 4);
  auto idx = build_index(cat, f, {10, LeafLayout::Ts}, dir.path() / "c");
  // Preorder walk keeping depth.
  std::vector<std::pair<std::int32_t, std::size_t>> stack{{0, 0}};
  while (!stack.empty()) {
    auto [node, depth] = stack.back();
    stack.pop_back();
    const auto& n = idx.inner_nodes()[static_cast<std::size_t>(node)];
    CHECK(n.split_pos == depth % 3);
    if (n.left >= 0) stack.push_back({n.left, depth + 1});
    if (n.right >= 0) stack.push_back({n.right, depth + 1});
  }
}

TEST_CASE("index reopens from disk with the same answers") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(1500, 3, 0.0, 9, false);
  FeatureSubset f({1, 2}, 3);
  std::vector<RangeResult> before;
  std::mt19937_64 rng(1);
  std::vector<Box> boxes;
  for (int i = 0; i < 20; ++i) boxes.push_back(testdata::random_box(rng, 3, f.dims()));
  {
    auto idx = build_index(cat, f, {40, LeafLayout::Ta}, dir.path() / "r");
    for (const auto& b : boxes) before.push_back(idx.range_query(b));
  }
  auto idx = KdIndex::open(dir.path() / "r");
  CHECK(idx.subset() == f);
  CHECK(idx.layout() == LeafLayout::Ta);
  CHECK(idx.leaf_size() == 40);
  CHECK(idx.catalog_dims() == 3);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    auto r = idx.range_query(boxes[i]);
    CHECK(r.ids == before[i].ids);
    CHECK(r.coords == before[i].coords);
  }
  idx.drop_page_cache();
  CHECK(idx.range_query(boxes[0]).ids == before[0].ids);
}

TEST_CASE("opening broken files fails cleanly") {
  testutil::TempDir dir;
  CHECK_THROWS_AS(KdIndex::open(dir.path() / "missing"), StorageError);
  {
    std::ofstream(tree_path(dir.path() / "bad"), std::ios::binary) << "NOPE";
    std::ofstream(leaves_path(dir.path() / "bad"), std::ios::binary) << "";
  }
  CHECK_THROWS_AS(KdIndex::open(dir.path() / "bad"), StorageError);

  auto cat = testdata::uniform(200, 2, 0.0, 1, false);
  build_index(cat, FeatureSubset({0, 1}, 2), {20, LeafLayout::Ts}, dir.path() / "t");
  std::filesystem::resize_file(leaves_path(dir.path() / "t"), 100);
  CHECK_THROWS_AS(KdIndex::open(dir.path() / "t"), StorageError);
}

TEST_CASE("knn matches a full sort") {
  testutil::TempDir dir;
  auto cat = testdata::uniform(2000, 4, 0.0, 13, false);
  FeatureSubset f({0, 3, 2}, 4);
  auto idx = build_index(cat, f, {25, LeafLayout::Ts}, dir.path() / "k");
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.2, 1.2);
  for (int q = 0; q < 30; ++q) {
    std::vector<double> p{u(rng), u(rng), u(rng)};
    const std::size_t k = 1 + rng() % 30;
    QueryStats stats;
    auto got = idx.knn_query(p, k, &stats);
    auto want = oracle::knn(cat, f, p, k);
    REQUIRE(got.size() == k);
    for (std::size_t i = 0; i < k; ++i) CHECK(got[i].id == want[i]);
    for (std::size_t i = 1; i < k; ++i) CHECK(got[i - 1].distance <= got[i].distance);
    CHECK(stats.leaves_visited < idx.leaf_count());
  }
  std::vector<double> p{0.5, 0.5, 0.5};
  CHECK_THROWS_AS(idx.knn_query(p, 0), DomainError);
  CHECK_THROWS_AS(idx.knn_query(p, 2001), DomainError);
}

TEST_CASE("knn breaks distance ties by id") {
  testutil::TempDir dir;
  auto cat = testdata::quantized(500, 2, 3, 4);
  FeatureSubset f({0, 1}, 2);
  auto idx = build_index(cat, f, {8, LeafLayout::Ts}, dir.path() / "kt");
  std::vector<double> p{1.0, 1.0};
  auto got = idx.knn_query(p, 60);
  auto want = oracle::knn(cat, f, p, 60);
  for (std::size_t i = 0; i < 60; ++i) CHECK(got[i].id == want[i]);
}
