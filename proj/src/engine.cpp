#include "sbc/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include <json.hpp>

#include "sbc/catalog.hpp"

namespace sbc {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// C(n, r), saturating at `cap`.
std::size_t binomial_capped(std::size_t n, std::size_t r, std::size_t cap) {
  r = std::min(r, n - r);
  double c = 1.0;
  for (std::size_t i = 1; i <= r; ++i) {
    c = c * static_cast<double>(n - r + i) / static_cast<double>(i);
    if (c >= static_cast<double>(cap)) return cap;
  }
  return static_cast<std::size_t>(c + 0.5);
}

std::vector<FeatureIndex> random_subset(std::size_t d, std::size_t size, std::mt19937_64& rng) {
  std::vector<FeatureIndex> all(d);
  std::iota(all.begin(), all.end(), FeatureIndex{0});
  for (std::size_t i = 0; i < size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, d - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(size);
  std::sort(all.begin(), all.end());
  return all;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::vector<FeatureSubset> sample_subsets(std::size_t d, std::size_t k, std::size_t subset_size,
                                          std::uint64_t seed) {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (subset_size < 1 || subset_size > d) {
    throw ConfigError("D must be in [1, d=" + std::to_string(d) + "], got " + std::to_string(subset_size));
  }
  std::mt19937_64 rng(seed);
  const bool distinct = binomial_capped(d, subset_size, k) >= k;
  std::set<std::vector<FeatureIndex>> seen;
  std::vector<FeatureSubset> out;
  while (out.size() < k) {
    auto dims = random_subset(d, subset_size, rng);
    if (distinct && !seen.insert(dims).second) continue;
    out.emplace_back(std::move(dims), d);
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  nlohmann::json subsets = nlohmann::json::array();
  for (const auto& f : m.subsets) subsets.push_back(std::vector<FeatureIndex>(f.dims().begin(), f.dims().end()));
  nlohmann::json j = {
      {"format", "sbc-index-set"},
      {"version", 1},
      {"d", m.d},
      {"k", m.k},
      {"D", m.subset_size},
      {"leaf_size", m.leaf_size},
      {"layout", std::string(to_string(m.layout))},
      {"seed", m.seed},
      {"subsets", subsets},
      {"catalog", {{"N", m.n}, {"fingerprint", hex64(m.fingerprint)}}},
  };
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw StorageError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw StorageError("write failed: " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw StorageError("cannot open " + path.string());
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(is);
    if (j.value("format", "") != "sbc-index-set") throw StorageError(path.string() + " is not an index manifest");
    m.d = j.at("d").get<std::size_t>();
    m.k = j.at("k").get<std::size_t>();
    m.subset_size = j.at("D").get<std::size_t>();
    m.leaf_size = j.at("leaf_size").get<std::size_t>();
    m.layout = parse_layout(j.at("layout").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("subsets")) m.subsets.emplace_back(s.get<std::vector<FeatureIndex>>(), m.d);
    m.n = j.at("catalog").at("N").get<std::size_t>();
    m.fingerprint = std::stoull(j.at("catalog").at("fingerprint").get<std::string>(), nullptr, 16);
  } catch (const nlohmann::json::exception& e) {
    throw StorageError(path.string() + ": " + e.what());
  } catch (const std::logic_error& e) {
    throw StorageError(path.string() + ": " + e.what());
  }
  if (m.subsets.size() != m.k) throw StorageError(path.string() + ": subset count differs from k");
  return m;
}

IndexSet preprocess(const LabeledDataset& catalog, const PreprocessConfig& cfg,
                    const std::filesystem::path& out_dir) {
  if (catalog.empty()) throw ConfigError("catalog is empty");
  if (cfg.leaf_size < 1) throw ConfigError("leaf size must be at least 1");
  IndexSet set;
  set.manifest_.subsets = sample_subsets(catalog.dims(), cfg.k, cfg.subset_size, cfg.seed);

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw StorageError("cannot create " + out_dir.string() + ": " + ec.message());

  Manifest& m = set.manifest_;
  m.d = catalog.dims();
  m.k = cfg.k;
  m.subset_size = cfg.subset_size;
  m.leaf_size = cfg.leaf_size;
  m.layout = cfg.layout;
  m.seed = cfg.seed;
  m.n = catalog.rows();
  m.fingerprint = fingerprint(catalog);
  for (std::size_t i = 0; i < m.subsets.size(); ++i) {
    set.indexes_.push_back(build_index(catalog, m.subsets[i], {cfg.leaf_size, cfg.layout},
                                       out_dir / ("idx_" + std::to_string(i))));
  }
  write_manifest(out_dir / "manifest.json", m);
  set.dir_ = out_dir;
  return set;
}

IndexSet IndexSet::open(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw StorageError("index directory " + dir.string() + " not found");
  IndexSet set;
  set.manifest_ = read_manifest(dir / "manifest.json");
  for (std::size_t i = 0; i < set.manifest_.k; ++i) {
    KdIndex idx = KdIndex::open(dir / ("idx_" + std::to_string(i)));
    if (!(idx.subset() == set.manifest_.subsets[i]) || idx.size() != set.manifest_.n ||
        idx.catalog_dims() != set.manifest_.d) {
      throw StorageError("index " + std::to_string(i) + " does not match the manifest");
    }
    set.indexes_.push_back(std::move(idx));
  }
  set.dir_ = dir;
  return set;
}

const KdIndex& IndexSet::index_for(const FeatureSubset& subset) const {
  for (const KdIndex& idx : indexes_) {
    if (idx.subset() == subset) return idx;
  }
  throw ConfigError("no index over feature subset " + subset.to_string());
}

void IndexSet::drop_page_cache() const {
  for (const KdIndex& idx : indexes_) idx.drop_page_cache();
}

namespace {

struct BranchOutput {
  std::vector<InstanceId> positives;
  BranchCounts counts;
  QueryStats stats;
};

BranchOutput run_branch(const KdIndex& idx, const DecisionBranch& b) {
  BranchOutput out;
  const RangeResult res = idx.range_query(b.box);
  out.stats = res.stats;
  out.counts.candidates = res.size();
  const bool ts_layout = idx.layout() == LeafLayout::Ts;
  for (std::size_t i = 0; i < res.size(); ++i) {
    const auto rec = res.record(i);
    const Label y = ts_layout ? b.branch.predict_with([&](FeatureIndex dim) { return rec[b.subset.position_of(dim)]; })
                              : b.branch.predict(rec);
    if (y == 1) out.positives.push_back(res.ids[i]);
  }
  out.counts.positives = out.positives.size();
  return out;
}

}  // namespace

QueryResult answer_query(const IndexSet& iset, const DBranchEnsemble& ens, std::size_t threads) {
  const auto start = Clock::now();
  struct Task {
    std::size_t model;
    const DecisionBranch* branch;
    const KdIndex* index;
  };
  std::vector<Task> tasks;
  for (std::size_t m = 0; m < ens.size(); ++m) {
    const DecisionBranchModel& model = ens.models()[m];
    if (model.dims() != iset.manifest().d) throw ConfigError("model dimensionality differs from the catalog");
    for (const DecisionBranch& b : model.branches()) {
      const KdIndex& idx = iset.index_for(b.subset);
      if (idx.layout() == LeafLayout::Ts) {
        for (FeatureIndex dim : b.branch.split_dims()) {
          if (!b.subset.contains(dim)) {
            throw ConfigError("branch tree uses feature " + std::to_string(dim) +
                              " but the index leaves hold only subset " + b.subset.to_string() +
                              "; build the indexes with the Ta layout");
          }
        }
      }
      tasks.push_back({m, &b, &idx});
    }
  }

  std::vector<BranchOutput> outputs(tasks.size());
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(tasks.size(), 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) outputs[i] = run_branch(*tasks[i].index, *tasks[i].branch);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < tasks.size(); i += threads) {
              outputs[i] = run_branch(*tasks[i].index, *tasks[i].branch);
            }
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  QueryResult result;
  // Per model: union over its branches. Then a membership vote across models.
  std::vector<std::vector<InstanceId>> per_model(ens.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    auto& ids = per_model[tasks[i].model];
    ids.insert(ids.end(), outputs[i].positives.begin(), outputs[i].positives.end());
    result.per_branch.push_back(outputs[i].counts);
    result.stats.leaves_visited += outputs[i].stats.leaves_visited;
    result.stats.bytes_read += outputs[i].stats.bytes_read;
  }
  std::vector<InstanceId> votes;
  for (auto& ids : per_model) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    votes.insert(votes.end(), ids.begin(), ids.end());
  }
  std::sort(votes.begin(), votes.end());
  for (std::size_t i = 0; i < votes.size();) {
    std::size_t j = i;
    while (j < votes.size() && votes[j] == votes[i]) ++j;
    if (2 * (j - i) > ens.size()) result.positive_ids.push_back(votes[i]);
    i = j;
  }
  result.timings.t_query = result.timings.t_total = seconds_since(start);
  return result;
}

QueryResult process_query(const IndexSet& iset, const LabeledDataset& t, DBranchConfig cfg,
                          const QueryOptions& opts, DBranchEnsemble* fitted) {
  const auto start = Clock::now();
  if (t.dims() != iset.manifest().d) {
    throw ConfigError("training set has " + std::to_string(t.dims()) + " features, catalog has " +
                      std::to_string(iset.manifest().d));
  }
  if (cfg.subsets.empty()) {
    cfg.subsets = iset.manifest().subsets;
  } else if (cfg.subsets != iset.manifest().subsets) {
    throw ConfigError("model feature subsets differ from the index manifest");
  }
  if (cfg.variant == Variant::Ta && iset.manifest().layout != LeafLayout::Ta) {
    throw ConfigError("the Ta variant needs indexes built with the Ta layout");
  }

  DBranchEnsemble ens = ensemble_fit(t, cfg, opts.members, opts.threads);
  const double t_train = seconds_since(start);

  QueryResult result = answer_query(iset, ens, opts.threads);
  result.timings.t_train = t_train;
  result.timings.t_total = seconds_since(start);
  if (fitted) *fitted = std::move(ens);
  return result;
}

std::vector<InstanceId> scan_oracle(const LabeledDataset& catalog, const DecisionBranchModel& model) {
  std::vector<InstanceId> out;
  for (std::size_t i = 0; i < catalog.rows(); ++i) {
    if (model.predict(catalog.row(i)) == 1) out.push_back(catalog.id(i));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<InstanceId> scan_oracle(const LabeledDataset& catalog, const DBranchEnsemble& ens) {
  std::vector<InstanceId> out;
  for (std::size_t i = 0; i < catalog.rows(); ++i) {
    if (ens.predict(catalog.row(i)) == 1) out.push_back(catalog.id(i));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace sbc
