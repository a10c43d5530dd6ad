#include "sbc/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <thread>
#include <unistd.h>

#include <json.hpp>

#include "sbc/engine.hpp"
#include "sbc/tree.hpp"

#ifndef SBC_BUNDLED_DATA_DIR
#define SBC_BUNDLED_DATA_DIR ""
#endif

namespace sbc::bench {

namespace {

using Clock = std::chrono::steady_clock;
using json = nlohmann::json;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
// exception after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

std::filesystem::path scratch_root(const std::filesystem::path& configured) {
  static std::atomic<std::uint64_t> counter{0};
  const auto base = configured.empty() ? std::filesystem::temp_directory_path() : configured;
  return base / ("sbc-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
}

struct ScratchDir {
  std::filesystem::path path;
  explicit ScratchDir(const std::filesystem::path& configured) : path(scratch_root(configured)) {
    std::filesystem::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
};

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pstd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

// ---- dataset files

const std::vector<std::string>& dataset_names() {
  static const std::vector<std::string> names{"iris", "satimage", "letter", "covtype", "mnist", "senseit"};
  return names;
}

std::int32_t parse_class(std::string_view f, std::size_t line_no, const std::filesystem::path& path) {
  if (f.size() == 1 && std::isalpha(static_cast<unsigned char>(f[0]))) {
    return std::toupper(static_cast<unsigned char>(f[0])) - 'A';
  }
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(f), &used);
    if (used == f.size() && v == std::floor(v)) return static_cast<std::int32_t>(v);
  } catch (const std::exception&) {
  }
  throw DomainError(path.string() + ": line " + std::to_string(line_no) + ": bad class '" + std::string(f) + "'");
}

// Headerless numeric rows (UCI style), comma or whitespace separated, with
// the class in the first or last field.
void read_uci(const std::filesystem::path& path, bool label_first, CatalogTable& t) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    std::vector<std::string> f;
    for (std::string tok; ss >> tok;) f.push_back(tok);
    if (f.empty()) continue;
    if (f.size() < 2) throw DomainError(path.string() + ": line " + std::to_string(line_no) + ": too few fields");
    const std::size_t d = f.size() - 1;
    if (t.dims == 0) t.dims = d;
    if (d != t.dims) {
      throw DomainError(path.string() + ": line " + std::to_string(line_no) + ": expected " +
                        std::to_string(t.dims + 1) + " fields");
    }
    const std::size_t label_at = label_first ? 0 : d;
    for (std::size_t j = 0; j <= d; ++j) {
      if (j == label_at) continue;
      try {
        t.features.push_back(std::stod(f[j]));
      } catch (const std::exception&) {
        throw DomainError(path.string() + ": line " + std::to_string(line_no) + ": bad number '" + f[j] + "'");
      }
    }
    t.labels.push_back(parse_class(f[label_at], line_no, path));
    t.ids.push_back(t.ids.size());
  }
}

struct UciSource {
  std::vector<std::string> files;
  bool label_first = false;
};

std::optional<UciSource> uci_source(const std::string& name) {
  if (name == "satimage") return UciSource{{"sat.trn", "sat.tst"}, false};
  if (name == "letter") return UciSource{{"letter-recognition.data"}, true};
  if (name == "covtype") return UciSource{{"covtype.data"}, false};
  return std::nullopt;
}

}  // namespace

double precision(std::size_t tp, std::size_t fp) noexcept {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

double recall(std::size_t tp, std::size_t fn) noexcept {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

double f1_score(std::size_t tp, std::size_t fp, std::size_t fn) noexcept {
  const double p = precision(tp, fp), r = recall(tp, fn);
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

Confusion confusion(const std::vector<InstanceId>& predicted_sorted, const LabeledDataset& truth) {
  Confusion c;
  for (std::size_t i = 0; i < truth.rows(); ++i) {
    const bool predicted = std::binary_search(predicted_sorted.begin(), predicted_sorted.end(), truth.id(i));
    if (truth.label(i) == 1) predicted ? ++c.tp : ++c.fn;
  }
  // Ids outside `truth` count as false positives too.
  c.fp = predicted_sorted.size() - c.tp;
  return c;
}

Confusion confusion(const std::vector<Label>& predicted, const LabeledDataset& truth) {
  if (predicted.size() != truth.rows()) throw DomainError("prediction count differs from row count");
  Confusion c;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] == 1 && truth.label(i) == 1) ++c.tp;
    else if (predicted[i] == 1) ++c.fp;
    else if (truth.label(i) == 1) ++c.fn;
  }
  return c;
}

// ---------------------------------------------------------------- datasets

std::vector<std::string> known_datasets() { return dataset_names(); }

CatalogTable load_dataset(const std::string& name) {
  const auto& names = dataset_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    std::string list;
    for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown dataset '" + name + "'; known datasets: " + list);
  }
  std::vector<std::filesystem::path> dirs;
  if (const char* env = std::getenv("SBC_DATA_DIR"); env && *env) dirs.emplace_back(env);
  if (*SBC_BUNDLED_DATA_DIR) dirs.emplace_back(SBC_BUNDLED_DATA_DIR);

  std::string tried;
  for (const auto& dir : dirs) {
    const auto csv = dir / (name + ".csv");
    tried += " " + csv.string();
    if (std::filesystem::exists(csv)) {
      auto t = read_catalog_csv(csv);
      if (!t.has_labels()) throw DomainError(csv.string() + " has no label column");
      return t;
    }
    if (auto src = uci_source(name)) {
      bool all = true;
      for (const auto& f : src->files) {
        tried += " " + (dir / f).string();
        all = all && std::filesystem::exists(dir / f);
      }
      if (!all) continue;
      CatalogTable t;
      for (const auto& f : src->files) read_uci(dir / f, src->label_first, t);
      for (std::size_t j = 0; j < t.dims; ++j) t.columns.push_back("f" + std::to_string(j));
      return t;
    }
  }
  throw StorageError("dataset '" + name + "' not found (set SBC_DATA_DIR); looked for:" + tried);
}

// ---------------------------------------------------------------- tasks

std::vector<BenchTask> make_tasks(const CatalogTable& data, const std::string& name, std::size_t n_pos,
                                  const std::vector<std::uint64_t>& seeds, std::vector<std::string>* skipped) {
  if (!data.has_labels()) throw DomainError("dataset '" + name + "' has no labels");
  if (n_pos == 0) throw ConfigError("n_pos must be positive");
  std::map<std::int32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.rows(); ++i) by_class[data.labels[i]].push_back(i);

  std::vector<BenchTask> tasks;
  for (std::uint64_t seed : seeds) {
    for (const auto& [cp, cp_rows] : by_class) {
      // Validation and test both need a positive.
      if (cp_rows.size() < n_pos + 2) {
        if (skipped) {
          skipped->push_back(name + " class " + std::to_string(cp) + " seed " + std::to_string(seed) + ": " +
                             std::to_string(cp_rows.size()) + " rows, need " + std::to_string(n_pos + 2));
        }
        continue;
      }
      std::mt19937_64 rng(mix(seed, static_cast<std::uint64_t>(static_cast<std::uint32_t>(cp))));
      BenchTask task;
      task.dataset = name;
      task.positive_class = cp;
      task.n_pos_train = n_pos;
      task.base_seed = seed;
      task.seed = mix(seed, 0x5eed ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(cp)));
      std::vector<std::size_t> rest;
      for (const auto& [c, rows] : by_class) {
        std::vector<std::size_t> shuffled = rows;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        std::size_t take = n_pos;
        if (c != cp) {
          take = static_cast<std::size_t>(std::llround(static_cast<double>(n_pos) /
                                                         static_cast<double>(cp_rows.size()) *
                                                         static_cast<double>(rows.size())));
          take = std::min(take, rows.size());
        }
        task.train.insert(task.train.end(), shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(take));
        rest.insert(rest.end(), shuffled.begin() + static_cast<std::ptrdiff_t>(take), shuffled.end());
      }
      // Alternating assignment keeps both halves stratified; an odd row goes to test.
      for (std::size_t i = 0; i < rest.size(); ++i) (i % 2 == 0 ? task.test : task.validation).push_back(rest[i]);
      std::sort(task.train.begin(), task.train.end());
      std::sort(task.validation.begin(), task.validation.end());
      std::sort(task.test.begin(), task.test.end());
      tasks.push_back(std::move(task));
    }
  }
  return tasks;
}

LabeledDataset task_rows(const CatalogTable& data, const std::vector<std::size_t>& rows,
                         std::int32_t positive_class) {
  std::vector<double> x;
  x.reserve(rows.size() * data.dims);
  std::vector<Label> y;
  std::vector<InstanceId> ids;
  for (std::size_t r : rows) {
    x.insert(x.end(), data.features.begin() + static_cast<std::ptrdiff_t>(r * data.dims),
             data.features.begin() + static_cast<std::ptrdiff_t>((r + 1) * data.dims));
    y.push_back(data.labels[r] == positive_class ? 1 : 0);
    ids.push_back(data.ids[r]);
  }
  return LabeledDataset(data.dims, std::move(x), std::move(y), std::move(ids));
}

// ---------------------------------------------------------------- models

std::string ModelSpec::name() const {
  std::string base;
  switch (kind) {
    case ModelKind::DBranch: base = "DBranch"; break;
    case ModelKind::DBEns: base = "DBEns"; break;
    case ModelKind::DTree: base = "DTree"; break;
    case ModelKind::RForest: base = "RForest"; break;
    case ModelKind::ExTrees: base = "ExTrees"; break;
    case ModelKind::NNB: base = "NNB"; break;
  }
  if (kind == ModelKind::DBranch || kind == ModelKind::DBEns) {
    return base + "[" + std::string(to_string(variant)) + "," + std::to_string(subset_size.value_or(0)) + "]";
  }
  if (subset_size) return base + "[" + std::to_string(*subset_size) + "]";
  return base;
}

ModelSpec ModelSpec::parse(const std::string& name) {
  static const std::regex branch(R"(^(DBranch|DBEns)\[(B|Ts|Ta),\s*([0-9]+)\]$)");
  static const std::regex other(R"(^(DTree|RForest|ExTrees|NNB)(?:\[([0-9]+)\])?$)");
  std::smatch m;
  ModelSpec s;
  if (std::regex_match(name, m, branch)) {
    s.kind = m[1] == "DBranch" ? ModelKind::DBranch : ModelKind::DBEns;
    s.variant = parse_variant(m[2].str());
    s.subset_size = std::stoul(m[3].str());
  } else if (std::regex_match(name, m, other)) {
    const std::string k = m[1];
    s.kind = k == "DTree" ? ModelKind::DTree : k == "RForest" ? ModelKind::RForest
           : k == "ExTrees" ? ModelKind::ExTrees : ModelKind::NNB;
    if (m[2].matched) s.subset_size = std::stoul(m[2].str());
    if (s.kind == ModelKind::NNB && s.subset_size) throw ConfigError("NNB takes no subset size: " + name);
  } else {
    throw ConfigError("unknown model '" + name +
                      "'; expected DBranch[V,D], DBEns[V,D], DTree[D], RForest[D], ExTrees[D] or NNB");
  }
  if (s.subset_size && *s.subset_size == 0) throw ConfigError("subset size must be positive: " + name);
  return s;
}

BenchConfig BenchConfig::from_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw StorageError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  static const std::set<std::string> keys{"datasets", "models",          "grid",      "seeds",    "n_pos",
                                          "members",  "p_m",             "mu",        "nnb_space", "max_rows",
                                          "threads",  "index_leaf_size", "scratch_dir", "out_dir"};
  BenchConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (!keys.count(k)) throw ConfigError(path.string() + ": unknown key '" + k + "'");
    }
    if (j.contains("datasets")) c.datasets = j["datasets"].get<std::vector<std::string>>();
    if (j.contains("models")) c.models = j["models"].get<std::vector<std::string>>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("n_pos")) c.n_pos = j["n_pos"].get<std::size_t>();
    if (j.contains("members")) c.members = j["members"].get<std::size_t>();
    if (j.contains("p_m")) c.p_m = j["p_m"].get<std::size_t>();
    if (j.contains("mu")) c.mu = j["mu"].get<std::size_t>();
    if (j.contains("nnb_space")) c.nnb_space = j["nnb_space"].get<std::string>();
    if (j.contains("max_rows")) c.max_rows = j["max_rows"].get<std::size_t>();
    if (j.contains("threads")) c.threads = j["threads"].get<std::size_t>();
    if (j.contains("index_leaf_size")) c.index_leaf_size = j["index_leaf_size"].get<std::size_t>();
    if (j.contains("scratch_dir")) c.scratch_dir = j["scratch_dir"].get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
    if (j.contains("grid")) {
      const auto& g = j["grid"];
      for (const auto& [k, v] : g.items()) {
        if (k != "tau" && k != "p" && k != "max_depth") throw ConfigError(path.string() + ": unknown grid key '" + k + "'");
      }
      if (g.contains("tau")) c.grid.tau = g["tau"].get<std::vector<double>>();
      if (g.contains("p")) c.grid.p = g["p"].get<std::vector<std::string>>();
      if (g.contains("max_depth")) c.grid.max_depth = g["max_depth"].get<std::vector<std::size_t>>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  for (const auto& m : c.models) ModelSpec::parse(m);
  return c;
}

namespace {

void validate(const BenchConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("at least one seed is required");
  if (cfg.grid.tau.empty() || cfg.grid.p.empty() || cfg.grid.max_depth.empty()) {
    throw ConfigError("grid entries must not be empty");
  }
  for (double t : cfg.grid.tau) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("tau must be positive");
  }
  for (const auto& p : cfg.grid.p) {
    if (p != "1" && p != "sqrt" && p != "k") throw ConfigError("p grid entries are \"1\", \"sqrt\" or \"k\"");
  }
  if (cfg.members == 0) throw ConfigError("members must be positive");
  if (cfg.index_leaf_size == 0) throw ConfigError("index_leaf_size must be positive");
  if (cfg.nnb_space != "all" && cfg.nnb_space != "subset") throw ConfigError("nnb_space is \"all\" or \"subset\"");
}

std::size_t resolve_p(const std::string& p, std::size_t k) {
  if (p == "1") return 1;
  if (p == "k") return k;
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k)))), 1, k);
}

std::vector<Label> predict_rows(const DBranchEnsemble& ens, const LabeledDataset& data) {
  std::vector<Label> out(data.rows());
  for (std::size_t i = 0; i < data.rows(); ++i) out[i] = ens.predict(data.row(i));
  return out;
}

std::size_t branch_count(const DBranchEnsemble& ens) {
  std::size_t n = 0;
  for (const auto& m : ens.models()) n += m.size();
  return n;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

TaskResult run_branches(const CatalogTable& data, const BenchTask& task, const ModelSpec& spec,
                        const BenchConfig& cfg, const LabeledDataset& train, const LabeledDataset& val,
                        const LabeledDataset& test) {
  const std::size_t d = data.dims;
  const std::size_t D = std::min(*spec.subset_size, d);
  const std::size_t members = spec.kind == ModelKind::DBEns ? cfg.members : 1;
  const std::size_t mu_all = spec.variant == Variant::Ta ? d : D;
  const std::size_t mu = spec.variant == Variant::B ? 1 : (cfg.mu == 0 ? mu_all : std::min(cfg.mu, mu_all));

  struct Choice {
    double f1 = -1.0;
    std::size_t branches = 0;
    std::size_t k = 0, p = 0;
    double tau = 0;
  } best;
  const std::uint64_t subset_seed = mix(task.seed, 0x5b5e7);
  for (double tau : cfg.grid.tau) {
    const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(d) * tau)));
    DBranchConfig dc;
    dc.subsets = sample_subsets(d, k, D, subset_seed);
    dc.variant = spec.variant;
    dc.mu = mu;
    dc.p_m = cfg.p_m;
    dc.rng_seed = task.seed;
    std::set<std::size_t> tried;
    for (const auto& pname : cfg.grid.p) {
      dc.p = resolve_p(pname, k);
      if (!tried.insert(dc.p).second) continue;
      const auto ens = ensemble_fit(train, dc, members, 1);
      const double f1 = confusion(predict_rows(ens, val), val).f1();
      const std::size_t branches = branch_count(ens);
      if (f1 > best.f1 + 1e-12 || (std::abs(f1 - best.f1) <= 1e-12 && branches < best.branches)) {
        best = {f1, branches, k, dc.p, tau};
      }
    }
  }

  // Final evaluation through the index pipeline over the test rows.
  ScratchDir scratch(cfg.scratch_dir);
  auto test_cat = LabeledDataset::unlabeled(d, {test.features().begin(), test.features().end()},
                                            {test.ids().begin(), test.ids().end()});
  const LeafLayout layout = spec.variant == Variant::Ta ? LeafLayout::Ta : LeafLayout::Ts;
  const auto iset = preprocess(test_cat, {best.k, D, cfg.index_leaf_size, layout, subset_seed}, scratch.path);
  DBranchConfig dc;
  dc.variant = spec.variant;
  dc.mu = mu;
  dc.p = best.p;
  dc.p_m = cfg.p_m;
  dc.rng_seed = task.seed;
  DBranchEnsemble ens;
  const auto res = process_query(iset, train, dc, {members, 1}, &ens);

  TaskResult r;
  r.f1 = confusion(res.positive_ids, test).f1();
  r.validation_f1 = best.f1;
  r.t_train = res.timings.t_train;
  r.t_query = res.timings.t_query;
  r.t_total = res.timings.t_total;
  r.branches = branch_count(ens);
  r.pipeline_matches_scan = res.positive_ids == scan_oracle(test_cat, ens);
  r.selected = "tau=" + fmt(best.tau) + " k=" + std::to_string(best.k) + " p=" + std::to_string(best.p) +
               " mu=" + std::to_string(mu) + " D=" + std::to_string(D) + " M=" + std::to_string(members);
  return r;
}

struct Forest {
  std::vector<DecisionTree> trees;
  Label predict(std::span<const double> x) const {
    std::size_t votes = 0;
    for (const auto& t : trees) votes += t.predict(x);
    return 2 * votes > trees.size() ? 1 : 0;
  }
};

TaskResult run_trees(const BenchTask& task, const ModelSpec& spec, const BenchConfig& cfg,
                     const LabeledDataset& train, const LabeledDataset& val, const LabeledDataset& test) {
  const std::size_t d = train.dims();
  const std::size_t pool = spec.subset_size ? std::min(*spec.subset_size, d) : d;
  const bool single = spec.kind == ModelKind::DTree;
  const std::size_t members = single ? 1 : cfg.members;
  const std::size_t mu = single ? pool
                                : std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(pool)))));

  auto fit = [&](std::size_t max_depth) {
    Forest f;
    for (std::size_t m = 0; m < members; ++m) {
      std::mt19937_64 rng(member_seed(task.seed, m));
      TreeConfig tc;
      tc.mu = mu;
      if (max_depth > 0) tc.max_depth = max_depth;
      tc.rng_seed = rng();
      tc.extremely_randomized = spec.kind == ModelKind::ExTrees;
      if (pool < d) {
        std::vector<FeatureIndex> all(d);
        std::iota(all.begin(), all.end(), FeatureIndex{0});
        std::shuffle(all.begin(), all.end(), rng);
        tc.feature_pool.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(pool));
        std::sort(tc.feature_pool.begin(), tc.feature_pool.end());
      }
      std::vector<std::size_t> rows(train.rows());
      if (spec.kind == ModelKind::RForest) {
        std::uniform_int_distribution<std::size_t> pick(0, train.rows() - 1);
        for (auto& r : rows) r = pick(rng);
      } else {
        std::iota(rows.begin(), rows.end(), std::size_t{0});
      }
      f.trees.push_back(top_down_construct(train, rows, tc));
    }
    return f;
  };
  auto predict = [](const Forest& f, const LabeledDataset& data) {
    std::vector<Label> out(data.rows());
    for (std::size_t i = 0; i < data.rows(); ++i) out[i] = f.predict(data.row(i));
    return out;
  };
  auto leaves = [](const Forest& f) {
    std::size_t n = 0;
    for (const auto& t : f.trees) n += t.leaf_count();
    return n;
  };

  double best_f1 = -1.0;
  std::size_t best_depth = 0, best_leaves = 0;
  for (std::size_t depth : cfg.grid.max_depth) {
    const auto f = fit(depth);
    const double f1 = confusion(predict(f, val), val).f1();
    const std::size_t n = leaves(f);
    if (f1 > best_f1 + 1e-12 || (std::abs(f1 - best_f1) <= 1e-12 && n < best_leaves)) {
      best_f1 = f1;
      best_depth = depth;
      best_leaves = n;
    }
  }
  TaskResult r;
  const auto t0 = Clock::now();
  const auto f = fit(best_depth);
  r.t_train = seconds_since(t0);
  const auto t1 = Clock::now();
  const auto pred = predict(f, test);
  r.t_query = seconds_since(t1);
  r.t_total = seconds_since(t0);
  r.f1 = confusion(pred, test).f1();
  r.validation_f1 = best_f1;
  r.branches = leaves(f);
  r.selected = "max_depth=" + (best_depth ? std::to_string(best_depth) : std::string("none")) +
               " mu=" + std::to_string(mu) + " features=" + std::to_string(pool) + " M=" + std::to_string(members);
  return r;
}

}  // namespace

double nnb_evaluate(const LabeledDataset& train, const LabeledDataset& eval, const FeatureSubset& space,
                    const std::filesystem::path& index_dir) {
  const std::size_t K = eval.count_label(1);
  if (K == 0) throw DomainError("NNB needs at least one positive in the evaluation set");
  if (train.dims() != eval.dims()) throw DomainError("training and evaluation dimensionality differ");
  std::optional<KdIndex> index;
  if (!index_dir.empty()) {
    std::filesystem::create_directories(index_dir);
    index.emplace(build_index(eval, space, {64, LeafLayout::Ts}, index_dir / "nnb"));
  }
  std::vector<double> q(space.size());
  std::vector<std::pair<double, InstanceId>> dist(eval.rows());
  double total = 0.0;
  std::size_t queries = 0;
  for (std::size_t i = 0; i < train.rows(); ++i) {
    if (train.label(i) != 1) continue;
    for (std::size_t j = 0; j < space.size(); ++j) q[j] = train.at(i, space[j]);
    std::vector<InstanceId> ids;
    if (index) {
      for (const auto& nb : index->knn_query(q, K)) ids.push_back(nb.id);
    } else {
      for (std::size_t r = 0; r < eval.rows(); ++r) {
        double s = 0;
        for (std::size_t j = 0; j < space.size(); ++j) {
          const double diff = eval.at(r, space[j]) - q[j];
          s += diff * diff;
        }
        dist[r] = {s, eval.id(r)};
      }
      std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(K), dist.end());
      for (std::size_t r = 0; r < K; ++r) ids.push_back(dist[r].second);
    }
    std::sort(ids.begin(), ids.end());
    total += confusion(ids, eval).f1();
    ++queries;
  }
  if (queries == 0) throw DomainError("NNB needs at least one training positive");
  return total / static_cast<double>(queries);
}

TaskResult run_task(const CatalogTable& data, const BenchTask& task, const ModelSpec& spec,
                    const BenchConfig& cfg) {
  validate(cfg);
  const auto train = task_rows(data, task.train, task.positive_class);
  const auto val = task_rows(data, task.validation, task.positive_class);
  const auto test = task_rows(data, task.test, task.positive_class);
  TaskResult r;
  switch (spec.kind) {
    case ModelKind::DBranch:
    case ModelKind::DBEns:
      r = run_branches(data, task, spec, cfg, train, val, test);
      break;
    case ModelKind::DTree:
    case ModelKind::RForest:
    case ModelKind::ExTrees:
      r = run_trees(task, spec, cfg, train, val, test);
      break;
    case ModelKind::NNB: {
      std::vector<FeatureIndex> dims(data.dims);
      std::iota(dims.begin(), dims.end(), FeatureIndex{0});
      if (cfg.nnb_space == "subset") {
        const auto s = sample_subsets(data.dims, 1, std::min<std::size_t>(3, data.dims), task.seed)[0];
        dims.assign(s.dims().begin(), s.dims().end());
      }
      ScratchDir scratch(cfg.scratch_dir);
      const auto t0 = Clock::now();
      r.f1 = nnb_evaluate(train, test, FeatureSubset(dims, data.dims), scratch.path);
      r.t_query = r.t_total = seconds_since(t0);
      r.selected = "K=true positives features=" + std::to_string(dims.size());
      break;
    }
  }
  r.dataset = task.dataset;
  r.model = spec.name();
  r.positive_class = task.positive_class;
  r.seed = task.base_seed;
  return r;
}

std::vector<ModelSummary> summarize(const std::vector<TaskResult>& results) {
  std::vector<ModelSummary> out;
  std::vector<std::vector<const TaskResult*>> groups;
  for (const auto& r : results) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const ModelSummary& s) { return s.dataset == r.dataset && s.model == r.model; });
    if (it == out.end()) {
      out.push_back({r.dataset, r.model});
      groups.emplace_back();
      it = out.end() - 1;
    }
    groups[static_cast<std::size_t>(it - out.begin())].push_back(&r);
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    std::vector<double> f1, tt, tq, tot;
    for (const auto* r : groups[g]) {
      f1.push_back(r->f1);
      tt.push_back(r->t_train);
      tq.push_back(r->t_query);
      tot.push_back(r->t_total);
    }
    out[g].tasks = f1.size();
    out[g].mean_f1 = mean_of(f1);
    out[g].std_f1 = pstd_of(f1);
    out[g].mean_t_train = mean_of(tt);
    out[g].mean_t_query = mean_of(tq);
    out[g].mean_t_total = mean_of(tot);
  }
  return out;
}

BenchReport run_benchmark(const BenchConfig& cfg) {
  validate(cfg);
  std::vector<ModelSpec> specs;
  for (const auto& m : cfg.models) specs.push_back(ModelSpec::parse(m));
  BenchReport report;
  report.config = cfg;
  for (const auto& name : cfg.datasets) {
    CatalogTable data = load_dataset(name);
    if (cfg.max_rows > 0 && data.rows() > cfg.max_rows) {
      std::vector<std::size_t> rows(data.rows());
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      std::mt19937_64 rng(mix(cfg.seeds.front(), data.rows()));
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(cfg.max_rows);
      std::sort(rows.begin(), rows.end());
      CatalogTable sub;
      sub.columns = data.columns;
      sub.dims = data.dims;
      for (std::size_t r : rows) {
        sub.features.insert(sub.features.end(), data.features.begin() + static_cast<std::ptrdiff_t>(r * data.dims),
                            data.features.begin() + static_cast<std::ptrdiff_t>((r + 1) * data.dims));
        sub.ids.push_back(data.ids[r]);
        sub.labels.push_back(data.labels[r]);
      }
      data = std::move(sub);
    }
    const auto tasks = make_tasks(data, name, cfg.n_pos, cfg.seeds, &report.skipped);
    std::vector<TaskResult> results(tasks.size() * specs.size());
    parallel_for(results.size(), cfg.threads, [&](std::size_t i) {
      results[i] = run_task(data, tasks[i % tasks.size()], specs[i / tasks.size()], cfg);
    });
    report.results.insert(report.results.end(), results.begin(), results.end());
  }
  report.summary = summarize(report.results);
  return report;
}

const ModelSummary* BenchReport::find(const std::string& dataset, const std::string& model) const {
  for (const auto& s : summary) {
    if (s.dataset == dataset && s.model == model) return &s;
  }
  return nullptr;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw StorageError("cannot write " + path.string());
  os << std::setprecision(10);
  return os;
}

json config_json(const BenchConfig& c) {
  return {{"datasets", c.datasets},
          {"models", c.models},
          {"grid", {{"tau", c.grid.tau}, {"p", c.grid.p}, {"max_depth", c.grid.max_depth}}},
          {"seeds", c.seeds},
          {"n_pos", c.n_pos},
          {"members", c.members},
          {"p_m", c.p_m},
          {"mu", c.mu},
          {"index_leaf_size", c.index_leaf_size},
          {"nnb_space", c.nnb_space},
          {"nnb_k", "true positive count"},
          {"max_rows", c.max_rows}};
}

}  // namespace

void BenchReport::write_csv(const std::filesystem::path& path) const {
  auto os = open_out(path);
  os << "dataset,model,tasks,mean_f1,std_f1,t_train,t_query,t_total\n";
  for (const auto& s : summary) {
    os << s.dataset << ",\"" << s.model << "\"," << s.tasks << ',' << s.mean_f1 << ',' << s.std_f1 << ','
       << s.mean_t_train << ',' << s.mean_t_query << ',' << s.mean_t_total << '\n';
  }
}

void BenchReport::write_tasks_csv(const std::filesystem::path& path) const {
  auto os = open_out(path);
  os << "dataset,model,class,seed,f1,validation_f1,t_train,t_query,t_total,branches,pipeline_matches_scan,selected\n";
  for (const auto& r : results) {
    os << r.dataset << ",\"" << r.model << "\"," << r.positive_class << ',' << r.seed << ',' << r.f1 << ','
       << r.validation_f1 << ',' << r.t_train << ',' << r.t_query << ',' << r.t_total << ',' << r.branches << ','
       << (r.pipeline_matches_scan ? 1 : 0) << ",\"" << r.selected << "\"\n";
  }
}

std::string BenchReport::to_json() const {
  json j;
  j["config"] = config_json(config);
  j["summary"] = json::array();
  for (const auto& s : summary) {
    j["summary"].push_back({{"dataset", s.dataset},
                            {"model", s.model},
                            {"tasks", s.tasks},
                            {"mean_f1", s.mean_f1},
                            {"std_f1", s.std_f1},
                            {"t_train", s.mean_t_train},
                            {"t_query", s.mean_t_query},
                            {"t_total", s.mean_t_total}});
  }
  j["results"] = json::array();
  for (const auto& r : results) {
    j["results"].push_back({{"dataset", r.dataset},
                            {"model", r.model},
                            {"class", r.positive_class},
                            {"seed", r.seed},
                            {"f1", r.f1},
                            {"validation_f1", r.validation_f1},
                            {"t_train", r.t_train},
                            {"t_query", r.t_query},
                            {"t_total", r.t_total},
                            {"branches", r.branches},
                            {"pipeline_matches_scan", r.pipeline_matches_scan},
                            {"selected", r.selected}});
  }
  j["skipped"] = skipped;
  return j.dump(2);
}

void BenchReport::write_json(const std::filesystem::path& path) const {
  auto os = open_out(path);
  os << to_json() << '\n';
}

// ---------------------------------------------------------------- index experiments

LabeledDataset uniform_catalog(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(n * d);
  for (auto& v : x) v = u(rng);
  std::vector<InstanceId> ids(n);
  std::iota(ids.begin(), ids.end(), InstanceId{0});
  return LabeledDataset::unlabeled(d, std::move(x), std::move(ids));
}

std::vector<std::pair<std::vector<double>, std::vector<double>>> disjoint_boxes(std::size_t count,
                                                                               std::size_t dims,
                                                                               std::uint64_t seed) {
  if (dims == 0) throw ConfigError("boxes need at least one dimension");
  std::size_t g = 1;
  auto cells = [&](std::size_t side) {
    double c = 1;
    for (std::size_t i = 0; i < dims; ++i) c *= static_cast<double>(side);
    return c;
  };
  while (cells(g) < static_cast<double>(count)) ++g;
  std::mt19937_64 rng(seed);
  // Distinct cells, each identified by its per-dimension grid coordinates.
  std::set<std::vector<std::size_t>> chosen;
  std::uniform_int_distribution<std::size_t> coord(0, g - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<std::vector<double>, std::vector<double>>> out;
  const double w = 1.0 / static_cast<double>(g);
  while (out.size() < count) {
    std::vector<std::size_t> cell(dims);
    for (auto& c : cell) c = coord(rng);
    if (!chosen.insert(cell).second) continue;
    std::vector<double> lo(dims), hi(dims);
    for (std::size_t j = 0; j < dims; ++j) {
      double a = u(rng), b = u(rng);
      if (a > b) std::swap(a, b);
      // Keep (lo, hi] inside [c w, (c + 1) w).
      lo[j] = (static_cast<double>(cell[j]) + a * 0.999) * w;
      hi[j] = (static_cast<double>(cell[j]) + b * 0.999) * w;
    }
    out.emplace_back(std::move(lo), std::move(hi));
  }
  return out;
}

double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DomainError("x and y differ in length");
  if (x.size() < 2) return std::nan("");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) throw DomainError("log-log fit needs positive values");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxx == 0 ? std::nan("") : sxy / sxx;
}

ScalingCurve scaling_experiment(const ScalingConfig& cfg) {
  if (cfg.sizes.empty() || cfg.runs == 0 || cfg.boxes == 0 || cfg.subset_size == 0) {
    throw ConfigError("scaling needs sizes, runs, boxes and a subset size");
  }
  const std::size_t max_n = *std::max_element(cfg.sizes.begin(), cfg.sizes.end());
  const auto base = uniform_catalog(max_n, cfg.subset_size, cfg.seed);
  std::vector<FeatureIndex> dims(cfg.subset_size);
  std::iota(dims.begin(), dims.end(), FeatureIndex{0});
  const FeatureSubset subset(dims, cfg.subset_size);
  ScratchDir scratch(cfg.scratch_dir);

  ScalingCurve curve;
  std::vector<std::size_t> all(max_n);
  for (std::size_t n : cfg.sizes) {
    if (n == 0) throw ConfigError("scaling sizes must be positive");
    ScalingPoint pt;
    pt.n = n;
    std::vector<double> per_run;
    for (std::size_t run = 0; run < cfg.runs; ++run) {
      std::mt19937_64 rng(mix(cfg.seed, mix(n, run)));
      std::iota(all.begin(), all.end(), std::size_t{0});
      for (std::size_t i = 0; i < n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, max_n - 1);
        std::swap(all[i], all[pick(rng)]);
      }
      const auto sample = base.subset(std::span<const std::size_t>(all.data(), n));
      const auto idx = build_index(sample, subset, {cfg.leaf_size, LeafLayout::Ts}, scratch.path / "scaling");
      const auto boxes = disjoint_boxes(cfg.boxes, cfg.subset_size, rng());
      if (cfg.cold) idx.drop_page_cache();
      RangeQueryOptions opts;
      opts.max_leaves = cfg.max_leaves;
      double total = 0;
      for (const auto& [lo, hi] : boxes) {
        const auto t0 = Clock::now();
        const auto res = idx.range_query_subspace(lo, hi, opts);
        total += seconds_since(t0);
        pt.max_leaves_visited = std::max(pt.max_leaves_visited, res.stats.leaves_visited);
      }
      per_run.push_back(total / static_cast<double>(boxes.size()));
    }
    pt.mean_t = mean_of(per_run);
    pt.std_t = pstd_of(per_run);
    curve.points.push_back(pt);
  }
  std::vector<double> xs, ys;
  for (const auto& p : curve.points) {
    xs.push_back(static_cast<double>(p.n));
    ys.push_back(p.mean_t);
  }
  curve.exponent = fit_loglog_slope(xs, ys);
  return curve;
}

void ScalingCurve::write_csv(const std::filesystem::path& path) const {
  auto os = open_out(path);
  os << "N,mean_t,std_t,max_leaves_visited\n";
  for (const auto& p : points) os << p.n << ',' << p.mean_t << ',' << p.std_t << ',' << p.max_leaves_visited << '\n';
}

std::string ScalingCurve::to_json() const {
  json j;
  j["points"] = json::array();
  for (const auto& p : points) {
    j["points"].push_back({{"N", p.n}, {"mean_t", p.mean_t}, {"std_t", p.std_t}, {"max_leaves_visited", p.max_leaves_visited}});
  }
  j["exponent"] = std::isnan(exponent) ? json(nullptr) : json(exponent);
  return j.dump(2);
}

LeafSizeTable leaf_size_experiment(const LeafSizeConfig& cfg) {
  if (cfg.leaf_sizes.empty() || cfg.subset_sizes.empty() || cfg.classes == 0 || cfg.n_pos == 0) {
    throw ConfigError("leaf-size experiment needs leaf sizes, subset sizes, classes and positives");
  }
  const std::size_t cluster = cfg.n_pos * 4;
  if (cfg.classes * cluster + cfg.n_neg > cfg.n) throw ConfigError("catalog too small for the requested classes");

  // Uniform background with `classes` tight clusters planted over its first rows.
  std::mt19937_64 rng(cfg.seed);
  auto cat = uniform_catalog(cfg.n, cfg.d, rng());
  std::vector<double> x(cat.features().begin(), cat.features().end());
  std::uniform_real_distribution<double> center(0.2, 0.8);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    std::vector<double> mid(cfg.d);
    for (auto& v : mid) v = center(rng);
    for (std::size_t i = 0; i < cluster; ++i) {
      for (std::size_t j = 0; j < cfg.d; ++j) x[(c * cluster + i) * cfg.d + j] = mid[j] + noise(rng);
    }
  }
  cat = LabeledDataset::unlabeled(cfg.d, std::move(x), {cat.ids().begin(), cat.ids().end()});

  std::vector<LabeledDataset> queries;
  const std::size_t background = cfg.classes * cluster;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    std::vector<std::size_t> rows;
    std::vector<Label> y;
    for (std::size_t i = 0; i < cfg.n_pos; ++i) rows.push_back(c * cluster + i);
    std::vector<std::size_t> bg(cfg.n - background);
    std::iota(bg.begin(), bg.end(), background);
    std::shuffle(bg.begin(), bg.end(), rng);
    rows.insert(rows.end(), bg.begin(), bg.begin() + static_cast<std::ptrdiff_t>(cfg.n_neg));
    auto sub = cat.subset(rows);
    y.assign(rows.size(), 0);
    std::fill(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(cfg.n_pos), Label{1});
    queries.emplace_back(cfg.d, std::vector<double>(sub.features().begin(), sub.features().end()), std::move(y),
                         std::vector<InstanceId>(sub.ids().begin(), sub.ids().end()));
  }

  ScratchDir scratch(cfg.scratch_dir);
  LeafSizeTable table;
  for (std::size_t D : cfg.subset_sizes) {
    std::vector<DBranchEnsemble> models;
    for (std::size_t leaf : cfg.leaf_sizes) {
      const auto dir = scratch.path / ("D" + std::to_string(D) + "_L" + std::to_string(leaf));
      const auto iset = preprocess(cat, {cfg.k, D, leaf, LeafLayout::Ts, cfg.seed}, dir);
      if (models.empty()) {
        DBranchConfig dc;
        dc.subsets = iset.manifest().subsets;
        dc.p = resolve_p("sqrt", cfg.k);
        for (std::size_t c = 0; c < queries.size(); ++c) {
          dc.rng_seed = mix(cfg.seed, c);
          models.push_back(DBranchEnsemble({fit_decision_branches(queries[c], dc)}));
        }
      }
      std::size_t inner = 0, leaves = 0;
      for (const auto& idx : iset.indexes()) {
        inner += idx.inner_memory_bytes();
        leaves += idx.leaf_count();
      }
      for (const std::string mode : {"cold", "warm"}) {
        std::vector<double> times;
        for (const auto& m : models) {
          if (mode == "cold") {
            iset.drop_page_cache();
          } else {
            answer_query(iset, m);
          }
          const auto t0 = Clock::now();
          answer_query(iset, m);
          times.push_back(seconds_since(t0));
        }
        table.rows.push_back({D, leaf, mode, mean_of(times), inner / iset.indexes().size(),
                              leaves / iset.indexes().size()});
      }
      std::filesystem::remove_all(dir);
    }
  }
  return table;
}

void LeafSizeTable::write_csv(const std::filesystem::path& path) const {
  auto os = open_out(path);
  os << "D,leaf_size,mode,mean_t_query,inner_memory_bytes,leaves\n";
  for (const auto& r : rows) {
    os << r.subset_size << ',' << r.leaf_size << ',' << r.mode << ',' << r.mean_t_query << ','
       << r.inner_memory_bytes << ',' << r.leaves << '\n';
  }
}

std::string LeafSizeTable::to_json() const {
  json j = json::array();
  for (const auto& r : rows) {
    j.push_back({{"D", r.subset_size},
                 {"leaf_size", r.leaf_size},
                 {"mode", r.mode},
                 {"mean_t_query", r.mean_t_query},
                 {"inner_memory_bytes", r.inner_memory_bytes},
                 {"leaves", r.leaves}});
  }
  return j.dump(2);
}

}  // namespace sbc::bench
