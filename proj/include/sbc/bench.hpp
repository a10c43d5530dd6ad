// Evaluation harness: one-vs-all tasks, F1, baseline models, grid search on
// validation data, and the index scaling / leaf-size experiments.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sbc/catalog.hpp"
#include "sbc/core.hpp"
#include "sbc/dbranch.hpp"
#include "sbc/kdindex.hpp"

namespace sbc::bench {

double precision(std::size_t tp, std::size_t fp) noexcept;
double recall(std::size_t tp, std::size_t fn) noexcept;
/// 2PR / (P + R); 0 when P + R = 0.
double f1_score(std::size_t tp, std::size_t fp, std::size_t fn) noexcept;

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0;
  double f1() const noexcept { return f1_score(tp, fp, fn); }
};

/// Compares sorted predicted ids against the labels of `truth`.
Confusion confusion(const std::vector<InstanceId>& predicted_sorted, const LabeledDataset& truth);
Confusion confusion(const std::vector<Label>& predicted, const LabeledDataset& truth);

// ---------------------------------------------------------------- datasets

std::vector<std::string> known_datasets();
/// Loads `name` from $SBC_DATA_DIR or the bundled data directory. Throws
/// ConfigError for unknown names (listing the known ones) and StorageError
/// when a known dataset is not present.
CatalogTable load_dataset(const std::string& name);

// ---------------------------------------------------------------- tasks

struct BenchTask {
  std::string dataset;
  std::int32_t positive_class = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::size_t n_pos_train = 30;
  /// Seed the task was drawn with, and the seed derived from it for models.
  std::uint64_t base_seed = 0;
  std::uint64_t seed = 0;
};

/// One task per (class, seed): n_pos positives, round(n_pos / n_cp * n_cn)
/// rows of every other class c_n, the rest split in half for validation
/// and test (an odd row goes to test). Classes with fewer than n_pos + 2
/// rows are skipped and reported in `skipped`.
std::vector<BenchTask> make_tasks(const CatalogTable& data, const std::string& name, std::size_t n_pos,
                                  const std::vector<std::uint64_t>& seeds,
                                  std::vector<std::string>* skipped = nullptr);

/// Binary view of the given rows (label 1 iff class == positive_class).
LabeledDataset task_rows(const CatalogTable& data, const std::vector<std::size_t>& rows,
                         std::int32_t positive_class);

// ---------------------------------------------------------------- models

enum class ModelKind { DBranch, DBEns, DTree, RForest, ExTrees, NNB };

/// Parsed model name: "DBranch[B,4]", "DBEns[Ta,10]", "DTree", "DTree[4]",
/// "RForest", "RForest[4]", "ExTrees", "NNB".
struct ModelSpec {
  ModelKind kind = ModelKind::DBranch;
  Variant variant = Variant::B;
  /// Feature subset size; unset for unconstrained baselines.
  std::optional<std::size_t> subset_size;

  std::string name() const;
  static ModelSpec parse(const std::string& name);
};

struct GridConfig {
  std::vector<double> tau{0.5, 1.0, 2.0, 4.0};
  /// Entries "1", "sqrt" or "k".
  std::vector<std::string> p{"1", "sqrt", "k"};
  /// Depth limits tried for the top-down baselines (0 = unlimited).
  std::vector<std::size_t> max_depth{0, 2, 4, 6, 8};
};

struct BenchConfig {
  std::vector<std::string> datasets{"iris"};
  std::vector<std::string> models{"DBranch[B,4]", "DTree"};
  GridConfig grid;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t n_pos = 30;
  std::size_t members = 25;
  std::size_t p_m = 20;
  /// mu for branch trees; 0 means all usable features.
  std::size_t mu = 0;
  /// Leaf size of the indexes built over the test rows.
  std::size_t index_leaf_size = 64;
  /// "all" or "subset" (random D = 3 features) for the NNB baseline.
  std::string nnb_space = "all";
  /// Random row cap per dataset; 0 keeps every row.
  std::size_t max_rows = 0;
  std::size_t threads = 1;
  /// Temporary index directories go here; empty means the system temp dir.
  std::filesystem::path scratch_dir;
  /// Where the CLI writes report files.
  std::filesystem::path out_dir;

  /// Unknown keys throw ConfigError.
  static BenchConfig from_json_file(const std::filesystem::path& path);
};

struct TaskResult {
  std::string dataset;
  std::string model;
  std::int32_t positive_class = 0;
  std::uint64_t seed = 0;
  double f1 = 0.0;
  double validation_f1 = 0.0;
  double t_train = 0.0;
  double t_query = 0.0;
  double t_total = 0.0;
  /// Selected hyperparameters, e.g. "tau=1 k=4 p=2".
  std::string selected;
  std::size_t branches = 0;
  /// DBranch models only: the indexed answer equals a full scan.
  bool pipeline_matches_scan = true;
};

struct ModelSummary {
  std::string dataset;
  std::string model;
  std::size_t tasks = 0;
  double mean_f1 = 0.0;
  double std_f1 = 0.0;
  double mean_t_train = 0.0;
  double mean_t_query = 0.0;
  double mean_t_total = 0.0;
};

struct BenchReport {
  BenchConfig config;
  std::vector<TaskResult> results;
  std::vector<ModelSummary> summary;
  std::vector<std::string> skipped;

  const ModelSummary* find(const std::string& dataset, const std::string& model) const;
  /// One row per (dataset, model).
  void write_csv(const std::filesystem::path& path) const;
  /// One row per task result.
  void write_tasks_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
  std::string to_json() const;
};

/// Runs one model on one task: grid search on validation, test F1.
TaskResult run_task(const CatalogTable& data, const BenchTask& task, const ModelSpec& spec,
                    const BenchConfig& cfg);

/// NNB: for every training positive, the K nearest evaluation rows are
/// declared positive, K = number of positives among them; returns the mean
/// F1 over those searches. Uses a k-d index over `eval` when `index_dir`
/// is non-empty, a full scan otherwise. Throws DomainError if `eval` has
/// no positive.
double nnb_evaluate(const LabeledDataset& train, const LabeledDataset& eval, const FeatureSubset& space,
                    const std::filesystem::path& index_dir = {});

BenchReport run_benchmark(const BenchConfig& cfg);

/// Aggregates results per (dataset, model); std is the population std.
std::vector<ModelSummary> summarize(const std::vector<TaskResult>& results);

// ---------------------------------------------------------------- index experiments

/// n rows uniform in [0, 1)^d, ids 0..n-1.
LabeledDataset uniform_catalog(std::size_t n, std::size_t d, std::uint64_t seed);

/// `count` pairwise disjoint boxes inside [0, 1)^D, one per grid cell.
std::vector<std::pair<std::vector<double>, std::vector<double>>> disjoint_boxes(std::size_t count,
                                                                               std::size_t dims,
                                                                               std::uint64_t seed);

struct ScalingConfig {
  std::vector<std::size_t> sizes{10'000, 100'000, 1'000'000};
  std::size_t subset_size = 3;
  std::size_t leaf_size = kDefaultLeafSize;
  std::size_t max_leaves = 10;
  std::size_t boxes = 300;
  std::size_t runs = 5;
  std::uint64_t seed = 0;
  bool cold = true;
  std::filesystem::path scratch_dir;
};

struct ScalingPoint {
  std::size_t n = 0;
  double mean_t = 0.0;  ///< seconds per query, mean over runs
  double std_t = 0.0;
  std::size_t max_leaves_visited = 0;
};

struct ScalingCurve {
  std::vector<ScalingPoint> points;
  /// Least-squares slope of log(mean_t) against log(N); NaN with < 2 points.
  double exponent = 0.0;

  void write_csv(const std::filesystem::path& path) const;
  std::string to_json() const;
};

ScalingCurve scaling_experiment(const ScalingConfig& cfg);
double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

struct LeafSizeConfig {
  std::vector<std::size_t> leaf_sizes{22, 88, 352, 1408, 5632, 22528};
  std::vector<std::size_t> subset_sizes{3, 6};
  std::size_t n = 100'000;
  std::size_t d = 20;
  std::size_t k = 10;
  std::size_t classes = 6;
  std::size_t n_pos = 30;
  std::size_t n_neg = 3000;
  std::uint64_t seed = 0;
  std::filesystem::path scratch_dir;
};

struct LeafSizeRow {
  std::size_t subset_size = 0;
  std::size_t leaf_size = 0;
  std::string mode;  ///< "cold" or "warm"
  double mean_t_query = 0.0;
  std::size_t inner_memory_bytes = 0;  ///< per index, mean over the k indexes
  std::size_t leaves = 0;
};

struct LeafSizeTable {
  std::vector<LeafSizeRow> rows;
  void write_csv(const std::filesystem::path& path) const;
  std::string to_json() const;
};

/// Catalog with `classes` rare Gaussian clusters over uniform background;
/// per class one training set (n_pos cluster rows, n_neg background rows)
/// is fitted as a B model and answered against indexes of every leaf size,
/// once with the page cache dropped before each query and once warm.
LeafSizeTable leaf_size_experiment(const LeafSizeConfig& cfg);

}  // namespace sbc::bench
