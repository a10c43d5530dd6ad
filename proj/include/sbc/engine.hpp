// Offline preprocessing (subset sampling, one k-d index per subset) and the
// online pipeline: fit a model, run one range query per branch box against
// the index of its subset, route the candidates through the branch trees.
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sbc/core.hpp"
#include "sbc/dbranch.hpp"
#include "sbc/kdindex.hpp"

namespace sbc {

struct PreprocessConfig {
  std::size_t k = 10;
  std::size_t subset_size = 3;
  std::size_t leaf_size = kDefaultLeafSize;
  LeafLayout layout = LeafLayout::Ts;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::size_t d = 0;
  std::size_t k = 0;
  std::size_t subset_size = 0;
  std::size_t leaf_size = 0;
  LeafLayout layout = LeafLayout::Ts;
  std::uint64_t seed = 0;
  std::vector<FeatureSubset> subsets;
  std::size_t n = 0;
  std::uint64_t fingerprint = 0;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

/// k distinct D-subsets of {0..d-1}, uniformly at random. Falls back to
/// sampling with replacement only when C(d, D) < k. Throws ConfigError
/// unless 1 <= D <= d and k >= 1.
std::vector<FeatureSubset> sample_subsets(std::size_t d, std::size_t k, std::size_t subset_size,
                                          std::uint64_t seed);

class IndexSet {
 public:
  /// Reads `dir/manifest.json` and opens every index. Throws StorageError.
  static IndexSet open(const std::filesystem::path& dir);

  const Manifest& manifest() const noexcept { return manifest_; }
  const std::vector<KdIndex>& indexes() const noexcept { return indexes_; }
  const std::filesystem::path& dir() const noexcept { return dir_; }
  /// Index built over `subset`. Throws ConfigError if there is none.
  const KdIndex& index_for(const FeatureSubset& subset) const;

  void drop_page_cache() const;

 private:
  friend IndexSet preprocess(const LabeledDataset&, const PreprocessConfig&, const std::filesystem::path&);
  Manifest manifest_;
  std::vector<KdIndex> indexes_;
  std::filesystem::path dir_;
};

/// Samples subsets, builds one index per subset under `out_dir`, writes
/// `manifest.json`. Throws ConfigError on bad parameters, StorageError when
/// `out_dir` cannot be written.
IndexSet preprocess(const LabeledDataset& catalog, const PreprocessConfig& cfg,
                    const std::filesystem::path& out_dir);

void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

struct Timings {
  double t_train = 0.0;
  double t_query = 0.0;
  double t_total = 0.0;
};

struct BranchCounts {
  std::size_t candidates = 0;
  std::size_t positives = 0;
};

struct QueryResult {
  /// Sorted, without duplicates.
  std::vector<InstanceId> positive_ids;
  /// One entry per branch, models in order.
  std::vector<BranchCounts> per_branch;
  Timings timings;
  QueryStats stats;
};

struct QueryOptions {
  /// Ensemble size M; 1 fits a single model.
  std::size_t members = 1;
  std::size_t threads = 1;
};

/// Steps 2 and 3 for an already fitted ensemble (a single model is an
/// ensemble of one); fills timings.t_query. Throws ConfigError if a branch
/// subset has no index, or if a Ta model meets indexes whose leaves hold
/// only the subset features.
QueryResult answer_query(const IndexSet& iset, const DBranchEnsemble& ens, std::size_t threads = 1);

/// The full pipeline. `cfg.subsets` may be empty, in which case the manifest
/// subsets are used; otherwise it must equal them.
QueryResult process_query(const IndexSet& iset, const LabeledDataset& t, DBranchConfig cfg,
                          const QueryOptions& opts = {}, DBranchEnsemble* fitted = nullptr);

/// Applies the model to every catalog row; returns the positive ids sorted.
std::vector<InstanceId> scan_oracle(const LabeledDataset& catalog, const DecisionBranchModel& model);
std::vector<InstanceId> scan_oracle(const LabeledDataset& catalog, const DBranchEnsemble& ens);

}  // namespace sbc
