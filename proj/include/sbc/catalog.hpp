// Catalog ingestion. Two on-disk forms:
//   CSV     header row, optional `id` column, feature columns, optional
//           `label` column (integer class, may be multiclass)
//   packed  <base>.f64 row-major little-endian doubles, optional <base>.ids
//           (u64) and <base>.labels (i32), and <base>.json metadata
//           {"n", "d", "dtype": "f64le", "has_ids", "has_labels", "columns"}
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sbc/core.hpp"

namespace sbc {

struct CatalogTable {
  std::vector<std::string> columns;  ///< feature column names
  std::size_t dims = 0;
  std::vector<double> features;
  std::vector<InstanceId> ids;
  std::vector<std::int32_t> labels;  ///< empty when the source has none

  std::size_t rows() const noexcept { return ids.size(); }
  bool has_labels() const noexcept { return !labels.empty(); }
};

/// Throws DomainError naming the offending line on malformed input and
/// StorageError when the file cannot be read. Missing ids become row numbers.
CatalogTable read_catalog_csv(const std::filesystem::path& path);
void write_catalog_csv(const std::filesystem::path& path, const CatalogTable& table);

void write_packed(const std::filesystem::path& base, const CatalogTable& table);
CatalogTable read_packed(const std::filesystem::path& base);

/// `.csv` is read as CSV; anything else as a packed base path (a trailing
/// `.json` or `.f64` is stripped).
CatalogTable load_catalog(const std::filesystem::path& path);
bool is_packed_path(const std::filesystem::path& path);

/// Moves features and ids into an unlabeled dataset.
LabeledDataset to_catalog_dataset(CatalogTable&& table);

/// One-vs-all binary view: label 1 iff class == positive_class.
LabeledDataset to_binary_dataset(const CatalogTable& table, std::int32_t positive_class);

/// FNV-1a over shape, ids and feature bytes.
std::uint64_t fingerprint(const LabeledDataset& data);

}  // namespace sbc
