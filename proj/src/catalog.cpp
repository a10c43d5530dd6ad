#include "sbc/catalog.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "sbc/binio.hpp"

namespace sbc {

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view f = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
    out.push_back(f);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

[[noreturn]] void bad_line(std::size_t line_no, const std::string& what) {
  throw DomainError("line " + std::to_string(line_no) + ": " + what);
}

template <typename T>
T parse_number(std::string_view f, std::size_t line_no, std::string_view column) {
  T v{};
  const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (f.empty() || ec != std::errc{} || ptr != f.data() + f.size()) {
    bad_line(line_no, "cannot parse '" + std::string(f) + "' in column '" + std::string(column) + "'");
  }
  return v;
}

std::filesystem::path with_suffix(const std::filesystem::path& base, const char* suffix) {
  return base.string() + suffix;
}

template <typename T>
void write_array(const std::filesystem::path& path, const std::vector<T>& values) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StorageError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(T)));
  if (!os) throw StorageError("write failed: " + path.string());
}

template <typename T>
std::vector<T> read_array(const std::filesystem::path& path, std::size_t count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StorageError("cannot open " + path.string());
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec || size != count * sizeof(T)) {
    throw StorageError(path.string() + " has " + std::to_string(size) + " bytes, expected " +
                       std::to_string(count * sizeof(T)));
  }
  std::vector<T> out(count);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (!is) throw StorageError("read failed: " + path.string());
  return out;
}

}  // namespace

CatalogTable read_catalog_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string::npos) break;
  }
  if (line.find_first_not_of(" \t\r") == std::string::npos) throw DomainError(path.string() + " is empty");

  const auto header = split_fields(line);
  CatalogTable t;
  std::ptrdiff_t id_col = -1, label_col = -1;
  std::vector<std::size_t> feature_cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "id") {
      id_col = static_cast<std::ptrdiff_t>(i);
    } else if (header[i] == "label") {
      label_col = static_cast<std::ptrdiff_t>(i);
    } else {
      feature_cols.push_back(i);
      t.columns.emplace_back(header[i]);
    }
  }
  if (feature_cols.empty()) bad_line(line_no, "header has no feature columns");
  t.dims = feature_cols.size();

  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_fields(line);
    if (f.size() != header.size()) {
      bad_line(line_no, "expected " + std::to_string(header.size()) + " fields, found " +
                            std::to_string(f.size()));
    }
    for (std::size_t c : feature_cols) {
      const double v = parse_number<double>(f[c], line_no, header[c]);
      if (!std::isfinite(v)) bad_line(line_no, "non-finite value in column '" + std::string(header[c]) + "'");
      t.features.push_back(v);
    }
    t.ids.push_back(id_col >= 0 ? parse_number<InstanceId>(f[static_cast<std::size_t>(id_col)], line_no, "id")
                                : static_cast<InstanceId>(t.ids.size()));
    if (label_col >= 0) {
      t.labels.push_back(parse_number<std::int32_t>(f[static_cast<std::size_t>(label_col)], line_no, "label"));
    }
  }
  if (t.ids.empty()) throw DomainError(path.string() + " has no data rows");
  return t;
}

void write_catalog_csv(const std::filesystem::path& path, const CatalogTable& t) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw StorageError("cannot open " + path.string() + " for writing");
  os << "id";
  for (const auto& c : t.columns) os << ',' << c;
  if (t.has_labels()) os << ",label";
  os << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    os << t.ids[i];
    for (std::size_t j = 0; j < t.dims; ++j) os << ',' << t.features[i * t.dims + j];
    if (t.has_labels()) os << ',' << t.labels[i];
    os << '\n';
  }
  if (!os) throw StorageError("write failed: " + path.string());
}

void write_packed(const std::filesystem::path& base, const CatalogTable& t) {
  static_assert(sizeof(double) == 8);
  write_array(with_suffix(base, ".f64"), t.features);
  write_array(with_suffix(base, ".ids"), t.ids);
  if (t.has_labels()) write_array(with_suffix(base, ".labels"), t.labels);
  nlohmann::json meta = {{"n", t.rows()},          {"d", t.dims},
                         {"dtype", "f64le"},       {"has_ids", true},
                         {"has_labels", t.has_labels()}, {"columns", t.columns}};
  std::ofstream os(with_suffix(base, ".json"), std::ios::trunc);
  if (!os) throw StorageError("cannot write " + with_suffix(base, ".json").string());
  os << meta.dump(2) << '\n';
}

CatalogTable read_packed(const std::filesystem::path& base) {
  const auto meta_path = with_suffix(base, ".json");
  std::ifstream is(meta_path);
  if (!is) throw StorageError("cannot open " + meta_path.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw StorageError(meta_path.string() + ": " + e.what());
  }
  if (meta.value("dtype", "") != "f64le") throw StorageError(meta_path.string() + ": dtype must be f64le");
  CatalogTable t;
  std::size_t n = 0;
  try {
    n = meta.at("n").get<std::size_t>();
    t.dims = meta.at("d").get<std::size_t>();
    if (meta.contains("columns")) t.columns = meta["columns"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw StorageError(meta_path.string() + ": " + e.what());
  }
  if (t.dims == 0) throw StorageError(meta_path.string() + ": d must be positive");
  if (t.columns.empty()) {
    for (std::size_t j = 0; j < t.dims; ++j) t.columns.push_back("f" + std::to_string(j));
  }
  if (t.columns.size() != t.dims) throw StorageError(meta_path.string() + ": column count differs from d");
  t.features = read_array<double>(with_suffix(base, ".f64"), n * t.dims);
  if (meta.value("has_ids", false)) {
    t.ids = read_array<InstanceId>(with_suffix(base, ".ids"), n);
  } else {
    t.ids.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.ids[i] = i;
  }
  if (meta.value("has_labels", false)) t.labels = read_array<std::int32_t>(with_suffix(base, ".labels"), n);
  return t;
}

bool is_packed_path(const std::filesystem::path& path) {
  const auto ext = path.extension();
  return ext != ".csv";
}

CatalogTable load_catalog(const std::filesystem::path& path) {
  if (!is_packed_path(path)) return read_catalog_csv(path);
  auto base = path;
  if (base.extension() == ".json" || base.extension() == ".f64") base.replace_extension();
  return read_packed(base);
}

LabeledDataset to_catalog_dataset(CatalogTable&& t) {
  return LabeledDataset::unlabeled(t.dims, std::move(t.features), std::move(t.ids));
}

LabeledDataset to_binary_dataset(const CatalogTable& t, std::int32_t positive_class) {
  if (!t.has_labels()) throw DomainError("catalog has no label column");
  std::vector<Label> y(t.rows());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = t.labels[i] == positive_class ? 1 : 0;
  return LabeledDataset(t.dims, t.features, std::move(y), t.ids);
}

std::uint64_t fingerprint(const LabeledDataset& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t shape[2] = {data.rows(), data.dims()};
  mix(shape, sizeof shape);
  mix(data.ids().data(), data.ids().size_bytes());
  mix(data.features().data(), data.features().size_bytes());
  return h;
}

}  // namespace sbc
