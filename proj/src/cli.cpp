#include "sbc/cli.hpp"

#include <fstream>
#include <iomanip>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sbc/bench.hpp"
#include "sbc/catalog.hpp"
#include "sbc/engine.hpp"
#include "sbc/service.hpp"

namespace sbc {

namespace {

using json = nlohmann::json;

struct Common {
  bool json_out = false;
  std::size_t threads = 1;
};

struct IngestOpts {
  std::string catalog, out;
};

struct BuildOpts {
  std::string catalog, out, layout = "Ts";
  std::size_t k = 10, D = 3, leaf_size = kDefaultLeafSize;
  std::uint64_t seed = 0;
};

struct QueryOpts {
  std::string index_dir, query, catalog, out, variant = "B";
  std::size_t p = 1, mu = 1, p_m = 20, members = 1;
  std::uint64_t seed = 0;
  bool verify = false;
};

struct BenchOpts {
  std::string config, out;
  std::vector<std::string> datasets, models;
  std::vector<std::uint64_t> seeds;
  std::size_t members = 0, max_rows = 0;
};

struct ScalingOpts {
  std::vector<std::size_t> sizes{10'000, 100'000, 1'000'000};
  std::size_t D = 3, leaf_size = kDefaultLeafSize, max_leaves = 10, boxes = 300, runs = 5;
  std::uint64_t seed = 0;
  bool warm = false;
  std::string out;
};

struct LeafOpts {
  std::vector<std::size_t> sizes{22, 88, 352, 1408, 5632, 22528};
  std::vector<std::size_t> D{3, 6};
  std::size_t n = 100'000, d = 20, k = 10;
  std::uint64_t seed = 0;
  std::string out;
};

struct ServeOpts {
  std::string index_dir, catalog, host = "127.0.0.1", snapshot;
  int port = 8080;
};

void emit(std::ostream& out, const Common& c, const std::string& command, const json& data,
          const std::string& text) {
  if (c.json_out) {
    out << json{{"ok", true}, {"command", command}, {"data", data}}.dump(2) << '\n';
  } else {
    out << text;
  }
}

json manifest_json(const Manifest& m) {
  json subsets = json::array();
  for (const auto& s : m.subsets) subsets.push_back(std::vector<FeatureIndex>(s.dims().begin(), s.dims().end()));
  return {{"n", m.n},           {"d", m.d},       {"k", m.k},
          {"subset_size", m.subset_size}, {"leaf_size", m.leaf_size},
          {"layout", std::string(to_string(m.layout))}, {"seed", m.seed}, {"subsets", subsets}};
}

int cmd_ingest(const IngestOpts& o, const Common& c, std::ostream& out) {
  const auto t = load_catalog(o.catalog);
  // Validates shape, finiteness and id uniqueness.
  LabeledDataset::unlabeled(t.dims, t.features, t.ids);
  std::filesystem::path dest = o.out;
  if (dest.has_parent_path()) std::filesystem::create_directories(dest.parent_path());
  if (dest.extension() == ".csv") {
    write_catalog_csv(dest, t);
  } else {
    if (dest.extension() == ".json" || dest.extension() == ".f64") dest.replace_extension();
    write_packed(dest, t);
  }
  std::ostringstream text;
  text << "ingested " << t.rows() << " rows x " << t.dims << " features" << (t.has_labels() ? " with labels" : "")
       << " -> " << o.out << '\n';
  emit(out, c, "ingest", {{"n", t.rows()}, {"d", t.dims}, {"has_labels", t.has_labels()}, {"out", o.out}},
       text.str());
  return 0;
}

int cmd_build(const BuildOpts& o, const Common& c, std::ostream& out) {
  auto cat = to_catalog_dataset(load_catalog(o.catalog));
  const auto iset = preprocess(cat, {o.k, o.D, o.leaf_size, parse_layout(o.layout), o.seed}, o.out);
  std::ostringstream text;
  text << "built " << o.k << " indexes (D=" << o.D << ", leaf size " << o.leaf_size << ", seed " << o.seed
       << ") over " << cat.rows() << " rows in " << o.out << '\n';
  for (const auto& idx : iset.indexes()) {
    text << "  " << idx.subset().to_string() << ": " << idx.leaf_count() << " leaves, depth " << idx.depth() << '\n';
  }
  emit(out, c, "build-index", manifest_json(iset.manifest()), text.str());
  return 0;
}

int cmd_query(const QueryOpts& o, const Common& c, std::ostream& out) {
  if (!std::filesystem::is_directory(o.index_dir)) throw StorageError("index directory " + o.index_dir + " does not exist");
  const auto iset = IndexSet::open(o.index_dir);
  const auto table = read_catalog_csv(o.query);
  if (!table.has_labels()) throw DomainError(o.query + " needs a label column with 0/1 values");
  std::vector<Label> y;
  for (auto v : table.labels) {
    if (v != 0 && v != 1) throw DomainError(o.query + ": labels must be 0 or 1");
    y.push_back(static_cast<Label>(v));
  }
  const LabeledDataset t(table.dims, table.features, std::move(y), table.ids);

  DBranchConfig cfg;
  cfg.variant = parse_variant(o.variant);
  cfg.p = o.p;
  cfg.mu = o.mu;
  cfg.p_m = o.p_m;
  cfg.rng_seed = o.seed;
  DBranchEnsemble ens;
  const auto res = process_query(iset, t, cfg, {o.members, c.threads}, &ens);

  json data = {{"positive_ids", res.positive_ids},
               {"count", res.positive_ids.size()},
               {"branches", 0},
               {"timings", {{"t_train", res.timings.t_train}, {"t_query", res.timings.t_query}, {"t_total", res.timings.t_total}}},
               {"leaves_visited", res.stats.leaves_visited},
               {"seed", o.seed},
               {"members", o.members},
               {"variant", o.variant}};
  data["branches"] = res.per_branch.size();
  std::ostringstream text;
  text << "positives " << res.positive_ids.size() << " (branches " << res.per_branch.size() << ", members "
       << o.members << ", seed " << o.seed << ")\n"
       << std::setprecision(6) << "t_train " << res.timings.t_train << " s, t_query " << res.timings.t_query
       << " s, t_total " << res.timings.t_total << " s\n";
  bool match = true;
  if (o.verify) {
    if (o.catalog.empty()) throw ConfigError("--verify-scan needs --catalog");
    const auto cat = to_catalog_dataset(load_catalog(o.catalog));
    if (fingerprint(cat) != iset.manifest().fingerprint) {
      throw ConfigError("catalog " + o.catalog + " is not the one the indexes were built from");
    }
    match = scan_oracle(cat, ens) == res.positive_ids;
    data["verify_scan"] = match ? "MATCH" : "MISMATCH";
    text << (match ? "MATCH" : "MISMATCH") << '\n';
  }
  if (!o.out.empty()) {
    std::ofstream os(o.out, std::ios::trunc);
    if (!os) throw StorageError("cannot write " + o.out);
    for (auto id : res.positive_ids) os << id << '\n';
  } else if (!c.json_out) {
    for (auto id : res.positive_ids) text << id << '\n';
  }
  emit(out, c, "query", data, text.str());
  return match ? 0 : 1;
}

int cmd_bench(const BenchOpts& o, const Common& c, std::ostream& out) {
  auto cfg = o.config.empty() ? bench::BenchConfig{} : bench::BenchConfig::from_json_file(o.config);
  if (!o.datasets.empty()) cfg.datasets = o.datasets;
  if (!o.models.empty()) cfg.models = o.models;
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (o.members) cfg.members = o.members;
  if (o.max_rows) cfg.max_rows = o.max_rows;
  if (!o.out.empty()) cfg.out_dir = o.out;
  cfg.threads = c.threads;
  const auto report = bench::run_benchmark(cfg);
  if (!cfg.out_dir.empty()) {
    report.write_csv(cfg.out_dir / "bench_summary.csv");
    report.write_tasks_csv(cfg.out_dir / "bench_tasks.csv");
    report.write_json(cfg.out_dir / "bench.json");
  }
  std::ostringstream text;
  for (const auto& s : report.summary) {
    text << std::left << std::setw(10) << s.dataset << std::setw(16) << s.model << std::fixed << std::setprecision(3)
         << s.mean_f1 << " +- " << s.std_f1 << std::defaultfloat << std::setprecision(3) << "  (" << s.tasks
         << " tasks, t_train " << s.mean_t_train << " s, t_query " << s.mean_t_query << " s)\n";
  }
  for (const auto& s : report.skipped) text << "skipped: " << s << '\n';
  emit(out, c, "bench", json::parse(report.to_json()), text.str());
  return 0;
}

int cmd_scaling(const ScalingOpts& o, const Common& c, std::ostream& out) {
  bench::ScalingConfig cfg;
  cfg.sizes = o.sizes;
  cfg.subset_size = o.D;
  cfg.leaf_size = o.leaf_size;
  cfg.max_leaves = o.max_leaves;
  cfg.boxes = o.boxes;
  cfg.runs = o.runs;
  cfg.seed = o.seed;
  cfg.cold = !o.warm;
  const auto curve = bench::scaling_experiment(cfg);
  if (!o.out.empty()) curve.write_csv(o.out);
  std::ostringstream text;
  text << "N,mean_t,std_t\n" << std::setprecision(6);
  for (const auto& p : curve.points) text << p.n << ',' << p.mean_t << ',' << p.std_t << '\n';
  text << "exponent " << curve.exponent << '\n';
  emit(out, c, "scaling", json::parse(curve.to_json()), text.str());
  return 0;
}

int cmd_leafsize(const LeafOpts& o, const Common& c, std::ostream& out) {
  bench::LeafSizeConfig cfg;
  cfg.leaf_sizes = o.sizes;
  cfg.subset_sizes = o.D;
  cfg.n = o.n;
  cfg.d = o.d;
  cfg.k = o.k;
  cfg.seed = o.seed;
  const auto table = bench::leaf_size_experiment(cfg);
  if (!o.out.empty()) table.write_csv(o.out);
  std::ostringstream text;
  text << "D,leaf_size,mode,mean_t_query,inner_memory_bytes,leaves\n" << std::setprecision(6);
  for (const auto& r : table.rows) {
    text << r.subset_size << ',' << r.leaf_size << ',' << r.mode << ',' << r.mean_t_query << ','
         << r.inner_memory_bytes << ',' << r.leaves << '\n';
  }
  emit(out, c, "leafsize", json::parse(table.to_json()), text.str());
  return 0;
}

int cmd_serve(const ServeOpts& o, const Common& c, std::ostream& out) {
  auto iset = IndexSet::open(o.index_dir);
  auto cat = to_catalog_dataset(load_catalog(o.catalog));
  Service service(std::move(iset), std::move(cat), c.threads);
  if (!o.snapshot.empty() && std::filesystem::exists(o.snapshot)) service.load_snapshot(o.snapshot);
  ServeOptions so;
  so.host = o.host;
  so.port = o.port;
  so.snapshot = o.snapshot;
  so.on_ready = [&](int port) {
    out << "serving " << service.catalog().rows() << " rows on http://" << o.host << ':' << port << std::endl;
  };
  run_server(service, so);
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Search by classification over k-d indexed catalogs"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_flag("--json", common.json_out, "Machine-readable output");
  app.add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber);

  IngestOpts ingest;
  auto* s_ingest = app.add_subcommand("ingest", "Validate a CSV or packed catalog and convert it");
  s_ingest->add_option("--catalog", ingest.catalog, "Input catalog (.csv or packed base)")->required();
  s_ingest->add_option("--out", ingest.out, "Output (.csv, or packed base path)")->required();

  BuildOpts build;
  auto* s_build = app.add_subcommand("build-index", "Sample feature subsets and build one k-d index per subset");
  s_build->add_option("--catalog", build.catalog, "Catalog (.csv or packed)")->required();
  s_build->add_option("--out", build.out, "Index directory")->required();
  s_build->add_option("--k", build.k, "Number of feature subsets")->check(CLI::PositiveNumber);
  s_build->add_option("--D", build.D, "Features per subset")->check(CLI::PositiveNumber);
  s_build->add_option("--leaf-size", build.leaf_size, "Records per leaf")->check(CLI::PositiveNumber);
  s_build->add_option("--seed", build.seed, "Subset sampling seed");
  s_build->add_option("--layout", build.layout, "Leaf layout: Ts (subset) or Ta (all features)")
      ->check(CLI::IsMember({"Ts", "Ta"}));

  QueryOpts query;
  auto* s_query = app.add_subcommand("query", "Fit decision branches on a labeled query set and answer it");
  s_query->add_option("--index-dir,--index", query.index_dir, "Index directory")->required();
  s_query->add_option("--query", query.query, "Training set CSV with a 0/1 label column")->required();
  s_query->add_option("--catalog", query.catalog, "Catalog, needed by --verify-scan");
  s_query->add_option("--out", query.out, "Write positive ids here, one per line");
  s_query->add_option("--variant", query.variant, "B, Ts or Ta")->check(CLI::IsMember({"B", "Ts", "Ta"}));
  s_query->add_option("--p", query.p, "Subsets tried per box")->check(CLI::PositiveNumber);
  s_query->add_option("--mu", query.mu, "Features tried per split")->check(CLI::PositiveNumber);
  s_query->add_option("--p-m", query.p_m, "Boundary candidates per side")->check(CLI::PositiveNumber);
  s_query->add_option("--ensemble", query.members, "Ensemble size M")->check(CLI::PositiveNumber);
  s_query->add_option("--seed", query.seed, "Model seed");
  s_query->add_flag("--verify-scan", query.verify, "Compare against a full catalog scan");

  BenchOpts bench_o;
  auto* s_bench = app.add_subcommand("bench", "One-vs-all benchmark with grid search");
  s_bench->add_option("--config", bench_o.config, "JSON config file");
  s_bench->add_option("--datasets", bench_o.datasets, "Dataset names")->delimiter(',');
  s_bench->add_option("--models", bench_o.models, "Model names, e.g. DBranch[B,4] DTree NNB");
  s_bench->add_option("--seeds", bench_o.seeds, "Seeds")->delimiter(',');
  s_bench->add_option("--ensemble", bench_o.members, "Ensemble size for DBEns/RForest/ExTrees");
  s_bench->add_option("--max-rows", bench_o.max_rows, "Random row cap per dataset");
  s_bench->add_option("--out", bench_o.out, "Report directory");

  ScalingOpts scaling;
  auto* s_scaling = app.add_subcommand("scaling", "Range-query time against catalog size");
  s_scaling->add_option("--sizes", scaling.sizes, "Catalog sizes")->delimiter(',');
  s_scaling->add_option("--D", scaling.D, "Index dimensionality")->check(CLI::PositiveNumber);
  s_scaling->add_option("--leaf-size", scaling.leaf_size, "Records per leaf")->check(CLI::PositiveNumber);
  s_scaling->add_option("--max-leaves", scaling.max_leaves, "Leaf budget per query")->check(CLI::PositiveNumber);
  s_scaling->add_option("--boxes", scaling.boxes, "Disjoint query boxes per run")->check(CLI::PositiveNumber);
  s_scaling->add_option("--runs", scaling.runs, "Runs per size")->check(CLI::PositiveNumber);
  s_scaling->add_option("--seed", scaling.seed, "Seed");
  s_scaling->add_flag("--warm", scaling.warm, "Keep the page cache between runs");
  s_scaling->add_option("--out", scaling.out, "CSV output");

  LeafOpts leaf;
  auto* s_leaf = app.add_subcommand("leafsize", "Query time and inner-tree memory against leaf size");
  s_leaf->add_option("--sizes", leaf.sizes, "Leaf sizes")->delimiter(',');
  s_leaf->add_option("--D", leaf.D, "Subset sizes")->delimiter(',');
  s_leaf->add_option("--n", leaf.n, "Catalog rows")->check(CLI::PositiveNumber);
  s_leaf->add_option("--d", leaf.d, "Catalog features")->check(CLI::PositiveNumber);
  s_leaf->add_option("--k", leaf.k, "Feature subsets")->check(CLI::PositiveNumber);
  s_leaf->add_option("--seed", leaf.seed, "Seed");
  s_leaf->add_option("--out", leaf.out, "CSV output");

  ServeOpts serve;
  auto* s_serve = app.add_subcommand("serve", "HTTP JSON API for interactive sessions");
  s_serve->add_option("--index-dir", serve.index_dir, "Index directory")->required();
  s_serve->add_option("--catalog", serve.catalog, "Catalog the indexes were built from")->required();
  s_serve->add_option("--host", serve.host, "Bind address");
  s_serve->add_option("--port", serve.port, "Port");
  s_serve->add_option("--snapshot", serve.snapshot, "Session snapshot file, read at start and written on exit");

  std::vector<const char*> argv{"sbc"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  auto fail = [&](int code, const std::string& what) {
    if (common.json_out) {
      out << json{{"ok", false}, {"error", what}}.dump(2) << '\n';
    }
    err << "error: " << what << '\n';
    return code;
  };
  try {
    if (*s_ingest) return cmd_ingest(ingest, common, out);
    if (*s_build) return cmd_build(build, common, out);
    if (*s_query) return cmd_query(query, common, out);
    if (*s_bench) return cmd_bench(bench_o, common, out);
    if (*s_scaling) return cmd_scaling(scaling, common, out);
    if (*s_leaf) return cmd_leafsize(leaf, common, out);
    if (*s_serve) return cmd_serve(serve, common, out);
  } catch (const ConfigError& e) {
    return fail(2, e.what());
  } catch (const std::exception& e) {
    return fail(1, e.what());
  }
  return 2;
}

}  // namespace sbc
