// Session-based HTTP JSON API over a loaded index set. Sessions collect
// labels, each query fits a model on them and answers it through the
// indexes. Responses share the envelope {ok, data | error, seed, timings}.
#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "sbc/core.hpp"
#include "sbc/dbranch.hpp"
#include "sbc/engine.hpp"

namespace sbc {

inline constexpr std::size_t kMaxLabelBatch = 1'000'000;

struct ServiceRequest {
  std::string method;
  std::string path;
  /// Decoded query-string parameters.
  std::map<std::string, std::string> params;
  std::string body;
  std::string content_type;
};

struct ServiceResponse {
  int status = 200;
  std::string body;  ///< JSON envelope
};

struct SessionConfig {
  Variant variant = Variant::B;
  std::size_t p = 1;
  std::size_t mu = 1;
  std::size_t members = 1;
  std::size_t p_m = 20;
  std::uint64_t seed = 0;
};

struct Session {
  std::string id;
  SessionConfig config;
  std::map<InstanceId, Label> labels;
  std::optional<QueryResult> last_result;
  std::string created;
  std::string updated;
  std::mutex mu;
};

/// First two principal components of the catalog rows (display only).
struct Projection {
  std::vector<double> mean;
  std::vector<double> axis1, axis2;
  std::pair<double, double> apply(std::span<const double> x) const;
  static Projection fit(const LabeledDataset& catalog);
};

class Service {
 public:
  /// Throws ConfigError if the catalog does not match the index manifest.
  Service(IndexSet iset, LabeledDataset catalog, std::size_t threads = 1);

  ServiceResponse handle(const ServiceRequest& req);

  const IndexSet& index_set() const noexcept { return iset_; }
  const LabeledDataset& catalog() const noexcept { return catalog_; }
  const Projection& projection() const noexcept { return projection_; }

  /// Sessions (ids, configs, labels) as JSON; query results are not kept.
  void save_snapshot(const std::filesystem::path& path) const;
  void load_snapshot(const std::filesystem::path& path);

 private:
  ServiceResponse create_session(const ServiceRequest& req);
  ServiceResponse post_labels(Session& s, const ServiceRequest& req);
  ServiceResponse run_query(Session& s, const ServiceRequest& req);
  ServiceResponse get_session(Session& s);
  ServiceResponse get_points(const ServiceRequest& req);
  std::shared_ptr<Session> find(const std::string& id) const;

  IndexSet iset_;
  LabeledDataset catalog_;
  std::unordered_map<InstanceId, std::size_t> row_of_;
  Projection projection_;
  std::size_t threads_ = 1;
  mutable std::shared_mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_session_ = 1;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  /// 0 binds any free port.
  int port = 8080;
  std::filesystem::path snapshot;
  /// Called with the bound port once the server accepts connections.
  std::function<void(int)> on_ready;
};

/// Serves `service` over HTTP until the calling thread receives SIGINT or
/// SIGTERM; writes the snapshot on shutdown when one is configured.
void run_server(Service& service, const ServeOptions& opts);

}  // namespace sbc
