#include "sbc/service.hpp"

#include <algorithm>
#include <chrono>
#include <csignal>
#include <ctime>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <thread>

#include <Eigen/Dense>
#include <httplib.h>
#include <json.hpp>

#include "sbc/catalog.hpp"

namespace sbc {

namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

struct HttpError {
  int status;
  std::string message;
};

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ServiceResponse envelope(int status, json data, json seed = nullptr, json timings = nullptr) {
  json j = {{"ok", true}, {"data", std::move(data)}, {"seed", std::move(seed)}, {"timings", std::move(timings)}};
  return {status, j.dump()};
}

ServiceResponse error_envelope(int status, const std::string& message) {
  json j = {{"ok", false}, {"error", {{"status", status}, {"message", message}}}, {"seed", nullptr}, {"timings", nullptr}};
  return {status, j.dump()};
}

json parse_body(const ServiceRequest& req) {
  if (req.body.empty()) return json::object();
  if (req.content_type.rfind("application/json", 0) != 0) {
    throw HttpError{415, "content type must be application/json"};
  }
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw HttpError{400, std::string("malformed JSON: ") + e.what()};
  }
}

json config_json(const SessionConfig& c) {
  return {{"variant", std::string(to_string(c.variant))},
          {"p", c.p},
          {"mu", c.mu},
          {"members", c.members},
          {"p_m", c.p_m},
          {"seed", c.seed}};
}

SessionConfig config_from(const json& j) {
  static const std::vector<std::string> keys{"variant", "p", "mu", "members", "p_m", "seed"};
  SessionConfig c;
  if (!j.is_object()) throw HttpError{400, "session config must be an object"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw HttpError{400, "unknown config key '" + k + "'"};
  }
  try {
    if (j.contains("variant")) c.variant = parse_variant(j["variant"].get<std::string>());
    if (j.contains("p")) c.p = j["p"].get<std::size_t>();
    if (j.contains("mu")) c.mu = j["mu"].get<std::size_t>();
    if (j.contains("members")) c.members = j["members"].get<std::size_t>();
    if (j.contains("p_m")) c.p_m = j["p_m"].get<std::size_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw HttpError{400, std::string("bad session config: ") + e.what()};
  }
  if (c.members == 0) throw HttpError{400, "members must be positive"};
  return c;
}

json result_json(const QueryResult& r) {
  json per_branch = json::array();
  for (const auto& b : r.per_branch) per_branch.push_back({{"candidates", b.candidates}, {"positives", b.positives}});
  return {{"positive_ids", r.positive_ids},
          {"count", r.positive_ids.size()},
          {"per_branch", per_branch},
          {"leaves_visited", r.stats.leaves_visited},
          {"bytes_read", r.stats.bytes_read}};
}

json timings_json(const Timings& t) {
  return {{"t_train", t.t_train}, {"t_query", t.t_query}, {"t_total", t.t_total}};
}

}  // namespace

std::pair<double, double> Projection::apply(std::span<const double> x) const {
  double a = 0, b = 0;
  for (std::size_t j = 0; j < mean.size(); ++j) {
    a += (x[j] - mean[j]) * axis1[j];
    b += (x[j] - mean[j]) * axis2[j];
  }
  return {a, b};
}

Projection Projection::fit(const LabeledDataset& catalog) {
  const std::size_t d = catalog.dims(), n = catalog.rows();
  Projection p;
  p.mean.assign(d, 0.0);
  p.axis1.assign(d, 0.0);
  p.axis2.assign(d, 0.0);
  if (n == 0) return p;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(
      catalog.features().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(std::max<std::size_t>(n - 1, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues ascend; the last columns are the leading components.
  const auto& vec = eig.eigenvectors();
  for (std::size_t j = 0; j < d; ++j) {
    p.mean[j] = mean(static_cast<Eigen::Index>(j));
    p.axis1[j] = vec(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(d - 1));
    if (d > 1) p.axis2[j] = vec(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(d - 2));
  }
  return p;
}

Service::Service(IndexSet iset, LabeledDataset catalog, std::size_t threads)
    : iset_(std::move(iset)), catalog_(std::move(catalog)), threads_(std::max<std::size_t>(threads, 1)) {
  const auto& m = iset_.manifest();
  if (m.n != catalog_.rows() || m.d != catalog_.dims() || m.fingerprint != fingerprint(catalog_)) {
    throw ConfigError("catalog does not match the index set it was built from");
  }
  row_of_.reserve(catalog_.rows());
  for (std::size_t i = 0; i < catalog_.rows(); ++i) row_of_.emplace(catalog_.id(i), i);
  projection_ = Projection::fit(catalog_);
}

std::shared_ptr<Session> Service::find(const std::string& id) const {
  std::shared_lock lock(sessions_mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw HttpError{404, "unknown session '" + id + "'"};
  return it->second;
}

ServiceResponse Service::handle(const ServiceRequest& req) {
  static const std::regex session_path(R"(^/sessions/([A-Za-z0-9_-]+)(/labels|/query)?/?$)");
  try {
    std::smatch m;
    if (req.path == "/sessions" || req.path == "/sessions/") {
      if (req.method != "POST") throw HttpError{405, "use POST /sessions"};
      return create_session(req);
    }
    if (req.path == "/catalog/points") {
      if (req.method != "GET") throw HttpError{405, "use GET /catalog/points"};
      return get_points(req);
    }
    if (req.path == "/catalog") {
      if (req.method != "GET") throw HttpError{405, "use GET /catalog"};
      const auto& man = iset_.manifest();
      json subsets = json::array();
      for (const auto& s : man.subsets) subsets.push_back(std::vector<FeatureIndex>(s.dims().begin(), s.dims().end()));
      return envelope(200, {{"n", catalog_.rows()},
                            {"d", catalog_.dims()},
                            {"k", man.k},
                            {"subset_size", man.subset_size},
                            {"layout", std::string(to_string(man.layout))},
                            {"subsets", subsets}});
    }
    if (std::regex_match(req.path, m, session_path)) {
      auto s = find(m[1].str());
      const std::string action = m[2].str();
      if (action.empty()) {
        if (req.method != "GET") throw HttpError{405, "use GET /sessions/{id}"};
        return get_session(*s);
      }
      if (req.method != "POST") throw HttpError{405, "use POST"};
      return action == "/labels" ? post_labels(*s, req) : run_query(*s, req);
    }
    throw HttpError{404, "no route for " + req.method + " " + req.path};
  } catch (const HttpError& e) {
    return error_envelope(e.status, e.message);
  } catch (const ConfigError& e) {
    return error_envelope(400, e.what());
  } catch (const DomainError& e) {
    return error_envelope(422, e.what());
  } catch (const std::exception& e) {
    return error_envelope(500, e.what());
  }
}

ServiceResponse Service::create_session(const ServiceRequest& req) {
  const auto body = parse_body(req);
  SessionConfig cfg = config_from(body);
  // Fail early on configurations that could never be queried.
  DBranchConfig dc;
  dc.subsets = iset_.manifest().subsets;
  dc.p = cfg.p;
  dc.mu = cfg.mu;
  dc.p_m = cfg.p_m;
  dc.variant = cfg.variant;
  dc.validate(catalog_.dims());
  if (cfg.variant == Variant::Ta && iset_.manifest().layout != LeafLayout::Ta) {
    throw ConfigError("the Ta variant needs indexes built with the Ta layout");
  }
  auto s = std::make_shared<Session>();
  s->config = cfg;
  s->created = s->updated = now_iso();
  {
    std::unique_lock lock(sessions_mu_);
    char id[24];
    std::snprintf(id, sizeof id, "s%06llu", static_cast<unsigned long long>(next_session_++));
    s->id = id;
    sessions_[s->id] = s;
  }
  return envelope(201, {{"session_id", s->id}, {"config", config_json(cfg)}});
}

ServiceResponse Service::post_labels(Session& s, const ServiceRequest& req) {
  const auto body = parse_body(req);
  const json& items = body.is_object() && body.contains("labels") ? body["labels"] : body;
  if (!items.is_array()) throw HttpError{400, "body must be an array of {id, label}"};
  if (items.size() > kMaxLabelBatch) {
    throw HttpError{413, "label batch of " + std::to_string(items.size()) + " exceeds " +
                             std::to_string(kMaxLabelBatch)};
  }
  std::vector<std::pair<InstanceId, Label>> batch;
  batch.reserve(items.size());
  for (const auto& it : items) {
    InstanceId id = 0;
    int label = 0;
    try {
      id = it.at("id").get<InstanceId>();
      label = it.at("label").get<int>();
    } catch (const json::exception&) {
      throw HttpError{400, "each entry needs an integer id and label"};
    }
    if (label != 0 && label != 1) throw HttpError{400, "label must be 0 or 1"};
    if (!row_of_.count(id)) throw HttpError{422, "id " + std::to_string(id) + " is not in the catalog"};
    batch.emplace_back(id, static_cast<Label>(label));
  }
  std::vector<InstanceId> ids;
  for (const auto& [id, y] : batch) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  if (const auto dup = std::adjacent_find(ids.begin(), ids.end()); dup != ids.end()) {
    throw HttpError{400, "id " + std::to_string(*dup) + " appears twice in one batch"};
  }
  std::lock_guard lock(s.mu);
  for (const auto& [id, y] : batch) s.labels[id] = y;
  s.updated = now_iso();
  std::size_t pos = 0;
  for (const auto& [id, y] : s.labels) pos += y;
  return envelope(200, {{"merged", batch.size()}, {"positives", pos}, {"negatives", s.labels.size() - pos}});
}

ServiceResponse Service::run_query(Session& s, const ServiceRequest& req) {
  const auto body = parse_body(req);
  std::size_t random_negatives = 0;
  std::lock_guard lock(s.mu);
  std::uint64_t seed = s.config.seed;
  try {
    for (const auto& [k, v] : body.items()) {
      if (k != "random_negatives" && k != "seed") throw HttpError{400, "unknown query key '" + k + "'"};
    }
    random_negatives = body.value("random_negatives", std::size_t{0});
    seed = body.value("seed", seed);
  } catch (const json::exception& e) {
    throw HttpError{400, std::string("bad query body: ") + e.what()};
  }
  std::size_t positives = 0;
  for (const auto& [id, y] : s.labels) positives += y;
  if (positives == 0) throw HttpError{422, "at least one positive label is required before querying"};

  const std::size_t d = catalog_.dims();
  std::vector<double> x;
  std::vector<Label> y;
  std::vector<InstanceId> ids;
  for (const auto& [id, label] : s.labels) {
    const auto row = catalog_.row(row_of_.at(id));
    x.insert(x.end(), row.begin(), row.end());
    y.push_back(label);
    ids.push_back(id);
  }
  if (random_negatives > 0) {
    // Uniform catalog rows outside the labeled set, seeded for replay.
    const std::size_t available = catalog_.rows() - s.labels.size();
    if (random_negatives > available) {
      throw HttpError{422, "only " + std::to_string(available) + " unlabeled rows are available"};
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, catalog_.rows() - 1);
    std::set<InstanceId> taken(ids.begin(), ids.end());
    while (ids.size() < s.labels.size() + random_negatives) {
      const std::size_t r = pick(rng);
      if (!taken.insert(catalog_.id(r)).second) continue;
      const auto row = catalog_.row(r);
      x.insert(x.end(), row.begin(), row.end());
      y.push_back(0);
      ids.push_back(catalog_.id(r));
    }
  }
  const LabeledDataset t(d, std::move(x), std::move(y), std::move(ids));
  DBranchConfig dc;
  dc.variant = s.config.variant;
  dc.p = s.config.p;
  dc.mu = s.config.mu;
  dc.p_m = s.config.p_m;
  dc.rng_seed = seed;
  auto result = process_query(iset_, t, dc, {s.config.members, threads_});
  s.last_result = result;
  s.updated = now_iso();
  json data = result_json(result);
  data["n_train"] = t.rows();
  data["random_negatives"] = random_negatives;
  return envelope(200, std::move(data), seed, timings_json(result.timings));
}

ServiceResponse Service::get_session(Session& s) {
  std::lock_guard lock(s.mu);
  json labels = json::array();
  for (const auto& [id, y] : s.labels) labels.push_back({{"id", id}, {"label", y}});
  json data = {{"session_id", s.id},
               {"config", config_json(s.config)},
               {"labels", labels},
               {"created", s.created},
               {"updated", s.updated},
               {"last_result", nullptr}};
  if (s.last_result) {
    data["last_result"] = result_json(*s.last_result);
    data["last_result"]["timings"] = timings_json(s.last_result->timings);
  }
  return envelope(200, std::move(data), s.config.seed);
}

ServiceResponse Service::get_points(const ServiceRequest& req) {
  const auto it = req.params.find("ids");
  if (it == req.params.end() || it->second.empty()) throw HttpError{400, "ids parameter is required"};
  std::vector<InstanceId> ids;
  std::size_t start = 0;
  const std::string& list = it->second;
  while (start <= list.size()) {
    const std::size_t comma = std::min(list.find(',', start), list.size());
    const std::string tok = list.substr(start, comma - start);
    try {
      std::size_t used = 0;
      ids.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw HttpError{400, "bad id '" + tok + "'"};
    }
    start = comma + 1;
  }
  if (ids.size() > kMaxLabelBatch) throw HttpError{413, "too many ids"};
  json points = json::array();
  for (InstanceId id : ids) {
    const auto r = row_of_.find(id);
    if (r == row_of_.end()) throw HttpError{404, "id " + std::to_string(id) + " is not in the catalog"};
    const auto row = catalog_.row(r->second);
    const auto [a, b] = projection_.apply(row);
    points.push_back({{"id", id}, {"features", std::vector<double>(row.begin(), row.end())}, {"projection", {a, b}}});
  }
  return envelope(200, {{"points", points}});
}

void Service::save_snapshot(const std::filesystem::path& path) const {
  json sessions = json::array();
  {
    std::shared_lock lock(sessions_mu_);
    for (const auto& [id, s] : sessions_) {
      std::lock_guard slock(s->mu);
      json labels = json::array();
      for (const auto& [iid, y] : s->labels) labels.push_back({iid, y});
      sessions.push_back({{"id", id},
                          {"config", config_json(s->config)},
                          {"labels", labels},
                          {"created", s->created},
                          {"updated", s->updated}});
    }
  }
  json j = {{"next_session", next_session_}, {"sessions", sessions}};
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw StorageError("cannot write snapshot " + path.string());
  os << j.dump(2) << '\n';
}

void Service::load_snapshot(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw StorageError("cannot open snapshot " + path.string());
  try {
    const json j = json::parse(is);
    std::unique_lock lock(sessions_mu_);
    next_session_ = j.at("next_session").get<std::uint64_t>();
    for (const auto& sj : j.at("sessions")) {
      auto s = std::make_shared<Session>();
      s->id = sj.at("id").get<std::string>();
      s->config = config_from(sj.at("config"));
      for (const auto& l : sj.at("labels")) s->labels[l.at(0).get<InstanceId>()] = l.at(1).get<Label>();
      s->created = sj.value("created", "");
      s->updated = sj.value("updated", "");
      sessions_[s->id] = s;
    }
  } catch (const json::exception& e) {
    throw StorageError("bad snapshot " + path.string() + ": " + e.what());
  } catch (const HttpError& e) {
    throw StorageError("bad snapshot " + path.string() + ": " + e.message);
  }
}

void run_server(Service& service, const ServeOptions& opts) {
  httplib::Server svr;
  auto dispatch = [&service](const httplib::Request& req, httplib::Response& res) {
    ServiceRequest r;
    r.method = req.method;
    r.path = req.path;
    for (const auto& [k, v] : req.params) r.params[k] = v;
    r.body = req.body;
    r.content_type = req.get_header_value("Content-Type");
    const auto out = service.handle(r);
    res.status = out.status;
    res.set_content(out.body, "application/json");
  };
  svr.Get(".*", dispatch);
  svr.Post(".*", dispatch);
  svr.Put(".*", dispatch);
  svr.Delete(".*", dispatch);

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  const int port = opts.port == 0 ? svr.bind_to_any_port(opts.host) : (svr.bind_to_port(opts.host, opts.port) ? opts.port : -1);
  if (port < 0) {
    pthread_sigmask(SIG_UNBLOCK, &signals, nullptr);
    throw StorageError("cannot bind " + opts.host + ":" + std::to_string(opts.port));
  }
  std::jthread listener([&svr] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  if (opts.on_ready) opts.on_ready(port);
  int sig = 0;
  sigwait(&signals, &sig);
  svr.stop();
  listener.join();
  pthread_sigmask(SIG_UNBLOCK, &signals, nullptr);
  if (!opts.snapshot.empty()) service.save_snapshot(opts.snapshot);
}

}  // namespace sbc
