#pragma once

#include "causerank/engine.hpp"
#include "causerank/ingest.hpp"
#include "causerank/workspace.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <condition_variable>
#include <deque>
#include <thread>

namespace causerank::http {

struct ApiError {
  int status = 500;
  std::string code = "internal";
  std::string message;
};

inline ApiError to_api_error(Errc c, const std::string& message) {
  switch (c) {
    case Errc::NotFound:
    case Errc::UnknownFamily:
    case Errc::NotScored: return {404, "not-found", message};
    case Errc::DuplicateFamilyKey: return {409, "conflict", message};
    case Errc::OverlappingMetrics:
    case Errc::InvalidOverride: return {422, "invalid-hypothesis", message};
    case Errc::NumericalFailure:
    case Errc::Io: return {500, "internal", message};
    default: return {400, "bad-request", message};
  }
}

/// Listen address "host:port" (port alone binds 127.0.0.1).
inline std::pair<std::string, int> parse_listen(const std::string& addr) {
  auto colon = addr.rfind(':');
  std::string host = colon == std::string::npos ? "127.0.0.1" : addr.substr(0, colon);
  auto port = detail::parse_int(colon == std::string::npos ? addr : addr.substr(colon + 1));
  if (!port || *port < 0 || *port > 65535) throw Error(Errc::InvalidArgument, "bad listen address '" + addr + "'");
  return {host.empty() ? "127.0.0.1" : host, static_cast<int>(*port)};
}

/// The /v1/ HTTP service over a workspace. Runs execute on one background worker, in submission order.
class Service {
 public:
  explicit Service(std::filesystem::path workspace) : ws_(std::move(workspace)) {
    routes();
    worker_ = std::thread([this] { work(); });
  }

  ~Service() {
    stop();
    {
      std::lock_guard lock(jobs_mutex_);
      shutdown_ = true;
    }
    jobs_cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  httplib::Server& server() { return server_; }
  Workspace& workspace() { return ws_; }

  /// Binds (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error(Errc::Io, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  bool listen() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }

 private:
  struct Job {
    std::string session;
    std::size_t id = 0;
    std::string token;
    std::string status = "queued";  // queued, running, done, failed
    std::size_t run = 0;            // run number once done
    ApiError error;
  };

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static std::string idem_key(const httplib::Request& req) {
    if (req.has_header("Idempotency-Key")) return req.get_header_value("Idempotency-Key");
    return {};
  }

  static void reply(const httplib::Request& req, httplib::Response& res, int status, nlohmann::json body) {
    const auto key = idem_key(req);
    if (!key.empty()) res.set_header("Idempotency-Key", key);
    if (body.is_object()) body["idempotency_key"] = key.empty() ? nlohmann::json(nullptr) : nlohmann::json(key);
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void reply_error(const httplib::Request& req, httplib::Response& res, const ApiError& e) {
    reply(req, res, e.status, {{"error", {{"code", e.code}, {"message", e.message}}}});
  }

  static nlohmann::json body_json(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw Error(Errc::InvalidArgument, "request body must be a JSON object");
    return j;
  }

  static ApiError classify(std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const Error& e) {
      return to_api_error(e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      return {400, "bad-request", std::string("malformed JSON: ") + e.what()};
    } catch (const std::exception& e) {
      return {500, "internal", e.what()};
    }
  }

  Handler guarded(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (...) {
        reply_error(req, res, classify(std::current_exception()));
      }
    };
  }

  static Session session_from_request(const nlohmann::json& j) {
    Session s;
    s.dataset = j.at("dataset").get<std::string>();
    s.target = j.at("target").get<std::string>();
    if (j.contains("condition")) s.condition = j["condition"].get<std::vector<std::string>>();
    s.search = j.value("search", std::string("*"));
    s.config = config_from_json(j.value("config", nlohmann::json::object()));
    s.range = range_from_json(j.value("range", nlohmann::json()));
    s.highlight = range_from_json(j.value("highlight", nlohmann::json()));
    s.top_k = j.value("top_k", kDefaultTopK);
    s.workers = j.value("workers", 0u);
    return s;
  }

  nlohmann::json session_state(const std::string& id) {
    const Session s = ws_.session(id);
    nlohmann::json j = session_to_json(s);
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : s.runs) {
      nlohmann::json top = nlohmann::json::array();
      for (std::size_t i = 0; i < std::min<std::size_t>(3, r.report.entries.size()); ++i) top.push_back(r.report.entries[i].hypothesis.x);
      runs.push_back({{"run", r.number}, {"status", "done"}, {"token", r.token}, {"scored", r.report.scored}, {"top", top}});
    }
    std::lock_guard lock(jobs_mutex_);
    for (const auto& job : jobs_)
      if (job.session == id && job.status != "done")
        runs.push_back({{"job", job.id}, {"status", job.status}, {"token", job.token}});
    j["runs"] = runs;
    return j;
  }

  nlohmann::json run_payload(const std::string& session, std::size_t run) {
    return {{"session", session}, {"run", run}, {"status", "done"}, {"report", ws_.report(session, run)}};
  }

  void routes() {
    server_.Get("/v1/health", guarded([](const auto& req, auto& res) { reply(req, res, 200, {{"status", "ok"}}); }));

    server_.Post("/v1/datasets", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::string text = req.body;
      const bool wrapped = !text.empty() && text.front() == '{' && text.find("\"jsonl\"") != std::string::npos &&
                           nlohmann::json::accept(text);
      if (wrapped) text = nlohmann::json::parse(text).at("jsonl").get<std::string>();
      auto parsed = parse_records(text, RecordFormat::Jsonl);
      const auto id = ws_.add_dataset(parsed.records);
      reply(req, res, 201, {{"dataset", id}, {"records", parsed.records.size()}, {"warnings", parsed.warnings}});
    }));

    server_.Post(R"(/v1/datasets/([^/]+)/queries)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::string text = req.body;
      if (!text.empty() && text.front() == '{') text = body_json(req).at("query").get<std::string>();
      reply(req, res, 201, ws_.add_queries(req.matches[1], text));
    }));

    server_.Post("/v1/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = ws_.create_session(session_from_request(body_json(req)));
      reply(req, res, 201, session_state(s.id));
    }));

    server_.Get(R"(/v1/sessions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      reply(req, res, 200, session_state(req.matches[1]));
    }));

    server_.Post(R"(/v1/sessions/([^/]+)/run)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto body = body_json(req);
      std::string token = body.value("run_token", std::string());
      if (token.empty() && req.has_param("run_token")) token = req.get_param_value("run_token");
      const bool wait = req.has_param("wait") && req.get_param_value("wait") != "false";
      const Session s = ws_.session(id);
      if (!token.empty())
        for (const auto& r : s.runs)
          if (r.token == token) return reply(req, res, 200, run_payload(id, r.number));
      std::size_t job_id = 0;
      {
        std::lock_guard lock(jobs_mutex_);
        const Job* existing = nullptr;
        for (const auto& j : jobs_)
          if (!token.empty() && j.session == id && j.token == token && j.status != "failed") existing = &j;
        if (existing) {
          job_id = existing->id;
        } else {
          std::size_t pending = 0;
          for (const auto& j : jobs_)
            if (j.session == id && (j.status == "queued" || j.status == "running")) ++pending;
          job_id = s.runs.size() + pending + 1;
          jobs_.push_back(Job{id, job_id, token, "queued", 0, {}});
          jobs_cv_.notify_all();
        }
      }
      if (!wait) return reply(req, res, 202, {{"session", id}, {"run", job_id}, {"status", "queued"}});
      std::unique_lock lock(jobs_mutex_);
      const Job* job = nullptr;
      done_cv_.wait(lock, [&] {
        job = find_job(id, job_id);
        return job && (job->status == "done" || job->status == "failed");
      });
      if (job->status == "failed") {
        const auto err = job->error;
        lock.unlock();
        return reply_error(req, res, err);
      }
      const auto run = job->run;
      lock.unlock();
      reply(req, res, 200, run_payload(id, run));
    }));

    server_.Get(R"(/v1/sessions/([^/]+)/runs/(\d+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      auto n = static_cast<std::size_t>(std::stoull(req.matches[2]));
      {
        std::lock_guard lock(jobs_mutex_);
        if (const Job* job = find_job(id, n)) {
          if (job->status == "failed")
            return reply(req, res, 200, {{"session", id}, {"run", n}, {"status", "failed"},
                                         {"error", {{"code", job->error.code}, {"message", job->error.message}}}});
          if (job->status != "done") return reply(req, res, 200, {{"session", id}, {"run", n}, {"status", job->status}});
          n = job->run;
        }
      }
      const Session s = ws_.session(id);
      if (n < 1 || n > s.runs.size()) throw Error(Errc::NotScored, "session '" + id + "' has no run " + std::to_string(n));
      if (req.has_param("format") && req.get_param_value("format") == "jsonl") {
        const auto key = idem_key(req);
        if (!key.empty()) res.set_header("Idempotency-Key", key);
        res.status = 200;
        return res.set_content(report_to_jsonl(ws_.report(id, n)), "application/x-ndjson");
      }
      reply(req, res, 200, run_payload(id, n));
    }));

    server_.Get(R"(/v1/sessions/([^/]+)/plots/(.+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const std::string family = req.matches[2];
      const auto plot = ws_.plot(id, family);
      reply(req, res, 200, {{"session", id}, {"family", family}, {"observed", plot.observed}, {"predicted", plot.predicted}});
    }));

    server_.Post(R"(/v1/sessions/([^/]+)/fork)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto j = body_json(req);
      SessionOverrides o;
      if (j.contains("condition")) o.condition = j["condition"].get<std::vector<std::string>>();
      if (j.contains("search")) o.search = j["search"].get<std::string>();
      if (j.contains("range")) o.range = range_from_json(j["range"]);
      if (j.contains("highlight")) o.highlight = range_from_json(j["highlight"]);
      if (j.contains("config")) o.config = config_from_json(j["config"]);
      const auto child = ws_.fork(req.matches[1], o);
      reply(req, res, 201, session_state(child.id));
    }));

    server_.Post(R"(/v1/sessions/([^/]+)/pseudocause)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto j = body_json(req);
      const auto kind = parse_pseudocause_kind(j.value("kind", std::string("seasonal")));
      int param = j.value("param", 0);
      if (j.contains("period")) param = j["period"].get<int>();
      if (j.contains("window")) param = j["window"].get<int>();
      std::vector<double> series;
      if (j.contains("series")) series = j["series"].get<std::vector<double>>();
      const auto pc = ws_.add_pseudocause(id, j.value("source", std::string()), kind, param, series,
                                          j.value("condition", true), j.value("key", std::string()));
      reply(req, res, 201, {{"family", pc.key}, {"source", pc.source}, {"kind", pseudocause_kind_name(pc.kind)},
                            {"param", pc.param}, {"session", session_state(id)}});
    }));
  }

  const Job* find_job(const std::string& session, std::size_t id) const {
    for (const auto& j : jobs_)
      if (j.session == session && j.id == id) return &j;
    return nullptr;
  }

  void work() {
    while (true) {
      Job* job = nullptr;
      {
        std::unique_lock lock(jobs_mutex_);
        jobs_cv_.wait(lock, [&] {
          if (shutdown_) return true;
          for (auto& j : jobs_)
            if (j.status == "queued") return true;
          return false;
        });
        if (shutdown_) return;
        for (auto& j : jobs_)
          if (j.status == "queued") {
            job = &j;
            break;
          }
        job->status = "running";
      }
      std::string status = "done";
      std::size_t run = 0;
      ApiError err;
      try {
        run = ws_.run(job->session, job->token).number;
      } catch (...) {
        status = "failed";
        err = classify(std::current_exception());
      }
      {
        std::lock_guard lock(jobs_mutex_);
        job->status = status;
        job->run = run;
        job->error = err;
      }
      done_cv_.notify_all();
    }
  }

  Workspace ws_;
  httplib::Server server_;
  std::mutex jobs_mutex_;
  std::condition_variable jobs_cv_;
  std::condition_variable done_cv_;
  std::deque<Job> jobs_;  // deque keeps element addresses stable on push_back
  bool shutdown_ = false;
  std::thread worker_;
};

}  // namespace causerank::http
