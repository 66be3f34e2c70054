#include "mame/server.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <random>
#include <set>
#include <shared_mutex>

namespace mame {

namespace fs = std::filesystem;
using nlohmann::json;

void ServerConfig::validate() const {
  if (port < 0 || port > 65535) throw ConfigError("port out of range: " + std::to_string(port));
  if (!(responseBudget > 0.0)) throw ConfigError("responseBudget must be positive");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (snapshotEvery < 1) throw ConfigError("snapshotEvery must be >= 1");
  if (dataDir.empty()) throw ConfigError("dataDir is empty");
}

void to_json(json& j, const ServerConfig& c) {
  json configs = json::object();
  for (const auto& [k, v] : c.configs) configs[k] = v.string();
  j = {{"host", c.host},
       {"port", c.port},
       {"dataDir", c.dataDir.string()},
       {"responseBudget", c.responseBudget},
       {"workers", c.workers},
       {"prefetch", c.prefetch},
       {"snapshotEvery", c.snapshotEvery},
       {"fsync", c.fsync},
       {"configs", configs}};
}

void from_json(const json& j, ServerConfig& c) {
  static const std::set<std::string> known{"host",          "port",  "dataDir", "responseBudget", "workers",
                                           "prefetch",      "fsync", "configs", "snapshotEvery"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown server config key \"" + k + "\"");
  }
  ServerConfig d;
  c.host = j.value("host", d.host);
  c.port = j.value("port", d.port);
  c.dataDir = j.value("dataDir", d.dataDir.string());
  c.responseBudget = j.value("responseBudget", d.responseBudget);
  c.workers = j.value("workers", d.workers);
  c.prefetch = j.value("prefetch", d.prefetch);
  c.snapshotEvery = j.value("snapshotEvery", d.snapshotEvery);
  c.fsync = j.value("fsync", d.fsync);
  c.configs.clear();
  if (j.contains("configs")) {
    for (const auto& [k, v] : j.at("configs").items()) c.configs[k] = v.get<std::string>();
  }
}

void apply_environment(ServerConfig& c) {
  if (const char* dir = std::getenv("MAME_DATA_DIR"); dir && *dir) c.dataDir = dir;
}

ServerConfig load_server_config(const fs::path& path) {
  ServerConfig c;
  try {
    c = json::parse(read_text(path)).get<ServerConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  if (c.dataDir.is_relative()) c.dataDir = base / c.dataDir;
  for (auto& [k, p] : c.configs) {
    if (p.is_relative()) p = base / p;
  }
  apply_environment(c);
  c.validate();
  return c;
}

namespace {

std::string random_token() {
  std::random_device rd;
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  for (int i = 0; i < 8; ++i) {
    const unsigned v = rd();
    for (int b = 0; b < 4; ++b) {
      const unsigned byte = (v >> (8 * b)) & 0xff;
      out.push_back(digits[byte >> 4]);
      out.push_back(digits[byte & 15]);
    }
  }
  return out;
}

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void fail(httplib::Response& res, int status, const std::string& message) {
  reply(res, status, {{"error", message}});
}

json staircase_summary(const StaircaseState& s) {
  return {{"conditionKey", condition_key(s.condition)},
          {"currentTarget", s.currentTarget},
          {"reversalCount", s.reversals.size()},
          {"trialCount", s.trialCount},
          {"status", s.status == StaircaseStatus::converged ? "converged" : "running"}};
}

}  // namespace

struct Server::State {
  std::map<std::string, std::shared_ptr<StimulusCache>> caches;
  mutable std::shared_mutex mutex;
  std::map<std::string, std::shared_ptr<Session>> sessions;
  /// idempotency key -> session id
  std::map<std::string, std::string> keys;
  std::mutex createMutex;

  std::shared_ptr<Session> find(const std::string& id) const {
    std::shared_lock lock(mutex);
    auto it = sessions.find(id);
    return it == sessions.end() ? nullptr : it->second;
  }
};

Server::Server(ServerConfig config, std::map<std::string, std::shared_ptr<const ExperimentAssets>> assets)
    : config_(std::move(config)), state_(std::make_unique<State>()), http_(std::make_unique<httplib::Server>()) {
  config_.validate();
  fs::create_directories(config_.dataDir / "sessions");
  for (auto& [ref, a] : assets) {
    state_->caches[ref] = std::make_shared<StimulusCache>(a, config_.dataDir / "stimuli", config_.workers);
  }
  SessionOptions opts{config_.responseBudget, config_.prefetch, config_.snapshotEvery, config_.fsync};
  for (const auto& entry : fs::directory_iterator(config_.dataDir / "sessions")) {
    if (!fs::exists(entry.path() / "session.json")) continue;  // creation interrupted before commit
    const SessionInfo info = read_session_info(entry.path());
    auto cache = state_->caches.find(info.configRef);
    if (cache == state_->caches.end()) {
      throw ConfigError("session " + info.sessionId + " uses unknown configRef \"" + info.configRef + "\"");
    }
    auto s = std::shared_ptr<Session>(Session::open(entry.path(), cache->second, opts));
    if (!info.idempotencyKey.empty()) state_->keys[info.idempotencyKey] = info.sessionId;
    state_->sessions[info.sessionId] = std::move(s);
  }
  install_routes();
}

Server::~Server() { stop(); }

std::size_t Server::session_count() const {
  std::shared_lock lock(state_->mutex);
  return state_->sessions.size();
}

void Server::install_routes() {
  auto& st = *state_;
  auto& http = *http_;
  const SessionOptions opts{config_.responseBudget, config_.prefetch, config_.snapshotEvery, config_.fsync};
  const fs::path sessionsDir = config_.dataDir / "sessions";

  http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      fail(res, 500, e.what());
    }
  });

  http.Post("/sessions", [&st, opts, sessionsDir](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return fail(res, 400, "body is not JSON");
    }
    if (!body.is_object()) return fail(res, 400, "body must be an object");
    if (!body.contains("subjectId") || !body["subjectId"].is_string() || body["subjectId"].get<std::string>().empty()) {
      return fail(res, 400, "subjectId is required");
    }
    if (!body.contains("configRef") || !body["configRef"].is_string()) return fail(res, 400, "configRef is required");
    if (!body.contains("seed") || !body["seed"].is_number_unsigned()) {
      return fail(res, 400, "seed must be a non-negative integer");
    }
    const auto cache = st.caches.find(body["configRef"].get<std::string>());
    if (cache == st.caches.end()) return fail(res, 400, "unknown configRef \"" + body["configRef"].get<std::string>() + "\"");

    SessionInfo info;
    info.subjectId = body["subjectId"];
    info.configRef = body["configRef"];
    info.seed = body["seed"].get<std::uint64_t>();
    info.idempotencyKey = req.get_header_value("Idempotency-Key");

    std::lock_guard create(st.createMutex);
    if (!info.idempotencyKey.empty()) {
      std::shared_lock lock(st.mutex);
      if (auto k = st.keys.find(info.idempotencyKey); k != st.keys.end()) {
        const SessionInfo& prior = st.sessions.at(k->second)->info();
        if (prior.subjectId != info.subjectId || prior.configRef != info.configRef || prior.seed != info.seed) {
          return fail(res, 409, "idempotency key already used for a different request");
        }
        return reply(res, 200, {{"sessionId", prior.sessionId}});
      }
    }
    info.sessionId = random_token();
    auto s = std::shared_ptr<Session>(Session::create(sessionsDir / info.sessionId, info, cache->second, opts));
    {
      std::unique_lock lock(st.mutex);
      if (!info.idempotencyKey.empty()) st.keys[info.idempotencyKey] = info.sessionId;
      st.sessions[info.sessionId] = s;
    }
    reply(res, 201, {{"sessionId", info.sessionId}});
  });

  http.Get("/sessions/:id/next-trial", [&st](const httplib::Request& req, httplib::Response& res) {
    auto s = st.find(req.path_params.at("id"));
    if (!s) return fail(res, 404, "unknown session");
    try {
      reply(res, 200, s->next_trial().to_json());
    } catch (const ExhaustedError& e) {
      fail(res, 410, e.what());
    } catch (const BudgetError& e) {
      res.set_header("Retry-After", "1");
      fail(res, 503, e.what());
    }
  });

  http.Post("/sessions/:id/responses", [&st](const httplib::Request& req, httplib::Response& res) {
    auto s = st.find(req.path_params.at("id"));
    if (!s) return fail(res, 404, "unknown session");
    Submission sub;
    try {
      const json body = json::parse(req.body);
      if (!body.at("trialIndex").is_number_unsigned()) return fail(res, 400, "trialIndex must be a non-negative integer");
      sub.trialIndex = body.at("trialIndex").get<std::size_t>();
      sub.response = parse_choice(body.at("response").get<std::string>());
      sub.gazeValid = body.at("gazeValid").get<bool>();
      sub.clientTimings = body.value("clientTimings", json::object());
    } catch (const json::exception& e) {
      return fail(res, 400, e.what());
    } catch (const ConfigError& e) {
      return fail(res, 400, e.what());
    }
    try {
      const SubmitResult r = s->submit(sub);
      reply(res, 200, {{"accepted", true},
                       {"trialIndex", r.outcome.trialIndex},
                       {"correct", r.outcome.correct},
                       {"cursor", s->cursor()},
                       {"staircaseStatusSummary", staircase_summary(r.staircase)}});
    } catch (const StateError& e) {
      fail(res, 409, e.what());
    }
  });

  http.Get("/sessions/:id/status", [&st](const httplib::Request& req, httplib::Response& res) {
    auto s = st.find(req.path_params.at("id"));
    if (!s) return fail(res, 404, "unknown session");
    reply(res, 200, s->status_json());
  });

  http.Get("/sessions/:id/results", [&st](const httplib::Request& req, httplib::Response& res) {
    auto s = st.find(req.path_params.at("id"));
    if (!s) return fail(res, 404, "unknown session");
    reply(res, 200, s->results());
  });

  http.Get("/stimuli/:id", [&st](const httplib::Request& req, httplib::Response& res) {
    const std::string& id = req.path_params.at("id");
    for (const auto& [ref, cache] : st.caches) {
      if (auto bytes = cache->png(id)) {
        res.set_header("Cache-Control", "public, max-age=31536000, immutable");
        res.set_content(reinterpret_cast<const char*>(bytes->data()), bytes->size(), "image/png");
        return;
      }
    }
    fail(res, 404, "unknown stimulus");
  });

  http.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { reply(res, 200, {{"ok", true}}); });
}

int Server::bind() {
  int port = config_.port;
  if (port == 0) {
    port = http_->bind_to_any_port(config_.host);
  } else if (!http_->bind_to_port(config_.host, port)) {
    port = -1;
  }
  if (port < 0) throw IoError("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  return port;
}

int Server::start() {
  const int port = bind();
  thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
  return port;
}

void Server::run() {
  const int port = bind();
  std::cerr << "listening on " << config_.host << ":" << port << "\n";
  http_->listen_after_bind();
}

void Server::stop() {
  if (http_) http_->stop();
  if (thread_.joinable()) thread_.join();
}

ClientRun run_observer_client(const std::string& host, int port, const std::string& sessionId,
                              const ObserverModel& observer, std::size_t maxTrials) {
  httplib::Client cli(host, port);
  cli.set_read_timeout(600, 0);
  const std::string base = "/sessions/" + sessionId;
  ClientRun run;
  auto fetch_png = [&](const std::string& url) {
    auto r = cli.Get(url);
    if (!r || r->status != 200) throw IoError("GET " + url + " failed");
    return decode_png(std::span(reinterpret_cast<const std::uint8_t*>(r->body.data()), r->body.size()));
  };
  while (run.answered < maxTrials) {
    auto r = cli.Get(base + "/next-trial");
    if (!r) throw IoError("GET next-trial: " + httplib::to_string(r.error()));
    if (r->status == 410) {
      run.exhausted = true;
      break;
    }
    if (r->status == 503) {
      ++run.budgetRetries;
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
      continue;
    }
    if (r->status != 200) throw IoError("GET next-trial returned " + std::to_string(r->status) + ": " + r->body);
    const json j = json::parse(r->body);
    const TrialSpec spec = j.get<TrialSpec>();
    const ImageTensor a = fetch_png(j.at("stimulusUrls").at("A"));
    const ImageTensor b = fetch_png(j.at("stimulusUrls").at("B"));
    const bool refIsA = spec.referenceAt == Choice::A;
    const TrialOutcome o = observe(observer, spec, refIsA ? a : b, refIsA ? b : a);
    const json body = {{"trialIndex", o.trialIndex},
                       {"response", std::string(to_string(o.response))},
                       {"gazeValid", o.gazeValid},
                       {"clientTimings", {{"driver", "observer"}}}};
    auto p = cli.Post(base + "/responses", body.dump(), "application/json");
    if (!p) throw IoError("POST responses: " + httplib::to_string(p.error()));
    if (p->status != 200) throw IoError("POST responses returned " + std::to_string(p->status) + ": " + p->body);
    ++run.answered;
  }
  return run;
}

}  // namespace mame
