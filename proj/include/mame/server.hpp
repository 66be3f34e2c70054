#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include <json.hpp>

#include "mame/observer.hpp"
#include "mame/session.hpp"

namespace httplib {
class Server;
}

namespace mame {

struct ServerConfig {
  std::string host = "127.0.0.1";
  /// 0 picks a free port.
  int port = 8080;
  std::filesystem::path dataDir = "data";
  /// Seconds next-trial waits for synthesis before answering 503.
  double responseBudget = 3.0;
  int workers = 2;
  bool prefetch = true;
  int snapshotEvery = 25;
  bool fsync = true;
  /// configRef -> pipeline config file.
  std::map<std::string, std::filesystem::path> configs;

  void validate() const;
};

void to_json(nlohmann::json& j, const ServerConfig& c);
void from_json(const nlohmann::json& j, ServerConfig& c);

/// Reads the JSON file (relative config paths resolve against its directory);
/// MAME_DATA_DIR, when set, replaces dataDir.
ServerConfig load_server_config(const std::filesystem::path& path);
void apply_environment(ServerConfig& c);

/// JSON-over-HTTP experiment server. Sessions found under dataDir/sessions are
/// recovered on construction; stimuli live under dataDir/stimuli.
class Server {
 public:
  Server(ServerConfig config, std::map<std::string, std::shared_ptr<const ExperimentAssets>> assets);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and serves on a background thread. Returns the bound port.
  int start();
  /// Binds and serves on the calling thread until `stop`.
  void run();
  void stop();

  std::size_t session_count() const;

 private:
  struct State;
  void install_routes();
  int bind();

  ServerConfig config_;
  std::unique_ptr<State> state_;
  std::unique_ptr<httplib::Server> http_;
  std::thread thread_;
};

struct ClientRun {
  std::size_t answered = 0;
  std::size_t budgetRetries = 0;
  bool exhausted = false;
};

/// Headless ABX client driven by the simulated observer: fetches trials and
/// stimulus PNGs over HTTP and posts the observer's answers, for at most
/// `maxTrials` trials.
ClientRun run_observer_client(const std::string& host, int port, const std::string& sessionId,
                              const ObserverModel& observer, std::size_t maxTrials = static_cast<std::size_t>(-1));

}  // namespace mame
