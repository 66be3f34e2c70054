#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mame/adaptive.hpp"
#include "mame/backbone.hpp"
#include "mame/error.hpp"
#include "mame/ica.hpp"
#include "mame/image.hpp"
#include "mame/observer.hpp"
#include "mame/synthesis.hpp"

namespace mame {

inline constexpr const char* kLogSchema = "mame-log/1";
inline constexpr const char* kSnapshotSchema = "mame-snapshot/1";

/// Everything needed to run sessions under one configuration.
struct ExperimentAssets {
  ExperimentAssets(Backbone backbone, std::map<Tap, IcaModel> models, std::map<std::string, ImageTensor> references,
                   StaircaseConfig staircase, OptimConfig optim);

  Backbone backbone;
  std::map<Tap, IcaModel> models;
  /// Quantized to 8 bits on construction, since that is what observers see.
  std::map<std::string, ImageTensor> references;
  StaircaseConfig staircase;
  OptimConfig optim;
  /// Hash of backbone config, model matrices and optimizer settings; part of every stimulus id.
  std::string fingerprint;

  std::vector<std::string> reference_ids() const;
};

struct StimulusKey {
  Tap tap = Tap::early;
  int component = 0;
  int direction = 1;
  std::string referenceImageId;
  double target = 0.0;

  static StimulusKey of(const TrialSpec& trial);
};

struct Stimulus {
  std::string id;
  ImageTensor image;
  std::vector<std::uint8_t> png;
  /// role, key, and for perturbed stimuli the synthesis summary.
  nlohmann::json record;
};

using StimulusPtr = std::shared_ptr<const Stimulus>;

/// Fixed-size FIFO thread pool.
class WorkerPool {
 public:
  explicit WorkerPool(int workers);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  void post(std::function<void()> job);

 private:
  void loop();

  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  bool stopping_ = false;
  std::vector<std::thread> threads_;
};

/// Content-addressed stimulus store. Ids are derived from the assets fingerprint
/// and the stimulus key, so an id always maps to the same bytes. Synthesis runs
/// on a bounded worker pool; concurrent requests for one id share a single job.
/// With a directory, PNGs and JSON records persist across restarts.
class StimulusCache {
 public:
  StimulusCache(std::shared_ptr<const ExperimentAssets> assets, std::optional<std::filesystem::path> dir,
                int workers = 1);

  const ExperimentAssets& assets() const { return *assets_; }

  std::string id_for(const StimulusKey& key) const;
  std::string reference_id(const std::string& referenceImageId) const;

  std::shared_future<StimulusPtr> request(const StimulusKey& key);
  StimulusPtr get(const StimulusKey& key) { return request(key).get(); }
  StimulusPtr reference(const std::string& referenceImageId);

  /// PNG bytes of an issued or persisted stimulus; nullopt for unknown ids.
  std::optional<std::vector<std::uint8_t>> png(const std::string& id);

  /// Number of synthesis runs started by this instance.
  std::size_t syntheses() const;

 private:
  StimulusPtr load_from_disk(const std::string& id);
  void persist(const Stimulus& s) const;

  std::shared_ptr<const ExperimentAssets> assets_;
  std::optional<std::filesystem::path> dir_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_future<StimulusPtr>> entries_;
  std::size_t syntheses_ = 0;
  WorkerPool pool_;
};

/// Plausible stimulus ids look like "p" or "r" plus 32 hex digits.
bool valid_stimulus_id(const std::string& id);

struct LogEntry {
  TrialSpec trial;
  TrialOutcome outcome;
};

nlohmann::json log_line(const LogEntry& e, const std::string& referenceStimulusId,
                        const std::string& perturbedStimulusId);

struct LogContents {
  std::vector<LogEntry> entries;
  /// Length of the prefix made of complete lines.
  std::uintmax_t validBytes = 0;
  /// A trailing line without newline (a write interrupted before acknowledgment).
  bool tornTail = false;
};

/// Throws StateError on schema mismatch or non-consecutive trial indices.
LogContents read_log(const std::filesystem::path& path);

/// Rebuilds an experiment from a log, checking every logged TrialSpec against
/// the regenerated one.
Experiment replay_log(const std::vector<LogEntry>& entries, const StaircaseConfig& config, std::uint64_t seed,
                      const std::vector<std::string>& referencePool);

class ExhaustedError : public StateError {
 public:
  using StateError::StateError;
};

/// Duplicate or out-of-order submission.
class ConflictError : public StateError {
 public:
  using StateError::StateError;
};

/// The stimulus was not ready within the response budget; the job keeps running.
class BudgetError : public Error {
 public:
  using Error::Error;
};

struct SessionOptions {
  /// Seconds next-trial waits for its stimulus.
  double responseBudget = 3.0;
  bool prefetch = true;
  int snapshotEvery = 25;
  bool fsync = true;
};

struct SessionInfo {
  std::string sessionId;
  std::string subjectId;
  std::string configRef;
  std::uint64_t seed = 0;
  std::string createdAt;
  std::string idempotencyKey;
};

void to_json(nlohmann::json& j, const SessionInfo& s);
void from_json(const nlohmann::json& j, SessionInfo& s);

SessionInfo read_session_info(const std::filesystem::path& dir);

struct IssuedTrial {
  TrialSpec trial;
  std::string referenceStimulusId;
  std::string perturbedStimulusId;

  const std::string& stimulus_at(Choice c) const {
    return c == trial.referenceAt ? referenceStimulusId : perturbedStimulusId;
  }
  /// TrialSpec fields plus stimulusIds and stimulus URLs for A, B and X.
  nlohmann::json to_json() const;
};

struct Submission {
  std::size_t trialIndex = 0;
  Choice response = Choice::A;
  bool gazeValid = true;
  nlohmann::json clientTimings = nlohmann::json::object();
};

struct SubmitResult {
  TrialOutcome outcome;
  StaircaseState staircase;
};

enum class SessionStatus { active, complete };
std::string_view to_string(SessionStatus s);

/// One subject's run. Directory layout: session.json, log.jsonl, snapshot.json.
/// Trial issuance and response handling are serialized by an internal mutex.
class Session {
 public:
  /// Persists session.json and an empty log before returning.
  static std::unique_ptr<Session> create(const std::filesystem::path& dir, SessionInfo info,
                                         std::shared_ptr<StimulusCache> cache, SessionOptions options = {});
  /// Recovers from disk: snapshot, then the log tail. A torn final log line is truncated.
  static std::unique_ptr<Session> open(const std::filesystem::path& dir, std::shared_ptr<StimulusCache> cache,
                                       SessionOptions options = {});
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const SessionInfo& info() const { return info_; }
  StimulusCache& cache() { return *cache_; }

  /// Same trial until it is answered. Throws ExhaustedError or BudgetError.
  IssuedTrial next_trial();
  /// Log write precedes the state change. Throws ConflictError, ExhaustedError.
  SubmitResult submit(const Submission& s);

  std::size_t cursor() const;
  SessionStatus status() const;
  std::vector<StaircaseState> staircases() const;
  std::vector<ThresholdRecord> results() const;
  nlohmann::json status_json() const;

 private:
  Session(std::filesystem::path dir, SessionInfo info, std::shared_ptr<StimulusCache> cache, SessionOptions options);

  void append_log(const std::string& line);
  void write_snapshot() const;
  void prefetch_after(const Experiment& state);

  std::filesystem::path dir_;
  SessionInfo info_;
  std::shared_ptr<StimulusCache> cache_;
  SessionOptions options_;
  mutable std::mutex mutex_;
  Experiment experiment_;
  int logFd_ = -1;
};

/// The observer's answer on a trial given the two images it saw.
TrialOutcome observe(const ObserverModel& observer, const TrialSpec& trial, const ImageTensor& reference,
                     const ImageTensor& perturbed);

struct SimulationResult {
  std::vector<ThresholdRecord> thresholds;
  std::vector<StaircaseState> staircases;
  std::vector<TrialOutcome> outcomes;
};

/// Full session against the simulated observer, no HTTP and no disk log.
SimulationResult simulate_session(StimulusCache& cache, std::uint64_t seed, const std::string& subjectId,
                                  const ObserverModel& observer);

}  // namespace mame
