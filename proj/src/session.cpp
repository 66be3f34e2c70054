#include "mame/session.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "mame/hash.hpp"

namespace mame {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hash_matrix(const Eigen::MatrixXd& m) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
  return sha256_hex(std::span<const std::uint8_t>(p, static_cast<std::size_t>(m.size()) * sizeof(double)));
}

std::string format_target(double t) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", t);
  return buf;
}

std::string utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json key_json(const StimulusKey& k) {
  return {{"tap", std::string(to_string(k.tap))},
          {"component", k.component},
          {"direction", k.direction},
          {"referenceImageId", k.referenceImageId},
          {"target", k.target}};
}

}  // namespace

ExperimentAssets::ExperimentAssets(Backbone backbone_, std::map<Tap, IcaModel> models_,
                                   std::map<std::string, ImageTensor> references_, StaircaseConfig staircase_,
                                   OptimConfig optim_)
    : backbone(std::move(backbone_)),
      models(std::move(models_)),
      staircase(std::move(staircase_)),
      optim(optim_) {
  staircase.validate();
  optim.validate();
  for (Tap tap : kAllTaps) {
    if (!models.count(tap)) throw ConfigError("missing ICA model for tap " + std::string(to_string(tap)));
  }
  if (references_.empty()) throw ConfigError("reference pool is empty");
  json fp = {{"backbone", backbone.config()}, {"optim", optim}};
  for (const auto& [tap, m] : models) {
    if (m.tap != tap) throw ConfigError("model stored under the wrong tap");
    if (m.selected.size() < 3) throw ConfigError("model for tap " + std::string(to_string(tap)) + " selects fewer than 3 components");
    fp["models"][std::string(to_string(tap))] = {
        {"mean", hash_matrix(m.mean)}, {"combined", hash_matrix(m.combined)}, {"selected", m.selected}};
  }
  for (auto& [id, img] : references_) {
    if (img.shape() != backbone.config().input) throw DimensionError("reference " + id + " has shape " + mame::to_string(img.shape()));
    ImageTensor q = quantize_8bit(img);
    std::vector<double> px(q.data().begin(), q.data().end());
    fp["references"][id] = hash_matrix(Eigen::Map<const Eigen::VectorXd>(px.data(), static_cast<Eigen::Index>(px.size())));
    references.emplace(id, std::move(q));
  }
  fingerprint = sha256_hex(fp.dump());
}

std::vector<std::string> ExperimentAssets::reference_ids() const {
  std::vector<std::string> ids;
  for (const auto& kv : references) ids.push_back(kv.first);
  return ids;
}

StimulusKey StimulusKey::of(const TrialSpec& t) {
  return {t.condition.tap, t.condition.component, t.condition.direction, t.referenceImageId, t.target};
}

WorkerPool::WorkerPool(int workers) {
  if (workers < 1) throw ConfigError("worker count must be >= 1");
  for (int i = 0; i < workers; ++i) threads_.emplace_back([this] { loop(); });
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
    queue_.clear();
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void WorkerPool::post(std::function<void()> job) {
  {
    std::lock_guard lock(mutex_);
    queue_.push_back(std::move(job));
  }
  cv_.notify_one();
}

void WorkerPool::loop() {
  for (;;) {
    std::function<void()> job;
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      job = std::move(queue_.front());
      queue_.pop_front();
    }
    job();
  }
}

StimulusCache::StimulusCache(std::shared_ptr<const ExperimentAssets> assets, std::optional<fs::path> dir,
                             int workers)
    : assets_(std::move(assets)), dir_(std::move(dir)), pool_(workers) {
  if (!assets_) throw ConfigError("stimulus cache needs assets");
  if (dir_) fs::create_directories(*dir_);
}

std::string StimulusCache::id_for(const StimulusKey& k) const {
  const std::string material = assets_->fingerprint + "|" + std::string(to_string(k.tap)) + "|" +
                               std::to_string(k.component) + "|" + std::to_string(k.direction) + "|" +
                               k.referenceImageId + "|" + format_target(k.target);
  return "p" + sha256_hex(material).substr(0, 32);
}

std::string StimulusCache::reference_id(const std::string& refId) const {
  return "r" + sha256_hex(assets_->fingerprint + "|" + refId).substr(0, 32);
}

bool valid_stimulus_id(const std::string& id) {
  if (id.size() != 33 || (id[0] != 'p' && id[0] != 'r')) return false;
  for (std::size_t i = 1; i < id.size(); ++i) {
    const char c = id[i];
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  }
  return true;
}

StimulusPtr StimulusCache::load_from_disk(const std::string& id) {
  if (!dir_) return nullptr;
  const fs::path png = *dir_ / (id + ".png");
  const fs::path rec = *dir_ / (id + ".json");
  if (!fs::exists(png) || !fs::exists(rec)) return nullptr;
  auto s = std::make_shared<Stimulus>();
  s->id = id;
  s->png = read_file_bytes(png);
  s->image = decode_png(s->png);
  s->record = json::parse(read_text(rec));
  return s;
}

void StimulusCache::persist(const Stimulus& s) const {
  if (!dir_) return;
  // PNG first: the record marks the pair complete.
  write_file_atomic(*dir_ / (s.id + ".png"), s.png);
  write_text_atomic(*dir_ / (s.id + ".json"), s.record.dump(2) + "\n");
}

std::shared_future<StimulusPtr> StimulusCache::request(const StimulusKey& key) {
  const auto ref = assets_->references.find(key.referenceImageId);
  if (ref == assets_->references.end()) throw ConfigError("unknown reference image " + key.referenceImageId);
  const std::string id = id_for(key);
  std::lock_guard lock(mutex_);
  if (auto it = entries_.find(id); it != entries_.end()) return it->second;
  if (StimulusPtr disk = load_from_disk(id)) {
    std::promise<StimulusPtr> ready;
    ready.set_value(disk);
    return entries_[id] = ready.get_future().share();
  }
  auto promise = std::make_shared<std::promise<StimulusPtr>>();
  auto future = promise->get_future().share();
  entries_[id] = future;
  ++syntheses_;
  pool_.post([this, key, id, promise] {
    try {
      const ExperimentAssets& a = *assets_;
      SynthesisSpec spec{key.tap, key.component, key.direction, key.target, key.referenceImageId};
      const IcaModel& model = a.models.at(key.tap);
      const SynthesisResult r = synthesize(a.backbone, model, a.references.at(key.referenceImageId), spec, a.optim);
      auto s = std::make_shared<Stimulus>();
      s->id = id;
      s->image = quantize_8bit(r.image);
      s->png = encode_png(s->image);
      s->record = {{"stimulusId", id},
                   {"role", "perturbed"},
                   {"key", key_json(key)},
                   {"synthesis", summary_json(r, model.selected)}};
      persist(*s);
      promise->set_value(std::move(s));
    } catch (...) {
      {
        std::lock_guard relock(mutex_);
        entries_.erase(id);
      }
      promise->set_exception(std::current_exception());
    }
  });
  return future;
}

StimulusPtr StimulusCache::reference(const std::string& refId) {
  const auto ref = assets_->references.find(refId);
  if (ref == assets_->references.end()) throw ConfigError("unknown reference image " + refId);
  const std::string id = reference_id(refId);
  std::lock_guard lock(mutex_);
  if (auto it = entries_.find(id); it != entries_.end()) return it->second.get();
  auto s = std::make_shared<Stimulus>();
  s->id = id;
  s->image = ref->second;
  s->png = encode_png(s->image);
  s->record = {{"stimulusId", id}, {"role", "reference"}, {"referenceImageId", refId}};
  persist(*s);
  std::promise<StimulusPtr> ready;
  ready.set_value(s);
  entries_[id] = ready.get_future().share();
  return s;
}

std::optional<std::vector<std::uint8_t>> StimulusCache::png(const std::string& id) {
  if (!valid_stimulus_id(id)) return std::nullopt;
  std::shared_future<StimulusPtr> f;
  {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(id);
    if (it == entries_.end()) {
      StimulusPtr disk = load_from_disk(id);
      if (!disk) return std::nullopt;
      return disk->png;
    }
    f = it->second;
  }
  // Only issued stimuli are served; a job still in flight has not been issued.
  if (f.wait_for(std::chrono::seconds(0)) != std::future_status::ready) return std::nullopt;
  try {
    return f.get()->png;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::size_t StimulusCache::syntheses() const {
  std::lock_guard lock(mutex_);
  return syntheses_;
}

json log_line(const LogEntry& e, const std::string& referenceStimulusId, const std::string& perturbedStimulusId) {
  return {{"schema", kLogSchema},
          {"trialIndex", e.trial.trialIndex},
          {"trial", e.trial},
          {"outcome", e.outcome},
          {"stimuli", {{"reference", referenceStimulusId}, {"perturbed", perturbedStimulusId}}}};
}

LogContents read_log(const fs::path& path) {
  LogContents out;
  if (!fs::exists(path)) return out;
  const std::string text = read_text(path);
  std::size_t pos = 0;
  std::size_t lineNo = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      out.tornTail = true;
      break;
    }
    ++lineNo;
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw StateError(path.string() + ":" + std::to_string(lineNo) + ": " + e.what());
    }
    if (j.value("schema", "") != kLogSchema) {
      throw StateError(path.string() + ":" + std::to_string(lineNo) + ": expected schema " + kLogSchema);
    }
    LogEntry e{j.at("trial").get<TrialSpec>(), j.at("outcome").get<TrialOutcome>()};
    if (e.trial.trialIndex != out.entries.size() || e.outcome.trialIndex != e.trial.trialIndex) {
      throw StateError(path.string() + ":" + std::to_string(lineNo) + ": trial index " +
                       std::to_string(e.trial.trialIndex) + " out of sequence");
    }
    out.entries.push_back(std::move(e));
    out.validBytes = pos;
  }
  return out;
}

namespace {

void apply_checked(Experiment& exp, const LogEntry& e) {
  const TrialSpec expected = exp.current_trial();
  if (!(expected == e.trial)) {
    throw StateError("log trial " + std::to_string(e.trial.trialIndex) + " does not match the regenerated trial");
  }
  if (e.outcome.correct != (e.outcome.response == expected.xIs)) {
    throw StateError("log trial " + std::to_string(e.trial.trialIndex) + " has an inconsistent correctness flag");
  }
  exp.apply(e.outcome);
}

}  // namespace

Experiment replay_log(const std::vector<LogEntry>& entries, const StaircaseConfig& config, std::uint64_t seed,
                      const std::vector<std::string>& pool) {
  Experiment exp(config, seed, pool);
  for (const auto& e : entries) apply_checked(exp, e);
  return exp;
}

void to_json(json& j, const SessionInfo& s) {
  j = {{"sessionId", s.sessionId},
       {"subjectId", s.subjectId},
       {"configRef", s.configRef},
       {"seed", s.seed},
       {"createdAt", s.createdAt},
       {"idempotencyKey", s.idempotencyKey}};
}

void from_json(const json& j, SessionInfo& s) {
  s.sessionId = j.at("sessionId").get<std::string>();
  s.subjectId = j.at("subjectId").get<std::string>();
  s.configRef = j.at("configRef").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.createdAt = j.value("createdAt", "");
  s.idempotencyKey = j.value("idempotencyKey", "");
}

SessionInfo read_session_info(const fs::path& dir) {
  return json::parse(read_text(dir / "session.json")).get<SessionInfo>();
}

json IssuedTrial::to_json() const {
  json j = trial;
  const std::string& a = stimulus_at(Choice::A);
  const std::string& b = stimulus_at(Choice::B);
  const std::string& x = trial.xIs == Choice::A ? a : b;
  j["stimulusIds"] = {{"A", a}, {"B", b}, {"X", x}};
  j["stimulusUrls"] = {{"A", "/stimuli/" + a}, {"B", "/stimuli/" + b}, {"X", "/stimuli/" + x}};
  return j;
}

std::string_view to_string(SessionStatus s) { return s == SessionStatus::active ? "active" : "complete"; }

Session::Session(fs::path dir, SessionInfo info, std::shared_ptr<StimulusCache> cache, SessionOptions options)
    : dir_(std::move(dir)),
      info_(std::move(info)),
      cache_(std::move(cache)),
      options_(options),
      experiment_(cache_->assets().staircase, info_.seed, cache_->assets().reference_ids()) {
  if (options_.snapshotEvery < 1) throw ConfigError("snapshotEvery must be >= 1");
  if (!(options_.responseBudget > 0.0)) throw ConfigError("responseBudget must be positive");
}

Session::~Session() {
  if (logFd_ >= 0) ::close(logFd_);
}

namespace {

int open_log(const fs::path& path) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("cannot open log " + path.string());
  return fd;
}

}  // namespace

std::unique_ptr<Session> Session::create(const fs::path& dir, SessionInfo info, std::shared_ptr<StimulusCache> cache,
                                         SessionOptions options) {
  if (info.sessionId.empty()) throw ConfigError("session id is empty");
  if (info.subjectId.empty()) throw ConfigError("subjectId is empty");
  if (fs::exists(dir / "session.json")) throw StateError("session directory already in use: " + dir.string());
  if (info.createdAt.empty()) info.createdAt = utc_now();
  std::unique_ptr<Session> s(new Session(dir, std::move(info), std::move(cache), options));
  fs::create_directories(dir);
  s->logFd_ = open_log(dir / "log.jsonl");
  s->write_snapshot();
  // session.json last: its presence marks a complete session directory.
  write_text_atomic(dir / "session.json", json(s->info_).dump(2) + "\n");
  if (s->options_.prefetch) s->prefetch_after(s->experiment_);
  return s;
}

std::unique_ptr<Session> Session::open(const fs::path& dir, std::shared_ptr<StimulusCache> cache,
                                       SessionOptions options) {
  SessionInfo info = read_session_info(dir);
  std::unique_ptr<Session> s(new Session(dir, std::move(info), std::move(cache), options));
  const fs::path logPath = dir / "log.jsonl";
  const LogContents log = read_log(logPath);
  if (log.tornTail) fs::resize_file(logPath, log.validBytes);

  std::size_t from = 0;
  const fs::path snap = dir / "snapshot.json";
  if (fs::exists(snap)) {
    const json j = json::parse(read_text(snap));
    if (j.value("schema", "") != kSnapshotSchema) throw StateError(snap.string() + ": unexpected schema");
    const auto cursor = j.at("cursor").get<std::size_t>();
    // A snapshot can only lag the log, since the log is written first.
    if (cursor <= log.entries.size()) {
      s->experiment_.restore(cursor, j.at("staircases").get<std::vector<StaircaseState>>());
      from = cursor;
    }
  }
  for (std::size_t i = from; i < log.entries.size(); ++i) apply_checked(s->experiment_, log.entries[i]);
  s->logFd_ = open_log(logPath);
  if (s->options_.prefetch) s->prefetch_after(s->experiment_);
  return s;
}

void Session::append_log(const std::string& line) {
  const std::string data = line + "\n";
  std::size_t done = 0;
  while (done < data.size()) {
    const ssize_t n = ::write(logFd_, data.data() + done, data.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("log write failed for session " + info_.sessionId);
    }
    done += static_cast<std::size_t>(n);
  }
  if (options_.fsync && ::fdatasync(logFd_) != 0) throw IoError("log sync failed for session " + info_.sessionId);
}

void Session::write_snapshot() const {
  const json j = {{"schema", kSnapshotSchema},
                  {"sessionId", info_.sessionId},
                  {"cursor", experiment_.cursor()},
                  {"staircases", experiment_.staircases()}};
  write_text_atomic(dir_ / "snapshot.json", j.dump() + "\n");
}

void Session::prefetch_after(const Experiment& state) {
  if (state.exhausted()) return;
  cache_->request(StimulusKey::of(state.current_trial()));
}

IssuedTrial Session::next_trial() {
  TrialSpec spec;
  std::vector<StimulusKey> likely;
  {
    std::lock_guard lock(mutex_);
    if (experiment_.exhausted()) throw ExhaustedError("all " + std::to_string(kTotalTrials) + " trials answered");
    spec = experiment_.current_trial();
    if (options_.prefetch) {
      // Whatever the answer, the next trial is one of these two.
      for (bool correct : {true, false}) {
        Experiment next = experiment_;
        const Choice c = correct ? spec.xIs : (spec.xIs == Choice::A ? Choice::B : Choice::A);
        next.apply(next.score(c, true));
        if (!next.exhausted()) likely.push_back(StimulusKey::of(next.current_trial()));
      }
    }
  }
  IssuedTrial issued{spec, cache_->reference(spec.referenceImageId)->id, cache_->id_for(StimulusKey::of(spec))};
  auto future = cache_->request(StimulusKey::of(spec));
  for (const auto& k : likely) cache_->request(k);
  const auto budget = std::chrono::duration<double>(options_.responseBudget);
  if (future.wait_for(budget) != std::future_status::ready) {
    throw BudgetError("stimulus for trial " + std::to_string(spec.trialIndex) + " not ready within " +
                      std::to_string(options_.responseBudget) + " s");
  }
  future.get();  // rethrows synthesis failures
  return issued;
}

SubmitResult Session::submit(const Submission& sub) {
  std::lock_guard lock(mutex_);
  const std::size_t cursor = experiment_.cursor();
  if (sub.trialIndex < cursor) throw ConflictError("trial " + std::to_string(sub.trialIndex) + " already answered");
  if (experiment_.exhausted()) throw ExhaustedError("all trials answered");
  if (sub.trialIndex > cursor) {
    throw ConflictError("trial " + std::to_string(sub.trialIndex) + " submitted but the current trial is " +
                        std::to_string(cursor));
  }
  const TrialSpec spec = experiment_.current_trial();
  const TrialOutcome outcome = experiment_.score(sub.response, sub.gazeValid, sub.clientTimings);
  append_log(log_line({spec, outcome}, cache_->reference_id(spec.referenceImageId),
                      cache_->id_for(StimulusKey::of(spec)))
                 .dump());
  experiment_.apply(outcome);
  if (experiment_.cursor() % static_cast<std::size_t>(options_.snapshotEvery) == 0 || experiment_.exhausted()) {
    write_snapshot();
  }
  if (options_.prefetch) prefetch_after(experiment_);
  return {outcome, experiment_.staircases()[static_cast<std::size_t>(condition_index(spec.condition))]};
}

std::size_t Session::cursor() const {
  std::lock_guard lock(mutex_);
  return experiment_.cursor();
}

SessionStatus Session::status() const {
  std::lock_guard lock(mutex_);
  return experiment_.exhausted() ? SessionStatus::complete : SessionStatus::active;
}

std::vector<StaircaseState> Session::staircases() const {
  std::lock_guard lock(mutex_);
  return experiment_.staircases();
}

std::vector<ThresholdRecord> Session::results() const {
  std::lock_guard lock(mutex_);
  return experiment_.thresholds(info_.subjectId);
}

json Session::status_json() const {
  std::lock_guard lock(mutex_);
  json conditions = json::array();
  for (const auto& s : experiment_.staircases()) {
    conditions.push_back({{"conditionKey", condition_key(s.condition)},
                          {"condition", s.condition},
                          {"currentTarget", s.currentTarget},
                          {"reversalCount", s.reversals.size()},
                          {"trialCount", s.trialCount},
                          {"status", s.status == StaircaseStatus::converged ? "converged" : "running"}});
  }
  return {{"sessionId", info_.sessionId},
          {"subjectId", info_.subjectId},
          {"status", to_string(experiment_.exhausted() ? SessionStatus::complete : SessionStatus::active)},
          {"cursor", experiment_.cursor()},
          {"totalTrials", experiment_.plan().total_trials()},
          {"conditions", conditions}};
}

TrialOutcome observe(const ObserverModel& observer, const TrialSpec& trial, const ImageTensor& reference,
                     const ImageTensor& perturbed) {
  Rng rng = observer_rng(observer, trial.trialIndex);
  return respond(observer, trial, reference, perturbed, rng);
}

SimulationResult simulate_session(StimulusCache& cache, std::uint64_t seed, const std::string& subjectId,
                                  const ObserverModel& observer) {
  observer.validate();
  const ExperimentAssets& a = cache.assets();
  Experiment exp(a.staircase, seed, a.reference_ids());
  SimulationResult out;
  while (!exp.exhausted()) {
    const TrialSpec spec = exp.current_trial();
    const StimulusPtr ref = cache.reference(spec.referenceImageId);
    const StimulusPtr pert = cache.get(StimulusKey::of(spec));
    const TrialOutcome o = observe(observer, spec, ref->image, pert->image);
    exp.apply(o);
    out.outcomes.push_back(o);
  }
  out.thresholds = exp.thresholds(subjectId);
  out.staircases = exp.staircases();
  return out;
}

}  // namespace mame
