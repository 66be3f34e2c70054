#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mame/tap.hpp"

namespace mame {

inline constexpr std::array<int, 3> kEccentricities{4, 8, 12};
inline constexpr int kConditionCount = 54;
inline constexpr int kBlockCount = 15;
inline constexpr int kConditionsPerBlock = 18;
inline constexpr int kRepeatsPerBlock = 5;
inline constexpr int kTrialsPerBlock = kConditionsPerBlock * kRepeatsPerBlock;
inline constexpr int kTotalTrials = kBlockCount * kTrialsPerBlock;

struct Condition {
  Tap tap = Tap::early;
  int component = 0;
  int direction = 1;
  int eccentricityDeg = 4;

  bool operator==(const Condition&) const = default;
};

/// All 54 conditions ordered by tap, component, direction (+1 first), eccentricity.
const std::vector<Condition>& all_conditions();
int condition_index(const Condition& c);
/// "early/c0/+/4"
std::string condition_key(const Condition& c);
Condition parse_condition_key(const std::string& key);

void to_json(nlohmann::json& j, const Condition& c);
void from_json(const nlohmann::json& j, Condition& c);

/// Raw search range and step of one tap. Bounds are derived with `compute_bounds`.
struct TapStaircaseConfig {
  double step = 1.0;
  double min = 0.0;
  double max = 10.0;
  /// Defaults to the midpoint of [min, max].
  std::optional<double> initial;
};

struct StaircaseConfig {
  std::map<Tap, TapStaircaseConfig> taps;
  int reversalQuota = 5;

  /// Steps 10 / 0.3 / 0.02 with search ranges [0, 100], [0, 3], [0, 0.2].
  static StaircaseConfig resnet_default();
  /// Steps and ranges tuned for the desk backbone's unit-variance ICA coordinates.
  static StaircaseConfig desk_default();

  void validate() const;
};

void to_json(nlohmann::json& j, const StaircaseConfig& c);
void from_json(const nlohmann::json& j, StaircaseConfig& c);

struct Bounds {
  double lower = 0.0;
  double upper = 0.0;
};

/// [min + 0.4 step, max - 0.4 step]; throws ConfigError when empty.
Bounds compute_bounds(double step, double min, double max);

enum class Move { none, up, down };
enum class StaircaseStatus { running, converged };

struct StaircaseState {
  Condition condition;
  double currentTarget = 0.0;
  double stepSize = 0.0;
  int correctStreak = 0;
  std::vector<double> reversals;
  Move lastMove = Move::none;
  Bounds bounds;
  int trialCount = 0;
  int reversalQuota = 5;
  StaircaseStatus status = StaircaseStatus::running;

  bool operator==(const StaircaseState&) const;
};

void to_json(nlohmann::json& j, const StaircaseState& s);
void from_json(const nlohmann::json& j, StaircaseState& s);

StaircaseState init_staircase(const Condition& condition, const StaircaseConfig& config);

enum class Choice { A, B };
std::string_view to_string(Choice c);
Choice parse_choice(std::string_view s);

struct TrialOutcome {
  std::size_t trialIndex = 0;
  Choice response = Choice::A;
  bool correct = false;
  bool gazeValid = true;
  nlohmann::json clientTimings = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const TrialOutcome& o);
void from_json(const nlohmann::json& j, TrialOutcome& o);

/// 2-up-1-down: two consecutive valid correct answers lower t by one step, any
/// valid error raises it by one step, clamped to the bounds. A reversal (the
/// pre-move t) is recorded whenever the attempted move flips direction, also
/// when the move is clamped. Invalid gaze only counts the trial.
StaircaseState staircase_update(const StaircaseState& state, const TrialOutcome& outcome);

/// Mean of the last `quota` reversals (the state's quota when omitted).
double threshold_estimate(const StaircaseState& state, std::optional<int> quota = std::nullopt);

struct Block {
  int eccentricityDeg = 4;
  /// 90 condition indices (into `all_conditions`), each of the block's 18 conditions 5 times.
  std::vector<int> trialOrder;
};

struct SessionPlan {
  std::uint64_t seed = 0;
  std::vector<Block> blocks;

  std::size_t total_trials() const;
  int condition_at(std::size_t trialIndex) const;
};

SessionPlan plan_session(std::uint64_t seed);

struct Timing {
  int stimulusMs = 200;
  int blankMs = 500;
};

struct TrialSpec {
  std::size_t trialIndex = 0;
  int block = 0;
  int slot = 0;
  Condition condition;
  std::string referenceImageId;
  double target = 0.0;
  /// Which of A/B shows the reference; the other shows the perturbed image.
  Choice referenceAt = Choice::A;
  Choice xIs = Choice::A;
  Timing timing;
  double sizeDeg = 4.0;

  /// Whether X shows the reference image.
  bool x_is_reference() const { return xIs == referenceAt; }
  bool operator==(const TrialSpec& o) const;
};

void to_json(nlohmann::json& j, const TrialSpec& t);
void from_json(const nlohmann::json& j, TrialSpec& t);

struct ThresholdRecord {
  std::string subjectId;
  Condition condition;
  double thresholdValue = 0.0;
};

void to_json(nlohmann::json& j, const ThresholdRecord& r);
void from_json(const nlohmann::json& j, ThresholdRecord& r);

/// Reference image for a trial: seeded permutation of the pool per block, drawn
/// without replacement and reshuffled when the pool runs out.
const std::string& reference_for(const std::vector<std::string>& pool, std::uint64_t seed, int block, int slot);

/// Builds the spec of trial `trialIndex` using the live staircase of its condition.
TrialSpec next_trial(const SessionPlan& plan, const std::vector<StaircaseState>& staircases,
                     const std::vector<std::string>& referencePool, std::size_t trialIndex);

/// Plan, 54 staircases and a cursor. Trials of conditions that already reached
/// their reversal quota are still presented but leave the staircase untouched.
class Experiment {
 public:
  Experiment(StaircaseConfig config, std::uint64_t seed, std::vector<std::string> referencePool);

  const SessionPlan& plan() const { return plan_; }
  const StaircaseConfig& config() const { return config_; }
  const std::vector<std::string>& reference_pool() const { return pool_; }
  const std::vector<StaircaseState>& staircases() const { return staircases_; }
  std::size_t cursor() const { return cursor_; }
  bool exhausted() const { return cursor_ >= plan_.total_trials(); }

  /// Throws StateError when exhausted.
  TrialSpec current_trial() const;

  /// Scores `response` against the current trial, updates its staircase and
  /// advances the cursor.
  TrialOutcome record(Choice response, bool gazeValid, nlohmann::json clientTimings = nlohmann::json::object());
  /// The outcome `record` would apply, without changing any state.
  TrialOutcome score(Choice response, bool gazeValid, nlohmann::json clientTimings = nlohmann::json::object()) const;
  /// Applies a previously recorded outcome (log replay); trialIndex must equal the cursor.
  void apply(const TrialOutcome& outcome);

  /// Reinstates a snapshot. Staircases must match the condition set in order.
  void restore(std::size_t cursor, std::vector<StaircaseState> staircases);

  /// Converged conditions only, in condition order.
  std::vector<ThresholdRecord> thresholds(const std::string& subjectId) const;

 private:
  StaircaseConfig config_;
  SessionPlan plan_;
  std::vector<std::string> pool_;
  std::vector<StaircaseState> staircases_;
  std::size_t cursor_ = 0;
};

}  // namespace mame
