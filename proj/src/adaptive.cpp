#include "mame/adaptive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mame/error.hpp"
#include "mame/rng.hpp"

namespace mame {

namespace {

int eccentricity_index(int deg) {
  for (std::size_t i = 0; i < kEccentricities.size(); ++i) {
    if (kEccentricities[i] == deg) return static_cast<int>(i);
  }
  throw ConfigError("eccentricity must be 4, 8 or 12 degrees, got " + std::to_string(deg));
}

std::string_view to_string(Move m) {
  switch (m) {
    case Move::up: return "up";
    case Move::down: return "down";
    default: return "none";
  }
}

Move parse_move(const std::string& s) {
  if (s == "up") return Move::up;
  if (s == "down") return Move::down;
  if (s == "none") return Move::none;
  throw ConfigError("unknown staircase move '" + s + "'");
}

// Stream salts so trial randomization, reference draws and the block plan are independent.
constexpr std::uint64_t kPlanSalt = 0x706c616eULL;
constexpr std::uint64_t kTrialSalt = 0x747269616cULL;
constexpr std::uint64_t kReferenceSalt = 0x72656673ULL;

}  // namespace

const std::vector<Condition>& all_conditions() {
  static const std::vector<Condition> conditions = [] {
    std::vector<Condition> out;
    for (Tap tap : kAllTaps) {
      for (int c = 0; c < 3; ++c) {
        for (int dir : {1, -1}) {
          for (int ecc : kEccentricities) out.push_back({tap, c, dir, ecc});
        }
      }
    }
    return out;
  }();
  return conditions;
}

int condition_index(const Condition& c) {
  if (c.component < 0 || c.component > 2) throw ConfigError("component must be 0, 1 or 2");
  if (c.direction != 1 && c.direction != -1) throw ConfigError("direction must be +1 or -1");
  return ((tap_index(c.tap) * 3 + c.component) * 2 + (c.direction > 0 ? 0 : 1)) * 3 +
         eccentricity_index(c.eccentricityDeg);
}

std::string condition_key(const Condition& c) {
  return std::string(to_string(c.tap)) + "/c" + std::to_string(c.component) + "/" + (c.direction > 0 ? "+" : "-") +
         "/" + std::to_string(c.eccentricityDeg);
}

Condition parse_condition_key(const std::string& key) {
  for (const auto& c : all_conditions()) {
    if (condition_key(c) == key) return c;
  }
  throw ConfigError("unknown condition '" + key + "'");
}

void to_json(nlohmann::json& j, const Condition& c) {
  j = {{"tap", std::string(to_string(c.tap))},
       {"component", c.component},
       {"direction", c.direction},
       {"eccentricityDeg", c.eccentricityDeg}};
}

void from_json(const nlohmann::json& j, Condition& c) {
  c.tap = parse_tap(j.at("tap").get<std::string>());
  c.component = j.at("component").get<int>();
  c.direction = j.at("direction").get<int>();
  c.eccentricityDeg = j.at("eccentricityDeg").get<int>();
  condition_index(c);
}

StaircaseConfig StaircaseConfig::resnet_default() {
  StaircaseConfig c;
  c.taps[Tap::early] = {10.0, 0.0, 100.0, std::nullopt};
  c.taps[Tap::mid] = {0.3, 0.0, 3.0, std::nullopt};
  c.taps[Tap::late] = {0.02, 0.0, 0.2, std::nullopt};
  return c;
}

StaircaseConfig StaircaseConfig::desk_default() {
  StaircaseConfig c;
  c.taps[Tap::early] = {25.0, 0.0, 250.0, std::nullopt};
  c.taps[Tap::mid] = {10.0, 0.0, 100.0, std::nullopt};
  c.taps[Tap::late] = {10.0, 0.0, 100.0, std::nullopt};
  return c;
}

void StaircaseConfig::validate() const {
  if (reversalQuota <= 0) throw ConfigError("staircase reversalQuota must be positive");
  for (Tap tap : kAllTaps) {
    const auto it = taps.find(tap);
    if (it == taps.end()) throw ConfigError("staircase config missing tap " + std::string(to_string(tap)));
    const auto& t = it->second;
    if (!(t.step > 0.0) || !std::isfinite(t.step)) {
      throw ConfigError("staircase step for " + std::string(to_string(tap)) + " must be positive");
    }
    const Bounds b = compute_bounds(t.step, t.min, t.max);
    const double initial = t.initial.value_or(0.5 * (t.min + t.max));
    if (initial < b.lower || initial > b.upper) {
      throw ConfigError("initial target " + std::to_string(initial) + " for " + std::string(to_string(tap)) +
                        " outside bounds [" + std::to_string(b.lower) + ", " + std::to_string(b.upper) + "]");
    }
  }
}

void to_json(nlohmann::json& j, const StaircaseConfig& c) {
  j = nlohmann::json::object();
  j["reversalQuota"] = c.reversalQuota;
  for (const auto& [tap, t] : c.taps) {
    nlohmann::json e = {{"step", t.step}, {"min", t.min}, {"max", t.max}};
    if (t.initial) e["initial"] = *t.initial;
    j["taps"][std::string(to_string(tap))] = e;
  }
}

void from_json(const nlohmann::json& j, StaircaseConfig& c) {
  c = StaircaseConfig::desk_default();
  c.reversalQuota = j.value("reversalQuota", c.reversalQuota);
  if (j.contains("taps")) {
    for (const auto& [name, e] : j.at("taps").items()) {
      TapStaircaseConfig t;
      t.step = e.at("step").get<double>();
      t.min = e.at("min").get<double>();
      t.max = e.at("max").get<double>();
      if (e.contains("initial") && !e.at("initial").is_null()) t.initial = e.at("initial").get<double>();
      c.taps[parse_tap(name)] = t;
    }
  }
}

Bounds compute_bounds(double step, double min, double max) {
  const Bounds b{min + 0.4 * step, max - 0.4 * step};
  if (!(b.upper > b.lower)) {
    throw ConfigError("empty staircase bounds: range [" + std::to_string(min) + ", " + std::to_string(max) +
                      "] with step " + std::to_string(step));
  }
  return b;
}

bool StaircaseState::operator==(const StaircaseState& o) const {
  return condition == o.condition && currentTarget == o.currentTarget && stepSize == o.stepSize &&
         correctStreak == o.correctStreak && reversals == o.reversals && lastMove == o.lastMove &&
         bounds.lower == o.bounds.lower && bounds.upper == o.bounds.upper && trialCount == o.trialCount &&
         reversalQuota == o.reversalQuota && status == o.status;
}

void to_json(nlohmann::json& j, const StaircaseState& s) {
  j = {{"condition", s.condition},
       {"currentTarget", s.currentTarget},
       {"stepSize", s.stepSize},
       {"correctStreak", s.correctStreak},
       {"reversals", s.reversals},
       {"lastMove", std::string(to_string(s.lastMove))},
       {"bounds", {s.bounds.lower, s.bounds.upper}},
       {"trialCount", s.trialCount},
       {"reversalQuota", s.reversalQuota},
       {"status", s.status == StaircaseStatus::converged ? "converged" : "running"}};
}

void from_json(const nlohmann::json& j, StaircaseState& s) {
  s.condition = j.at("condition").get<Condition>();
  s.currentTarget = j.at("currentTarget").get<double>();
  s.stepSize = j.at("stepSize").get<double>();
  s.correctStreak = j.at("correctStreak").get<int>();
  s.reversals = j.at("reversals").get<std::vector<double>>();
  s.lastMove = parse_move(j.at("lastMove").get<std::string>());
  s.bounds = {j.at("bounds").at(0).get<double>(), j.at("bounds").at(1).get<double>()};
  s.trialCount = j.at("trialCount").get<int>();
  s.reversalQuota = j.at("reversalQuota").get<int>();
  s.status = j.at("status").get<std::string>() == "converged" ? StaircaseStatus::converged : StaircaseStatus::running;
}

StaircaseState init_staircase(const Condition& condition, const StaircaseConfig& config) {
  config.validate();
  const auto& t = config.taps.at(condition.tap);
  StaircaseState s;
  s.condition = condition;
  s.stepSize = t.step;
  s.bounds = compute_bounds(t.step, t.min, t.max);
  s.currentTarget = t.initial.value_or(0.5 * (t.min + t.max));
  s.reversalQuota = config.reversalQuota;
  return s;
}

std::string_view to_string(Choice c) { return c == Choice::A ? "A" : "B"; }

Choice parse_choice(std::string_view s) {
  if (s == "A") return Choice::A;
  if (s == "B") return Choice::B;
  throw ConfigError("response must be \"A\" or \"B\"");
}

void to_json(nlohmann::json& j, const TrialOutcome& o) {
  j = {{"trialIndex", o.trialIndex},
       {"response", std::string(to_string(o.response))},
       {"correct", o.correct},
       {"gazeValid", o.gazeValid},
       {"clientTimings", o.clientTimings}};
}

void from_json(const nlohmann::json& j, TrialOutcome& o) {
  o.trialIndex = j.at("trialIndex").get<std::size_t>();
  o.response = parse_choice(j.at("response").get<std::string>());
  o.correct = j.at("correct").get<bool>();
  o.gazeValid = j.value("gazeValid", true);
  o.clientTimings = j.value("clientTimings", nlohmann::json::object());
}

StaircaseState staircase_update(const StaircaseState& state, const TrialOutcome& outcome) {
  if (state.status == StaircaseStatus::converged) {
    throw StateError("staircase " + condition_key(state.condition) + " already converged");
  }
  StaircaseState s = state;
  ++s.trialCount;
  if (!outcome.gazeValid) return s;

  Move move = Move::none;
  if (outcome.correct) {
    if (++s.correctStreak == 2) {
      move = Move::down;
      s.correctStreak = 0;
    }
  } else {
    s.correctStreak = 0;
    move = Move::up;
  }
  if (move == Move::none) return s;

  if (s.lastMove != Move::none && move != s.lastMove) s.reversals.push_back(s.currentTarget);
  s.lastMove = move;
  const double next = s.currentTarget + (move == Move::up ? s.stepSize : -s.stepSize);
  s.currentTarget = std::clamp(next, s.bounds.lower, s.bounds.upper);
  if (static_cast<int>(s.reversals.size()) >= s.reversalQuota) s.status = StaircaseStatus::converged;
  return s;
}

double threshold_estimate(const StaircaseState& state, std::optional<int> quota) {
  const int n = quota.value_or(state.reversalQuota);
  if (n <= 0) throw ConfigError("reversal quota must be positive");
  if (static_cast<int>(state.reversals.size()) < n) {
    throw StateError("staircase " + condition_key(state.condition) + " has " +
                     std::to_string(state.reversals.size()) + " reversals, needs " + std::to_string(n));
  }
  const auto first = state.reversals.end() - n;
  return std::accumulate(first, state.reversals.end(), 0.0) / n;
}

std::size_t SessionPlan::total_trials() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.trialOrder.size();
  return n;
}

int SessionPlan::condition_at(std::size_t trialIndex) const {
  std::size_t i = trialIndex;
  for (const auto& b : blocks) {
    if (i < b.trialOrder.size()) return b.trialOrder[i];
    i -= b.trialOrder.size();
  }
  throw StateError("trial index " + std::to_string(trialIndex) + " beyond the plan");
}

SessionPlan plan_session(std::uint64_t seed) {
  SessionPlan plan;
  plan.seed = seed;
  Rng rng(mix_seed(seed, kPlanSalt));
  std::vector<int> eccOrder;
  for (int ecc : kEccentricities) {
    for (int k = 0; k < kBlockCount / 3; ++k) eccOrder.push_back(ecc);
  }
  rng.shuffle(std::span<int>(eccOrder));
  for (int ecc : eccOrder) {
    Block b;
    b.eccentricityDeg = ecc;
    for (int idx = 0; idx < kConditionCount; ++idx) {
      if (all_conditions()[static_cast<std::size_t>(idx)].eccentricityDeg != ecc) continue;
      for (int r = 0; r < kRepeatsPerBlock; ++r) b.trialOrder.push_back(idx);
    }
    rng.shuffle(std::span<int>(b.trialOrder));
    plan.blocks.push_back(std::move(b));
  }
  return plan;
}

bool TrialSpec::operator==(const TrialSpec& o) const {
  return trialIndex == o.trialIndex && block == o.block && slot == o.slot && condition == o.condition &&
         referenceImageId == o.referenceImageId && target == o.target && referenceAt == o.referenceAt &&
         xIs == o.xIs && timing.stimulusMs == o.timing.stimulusMs && timing.blankMs == o.timing.blankMs &&
         sizeDeg == o.sizeDeg;
}

void to_json(nlohmann::json& j, const TrialSpec& t) {
  j = {{"trialIndex", t.trialIndex},
       {"block", t.block},
       {"slot", t.slot},
       {"condition", t.condition},
       {"conditionKey", condition_key(t.condition)},
       {"referenceImageId", t.referenceImageId},
       {"target", t.target},
       {"referenceAt", std::string(to_string(t.referenceAt))},
       {"xIs", std::string(to_string(t.xIs))},
       {"timing", {{"stimulusMs", t.timing.stimulusMs}, {"blankMs", t.timing.blankMs}}},
       {"geometry", {{"eccentricityDeg", t.condition.eccentricityDeg}, {"sizeDeg", t.sizeDeg}}}};
}

void from_json(const nlohmann::json& j, TrialSpec& t) {
  t.trialIndex = j.at("trialIndex").get<std::size_t>();
  t.block = j.at("block").get<int>();
  t.slot = j.at("slot").get<int>();
  t.condition = j.at("condition").get<Condition>();
  t.referenceImageId = j.at("referenceImageId").get<std::string>();
  t.target = j.at("target").get<double>();
  t.referenceAt = parse_choice(j.at("referenceAt").get<std::string>());
  t.xIs = parse_choice(j.at("xIs").get<std::string>());
  t.timing.stimulusMs = j.at("timing").at("stimulusMs").get<int>();
  t.timing.blankMs = j.at("timing").at("blankMs").get<int>();
  t.sizeDeg = j.at("geometry").at("sizeDeg").get<double>();
}

void to_json(nlohmann::json& j, const ThresholdRecord& r) {
  j = {{"subjectId", r.subjectId}, {"condition", r.condition}, {"thresholdValue", r.thresholdValue}};
}

void from_json(const nlohmann::json& j, ThresholdRecord& r) {
  r.subjectId = j.at("subjectId").get<std::string>();
  r.condition = j.at("condition").get<Condition>();
  r.thresholdValue = j.at("thresholdValue").get<double>();
  if (!std::isfinite(r.thresholdValue)) throw ConfigError("threshold values must be finite");
}

const std::string& reference_for(const std::vector<std::string>& pool, std::uint64_t seed, int block, int slot) {
  if (pool.empty()) throw ConfigError("reference pool is empty");
  const std::size_t n = pool.size();
  const std::size_t cycle = static_cast<std::size_t>(slot) / n;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(mix_seed(seed ^ kReferenceSalt, static_cast<std::uint64_t>(block)), cycle));
  rng.shuffle(std::span<std::size_t>(order));
  return pool[order[static_cast<std::size_t>(slot) % n]];
}

TrialSpec next_trial(const SessionPlan& plan, const std::vector<StaircaseState>& staircases,
                     const std::vector<std::string>& referencePool, std::size_t trialIndex) {
  if (trialIndex >= plan.total_trials()) throw StateError("session plan exhausted");
  if (staircases.size() != static_cast<std::size_t>(kConditionCount)) {
    throw StateError("expected 54 staircases, got " + std::to_string(staircases.size()));
  }
  TrialSpec t;
  t.trialIndex = trialIndex;
  std::size_t i = trialIndex;
  while (i >= plan.blocks[static_cast<std::size_t>(t.block)].trialOrder.size()) {
    i -= plan.blocks[static_cast<std::size_t>(t.block)].trialOrder.size();
    ++t.block;
  }
  t.slot = static_cast<int>(i);
  const int idx = plan.blocks[static_cast<std::size_t>(t.block)].trialOrder[i];
  t.condition = all_conditions()[static_cast<std::size_t>(idx)];
  t.target = staircases[static_cast<std::size_t>(idx)].currentTarget;
  t.referenceImageId = reference_for(referencePool, plan.seed, t.block, t.slot);
  Rng rng(mix_seed(plan.seed ^ kTrialSalt, trialIndex));
  t.referenceAt = rng.coin() ? Choice::A : Choice::B;
  t.xIs = rng.coin() ? Choice::A : Choice::B;
  return t;
}

Experiment::Experiment(StaircaseConfig config, std::uint64_t seed, std::vector<std::string> referencePool)
    : config_(std::move(config)), plan_(plan_session(seed)), pool_(std::move(referencePool)) {
  config_.validate();
  if (pool_.empty()) throw ConfigError("reference pool is empty");
  for (const auto& c : all_conditions()) staircases_.push_back(init_staircase(c, config_));
}

TrialSpec Experiment::current_trial() const {
  if (exhausted()) throw StateError("session exhausted after " + std::to_string(cursor_) + " trials");
  return next_trial(plan_, staircases_, pool_, cursor_);
}

TrialOutcome Experiment::score(Choice response, bool gazeValid, nlohmann::json clientTimings) const {
  const TrialSpec spec = current_trial();
  TrialOutcome o;
  o.trialIndex = cursor_;
  o.response = response;
  o.correct = response == spec.xIs;
  o.gazeValid = gazeValid;
  o.clientTimings = std::move(clientTimings);
  return o;
}

TrialOutcome Experiment::record(Choice response, bool gazeValid, nlohmann::json clientTimings) {
  TrialOutcome o = score(response, gazeValid, std::move(clientTimings));
  apply(o);
  return o;
}

void Experiment::restore(std::size_t cursor, std::vector<StaircaseState> staircases) {
  if (cursor > plan_.total_trials()) throw StateError("snapshot cursor beyond the plan");
  const auto& conds = all_conditions();
  if (staircases.size() != conds.size()) throw StateError("snapshot does not hold 54 staircases");
  for (std::size_t i = 0; i < conds.size(); ++i) {
    if (!(staircases[i].condition == conds[i])) throw StateError("snapshot staircase " + std::to_string(i) + " has the wrong condition");
  }
  staircases_ = std::move(staircases);
  cursor_ = cursor;
}

void Experiment::apply(const TrialOutcome& outcome) {
  if (exhausted()) throw StateError("session exhausted");
  if (outcome.trialIndex != cursor_) {
    throw StateError("outcome for trial " + std::to_string(outcome.trialIndex) + " but cursor is " +
                     std::to_string(cursor_));
  }
  auto& s = staircases_[static_cast<std::size_t>(plan_.condition_at(cursor_))];
  if (s.status == StaircaseStatus::running) s = staircase_update(s, outcome);
  ++cursor_;
}

std::vector<ThresholdRecord> Experiment::thresholds(const std::string& subjectId) const {
  std::vector<ThresholdRecord> out;
  for (const auto& s : staircases_) {
    if (s.status == StaircaseStatus::converged) out.push_back({subjectId, s.condition, threshold_estimate(s)});
  }
  return out;
}

}  // namespace mame
