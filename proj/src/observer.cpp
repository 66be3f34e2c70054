#include "mame/observer.hpp"

#include <cmath>

#include "mame/analysis.hpp"
#include "mame/error.hpp"

namespace mame {

std::string_view to_string(Metric m) { return m == Metric::rmsDiff ? "rmsDiff" : "oneMinusSsim"; }

Metric parse_metric(std::string_view s) {
  if (s == "rmsDiff") return Metric::rmsDiff;
  if (s == "oneMinusSsim") return Metric::oneMinusSsim;
  throw ConfigError("unknown observer metric '" + std::string(s) + "'");
}

double ObserverModel::default_alpha(Metric metric) { return metric == Metric::rmsDiff ? 0.07 : 0.18; }

void ObserverModel::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("observer alpha must be positive");
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("observer beta must be positive");
  if (!(lapse >= 0.0 && lapse <= 0.1)) throw ConfigError("observer lapse must lie in [0, 0.1]");
  if (!(invalidRate >= 0.0 && invalidRate < 1.0)) throw ConfigError("observer invalidRate must lie in [0, 1)");
}

double ObserverModel::p_correct(double distance) const {
  if (!(distance >= 0.0)) throw NumericError("perceptual distance must be nonnegative");
  return 0.5 + (0.5 - lapse) * (1.0 - std::exp(-std::pow(distance / alpha, beta)));
}

double ObserverModel::inverse(double p) const {
  if (!(p >= 0.5 && p < 1.0 - lapse)) throw NumericError("p outside the observer's range");
  return alpha * std::pow(-std::log(1.0 - (p - 0.5) / (0.5 - lapse)), 1.0 / beta);
}

void to_json(nlohmann::json& j, const ObserverModel& o) {
  j = {{"metric", std::string(to_string(o.metric))},
       {"alpha", o.alpha},
       {"beta", o.beta},
       {"lapse", o.lapse},
       {"invalidRate", o.invalidRate},
       {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, ObserverModel& o) {
  ObserverModel d;
  o.metric = parse_metric(j.value("metric", std::string(to_string(d.metric))));
  o.alpha = j.value("alpha", ObserverModel::default_alpha(o.metric));
  o.beta = j.value("beta", d.beta);
  o.lapse = j.value("lapse", d.lapse);
  o.invalidRate = j.value("invalidRate", d.invalidRate);
  o.seed = j.value("seed", d.seed);
  o.validate();
}

double perceptual_distance(const ImageTensor& reference, const ImageTensor& perturbed, Metric metric) {
  if (reference.shape() != perturbed.shape()) {
    throw DimensionError("stimulus size mismatch: " + to_string(reference.shape()) + " vs " +
                         to_string(perturbed.shape()));
  }
  if (metric == Metric::rmsDiff) return rms_contrast(difference_image(perturbed, reference));
  return std::max(0.0, 1.0 - ssim(reference, perturbed));
}

Rng observer_rng(const ObserverModel& observer, std::size_t trialIndex) {
  return Rng(mix_seed(observer.seed ^ 0x6f6273ULL, trialIndex));
}

TrialOutcome respond(const ObserverModel& observer, const TrialSpec& trial, double distance, Rng& rng) {
  const double p = observer.p_correct(distance);
  TrialOutcome o;
  o.trialIndex = trial.trialIndex;
  o.correct = rng.uniform() < p;
  o.response = o.correct ? trial.xIs : (trial.xIs == Choice::A ? Choice::B : Choice::A);
  o.gazeValid = !(rng.uniform() < observer.invalidRate);
  return o;
}

TrialOutcome respond(const ObserverModel& observer, const TrialSpec& trial, const ImageTensor& reference,
                     const ImageTensor& perturbed, Rng& rng) {
  return respond(observer, trial, perceptual_distance(reference, perturbed, observer.metric), rng);
}

}  // namespace mame
