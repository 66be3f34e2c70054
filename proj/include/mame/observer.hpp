#pragma once

#include <cstdint>
#include <string_view>

#include <json.hpp>

#include "mame/adaptive.hpp"
#include "mame/image.hpp"
#include "mame/rng.hpp"

namespace mame {

enum class Metric { rmsDiff, oneMinusSsim };
std::string_view to_string(Metric m);
Metric parse_metric(std::string_view s);

/// Weibull psychometric respondent for ABX trials (guess rate 0.5).
struct ObserverModel {
  Metric metric = Metric::rmsDiff;
  double alpha = 0.07;
  double beta = 8.0;
  double lapse = 0.02;
  double invalidRate = 0.05;
  std::uint64_t seed = 0;

  /// Alpha placing the 70.7% point inside the desk staircase ranges.
  static double default_alpha(Metric metric);

  void validate() const;
  /// 0.5 + (0.5 - lapse) (1 - exp(-(d / alpha)^beta)).
  double p_correct(double distance) const;
  /// Distance at which p_correct equals `p`; p must lie in [0.5, 1 - lapse).
  double inverse(double p) const;
};

void to_json(nlohmann::json& j, const ObserverModel& o);
void from_json(const nlohmann::json& j, ObserverModel& o);

/// rmsDiff: RMS contrast of the grayscale difference; oneMinusSsim: 1 - SSIM.
double perceptual_distance(const ImageTensor& reference, const ImageTensor& perturbed, Metric metric);

/// Generator for one trial; depends only on the observer seed and the trial index.
Rng observer_rng(const ObserverModel& observer, std::size_t trialIndex);

/// One uniform draw decides correctness, a second decides gaze validity.
TrialOutcome respond(const ObserverModel& observer, const TrialSpec& trial, double distance, Rng& rng);
TrialOutcome respond(const ObserverModel& observer, const TrialSpec& trial, const ImageTensor& reference,
                     const ImageTensor& perturbed, Rng& rng);

}  // namespace mame
