#include <doctest.h>

#include <cmath>

#include "mame/analysis.hpp"
#include "mame/error.hpp"
#include "mame/observer.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace mame;

namespace {

TrialSpec trial(std::size_t index, Choice x) {
  TrialSpec t;
  t.trialIndex = index;
  t.xIs = x;
  return t;
}

double correct_rate(const ObserverModel& obs, double d, int n) {
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const TrialSpec t = trial(static_cast<std::size_t>(i), i % 2 ? Choice::A : Choice::B);
    Rng rng = observer_rng(obs, t.trialIndex);
    correct += respond(obs, t, d, rng).correct;
  }
  return static_cast<double>(correct) / n;
}

}  // namespace

TEST_CASE("psychometric function") {
  ObserverModel obs;
  obs.lapse = 0.04;
  CHECK(obs.p_correct(0.0) == 0.5);
  CHECK(obs.p_correct(1e6) == doctest::Approx(0.96).epsilon(1e-12));
  double prev = 0.5;
  for (int i = 1; i <= 100; ++i) {
    const double p = obs.p_correct(0.002 * i);
    CHECK(p >= prev);
    CHECK(p <= 1.0 - obs.lapse);
    prev = p;
  }
  const double dstar = obs.inverse(std::sqrt(0.5));
  CHECK(obs.p_correct(dstar) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
  // Closed form alpha * (-ln(1 - (sqrt(1/2) - 1/2) / (1/2 - lapse)))^(1/beta).
  const double closed = 0.07 * std::pow(-std::log(1.0 - (std::sqrt(0.5) - 0.5) / 0.46), 1.0 / 8.0);
  CHECK(dstar == doctest::Approx(closed).epsilon(1e-12));
  CHECK_THROWS_AS(obs.inverse(0.99), NumericError);
}

TEST_CASE("config validation and defaults") {
  ObserverModel obs;
  obs.lapse = 0.2;
  CHECK_THROWS_AS(obs.validate(), ConfigError);
  obs = ObserverModel{};
  obs.alpha = 0.0;
  CHECK_THROWS_AS(obs.validate(), ConfigError);
  const auto ssimObs = nlohmann::json{{"metric", "oneMinusSsim"}}.get<ObserverModel>();
  CHECK(ssimObs.alpha == ObserverModel::default_alpha(Metric::oneMinusSsim));
  CHECK_THROWS_AS((nlohmann::json{{"metric", "mse"}}.get<ObserverModel>()), ConfigError);
  const nlohmann::json j = ObserverModel{};
  CHECK(j.get<ObserverModel>().beta == ObserverModel{}.beta);
}

TEST_CASE("chance performance at zero distance") {
  ObserverModel obs;
  obs.seed = 3;
  CHECK(std::abs(correct_rate(obs, 0.0, 10000) - 0.5) <= 0.02);
}

TEST_CASE("asymptote at large distance") {
  ObserverModel obs;
  obs.seed = 4;
  obs.lapse = 0.02;
  CHECK(std::abs(correct_rate(obs, 10.0, 10000) - 0.98) <= 0.01);
}

TEST_CASE("empirical accuracy is monotone in distance") {
  ObserverModel obs;
  obs.seed = 5;
  double prev = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double rate = correct_rate(obs, 0.015 * i, 10000);
    CHECK(rate >= prev - 0.01);
    prev = rate;
  }
}

TEST_CASE("responses map through X and are reproducible") {
  ObserverModel obs;
  obs.seed = 6;
  obs.invalidRate = 0.3;
  int invalid = 0;
  for (std::size_t i = 0; i < 2000; ++i) {
    const TrialSpec t = trial(i, i % 3 ? Choice::A : Choice::B);
    Rng r1 = observer_rng(obs, i);
    Rng r2 = observer_rng(obs, i);
    const TrialOutcome a = respond(obs, t, 0.05, r1);
    const TrialOutcome b = respond(obs, t, 0.05, r2);
    CHECK(a.correct == b.correct);
    CHECK(a.response == b.response);
    CHECK(a.gazeValid == b.gazeValid);
    CHECK(a.correct == (a.response == t.xIs));
    CHECK(a.trialIndex == i);
    invalid += !a.gazeValid;
  }
  CHECK(std::abs(invalid / 2000.0 - 0.3) < 0.04);
}

TEST_CASE("perceptual distance") {
  const ImageTensor a = fixture::random_image({16, 16, 3}, 1);
  const ImageTensor b = fixture::random_image({16, 16, 3}, 2);
  CHECK(perceptual_distance(a, a, Metric::rmsDiff) == 0.0);
  CHECK(perceptual_distance(a, a, Metric::oneMinusSsim) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(perceptual_distance(a, b, Metric::rmsDiff) == rms_contrast(difference_image(b, a)));

  // Brute force: luma by hand, two-pass RMS.
  std::vector<double> diff;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const double la = 0.2126 * a.at(y, x, 0) + 0.7152 * a.at(y, x, 1) + 0.0722 * a.at(y, x, 2);
      const double lb = 0.2126 * b.at(y, x, 0) + 0.7152 * b.at(y, x, 1) + 0.0722 * b.at(y, x, 2);
      diff.push_back(lb - la);
    }
  }
  CHECK(perceptual_distance(a, b, Metric::rmsDiff) == doctest::Approx(oracle::rms_contrast(diff)).epsilon(1e-12));
  CHECK_THROWS_AS(perceptual_distance(a, fixture::random_image({16, 15, 3}, 2), Metric::rmsDiff), DimensionError);
}
