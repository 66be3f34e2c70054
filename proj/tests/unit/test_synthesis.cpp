#include <doctest.h>

#include <cmath>
#include <limits>

#include "mame/error.hpp"
#include "mame/features.hpp"
#include "mame/synthesis.hpp"
#include "support/fixtures.hpp"

using namespace mame;

namespace {

const fixture::SmallWorld& world() {
  static const fixture::SmallWorld w = fixture::small_world();
  return w;
}

OptimConfig deterministic() {
  OptimConfig o;
  o.timeBudget = 0.0;
  return o;
}

IcaModel three_component_model() {
  IcaModel m;
  m.mean = Eigen::VectorXd::Zero(3);
  m.combined = Eigen::MatrixXd::Identity(3, 3);
  m.mixing = Eigen::MatrixXd::Identity(3, 3);
  m.selected = {0, 1, 2};
  return m;
}

}  // namespace

TEST_CASE("make_target arithmetic") {
  const IcaModel m = three_component_model();
  Eigen::VectorXd yo(3);
  yo << 0.2, -0.1, 0.4;
  SynthesisSpec spec;
  spec.component = 1;
  spec.direction = -1;
  spec.target = 0.3;
  const Target t = make_target(m, yo, spec);
  CHECK(t.original == yo);
  CHECK(t.target(0) == 0.2);
  CHECK(t.target(1) == doctest::Approx(-0.4).epsilon(1e-15));
  CHECK(t.target(2) == 0.4);

  spec.target = 0.0;
  CHECK(make_target(m, yo, spec).target == yo);

  spec.component = 3;
  CHECK_THROWS_AS(make_target(m, yo, spec), ConfigError);
  spec.component = 0;
  spec.direction = 0;
  CHECK_THROWS_AS(make_target(m, yo, spec), ConfigError);
  spec.direction = 1;
  spec.target = -0.1;
  CHECK_THROWS_AS(make_target(m, yo, spec), ConfigError);
}

TEST_CASE("make_target only moves the selected coordinate") {
  const auto& w = world();
  const IcaModel& model = w.models.at(Tap::mid);
  SynthesisSpec spec;
  spec.tap = Tap::mid;
  spec.component = 2;
  spec.direction = 1;
  spec.target = 0.7;
  const Target t = make_target(w.backbone, model, w.images[3].image, spec);
  const int p = model.selected[2];
  for (int c = 0; c < model.components(); ++c) {
    if (c == p) {
      CHECK(t.target(c) == t.original(c) + 0.7);
    } else {
      CHECK(t.target(c) == t.original(c));
    }
  }
}

TEST_CASE("zero target returns the reference unchanged") {
  const auto& w = world();
  SynthesisSpec spec;
  spec.tap = Tap::early;
  spec.target = 0.0;
  const auto r = synthesize(w.backbone, w.models.at(Tap::early), w.images[0].image, spec, deterministic());
  CHECK(r.image == w.images[0].image);
  CHECK(r.finalLoss == 0.0);
  CHECK(r.converged);
  CHECK(r.lossTrace.empty());
}

TEST_CASE("converged runs hit the target under an independent forward pass") {
  const auto& w = world();
  int converged = 0;
  int runs = 0;
  for (Tap tap : kAllTaps) {
    const IcaModel& model = w.models.at(tap);
    for (int c = 0; c < 3; ++c) {
      for (int dir : {1, -1}) {
        SynthesisSpec spec{tap, c, dir, 0.8, "r"};
        const auto& ref = w.images[static_cast<std::size_t>(5 * c + (dir > 0 ? 1 : 0))].image;
        const auto r = synthesize(w.backbone, model, ref, spec, deterministic());
        ++runs;
        CHECK(static_cast<int>(r.lossTrace.size()) <= 300);
        for (double v : r.image.data()) {
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
        }
        if (!r.converged) continue;
        ++converged;
        CHECK(r.finalLoss < r.lossTrace.front());
        // Independent check: fresh forward pass, Gram, explicit projection.
        const auto maps = w.backbone.forward(r.image, {tap});
        const Eigen::VectorXd g = gram(maps.at(tap)).values;
        const int p = model.selected[static_cast<std::size_t>(c)];
        double yc = 0.0;
        for (Eigen::Index d = 0; d < g.size(); ++d) yc += model.combined(p, d) * (g(d) - model.mean(d));
        CHECK(std::abs(yc - r.target(p)) <= 0.05 * std::max(0.8, 0.1));
        for (int q : model.selected) {
          if (q != p) CHECK(std::abs(r.achieved(q) - r.original(q)) <= 0.25 * 0.8);
        }
      }
    }
  }
  CHECK(converged >= runs * 9 / 10);
}

TEST_CASE("synthesis is deterministic") {
  const auto& w = world();
  SynthesisSpec spec{Tap::late, 0, -1, 0.5, "r"};
  const auto a = synthesize(w.backbone, w.models.at(Tap::late), w.images[2].image, spec, deterministic());
  const auto b = synthesize(w.backbone, w.models.at(Tap::late), w.images[2].image, spec, deterministic());
  CHECK(a.image == b.image);
  CHECK(a.lossTrace == b.lossTrace);
}

TEST_CASE("positive direction equals negative direction under a mirrored component") {
  const auto& w = world();
  const IcaModel& model = w.models.at(Tap::mid);
  IcaModel mirrored = model;
  const int p = model.selected[1];
  mirrored.combined.row(p) *= -1.0;
  mirrored.mixing.col(p) *= -1.0;
  const auto plus = synthesize(w.backbone, model, w.images[4].image, {Tap::mid, 1, 1, 0.6, "r"}, deterministic());
  const auto minus =
      synthesize(w.backbone, mirrored, w.images[4].image, {Tap::mid, 1, -1, 0.6, "r"}, deterministic());
  CHECK(plus.image == minus.image);
  CHECK(plus.lossTrace == minus.lossTrace);
  CHECK(minus.target(p) == -plus.target(p));
}

TEST_CASE("time budget returns best so far without convergence") {
  const auto& w = world();
  OptimConfig o;
  o.timeBudget = 1e-9;
  const auto r = synthesize(w.backbone, w.models.at(Tap::mid), w.images[1].image, {Tap::mid, 0, 1, 2.0, "r"}, o);
  CHECK_FALSE(r.converged);
  CHECK(r.lossTrace.size() == 1);
  CHECK(r.image == w.images[1].image);
}

TEST_CASE("iteration cap bounds the loss trace") {
  const auto& w = world();
  OptimConfig o = deterministic();
  o.iterations = 7;
  o.stopLoss = 1e-300;
  const auto r = synthesize(w.backbone, w.models.at(Tap::early), w.images[1].image, {Tap::early, 0, 1, 1.0, "r"}, o);
  CHECK(r.lossTrace.size() == 7);
  CHECK_FALSE(r.converged);
}

TEST_CASE("non-finite loss aborts with the iteration index") {
  const auto& w = world();
  IcaModel broken = w.models.at(Tap::early);
  broken.combined(broken.selected[0], 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    synthesize(w.backbone, broken, w.images[0].image, {Tap::early, 0, 1, 0.5, "r"}, deterministic());
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("iteration 0") != std::string::npos);
  }
}

TEST_CASE("invalid specs and configs") {
  const auto& w = world();
  CHECK_THROWS_AS(synthesize(w.backbone, w.models.at(Tap::early), w.images[0].image, {Tap::mid, 0, 1, 0.5, "r"},
                             deterministic()),
                  ConfigError);
  OptimConfig o = deterministic();
  o.learningRate = 0.0;
  CHECK_THROWS_AS(o.validate(), ConfigError);
  o = deterministic();
  o.iterations = 0;
  CHECK_THROWS_AS(o.validate(), ConfigError);
  const nlohmann::json j = OptimConfig{};
  CHECK(j.at("learningRate") == 0.01);
  CHECK(j.at("iterations") == 300);
  CHECK(j.get<OptimConfig>().patience == OptimConfig{}.patience);
}
