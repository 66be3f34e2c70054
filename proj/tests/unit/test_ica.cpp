#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mame/error.hpp"
#include "mame/ica.hpp"
#include "mame/rng.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace mame;

namespace {

/// n observations of `sources.cols()` independent sources mixed by `mixing` (dim x k), plus offset.
FeatureMatrix mixed(const Eigen::MatrixXd& sources, const Eigen::MatrixXd& mixing, double offset = 0.0) {
  FeatureMatrix fm;
  fm.tap = Tap::mid;
  fm.values = sources * mixing.transpose();
  fm.values.array() += offset;
  for (Eigen::Index i = 0; i < fm.values.rows(); ++i) fm.imageIds.push_back("img" + std::to_string(i));
  return fm;
}

Eigen::MatrixXd uniform_sources(Eigen::Index n, Eigen::Index k, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd s(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) s(i, j) = rng.uniform(-1.0, 1.0);
  }
  return s;
}

FeatureMatrix random_features(Eigen::Index n, Eigen::Index d, std::uint64_t seed, Tap tap = Tap::early) {
  Rng rng(seed);
  FeatureMatrix fm;
  fm.tap = tap;
  fm.values.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      // Skewed, non-Gaussian columns with a common offset.
      const double u = rng.uniform();
      fm.values(i, j) = 3.0 + (j % 3 == 0 ? u * u * u : rng.uniform(-1.0, 1.0) * (1.0 + 0.1 * j));
    }
    fm.imageIds.push_back("id" + std::to_string(1000 + i));
  }
  return fm;
}

double best_match(const Eigen::MatrixXd& recovered, const Eigen::VectorXd& truth) {
  double best = 0.0;
  for (Eigen::Index c = 0; c < recovered.cols(); ++c) {
    best = std::max(best, oracle::abs_correlation(recovered.col(c), truth));
  }
  return best;
}

}  // namespace

TEST_CASE("two independent uniform sources are recovered") {
  const Eigen::MatrixXd sources = uniform_sources(2000, 2, 3);
  Eigen::MatrixXd a(2, 2);
  a << 1.0, 0.6, 0.4, 1.0;
  const auto fm = mixed(sources, a, 5.0);
  IcaFitConfig cfg;
  cfg.nComponents = 2;
  const IcaModel model = fit_ica(fm, cfg);
  CHECK(model.converged);
  const Eigen::MatrixXd s = transform_rows(model, fm.values);
  CHECK(best_match(s, sources.col(0)) > 0.99);
  CHECK(best_match(s, sources.col(1)) > 0.99);
}

TEST_CASE("whitening invariant on training data") {
  const auto fm = random_features(300, 12, 7);
  IcaFitConfig cfg;
  cfg.nComponents = 8;
  const IcaModel model = fit_ica(fm, cfg);
  const Eigen::MatrixXd s = transform_rows(model, fm.values);
  const Eigen::VectorXd mean = s.colwise().mean();
  CHECK(mean.cwiseAbs().maxCoeff() < 1e-8);
  const Eigen::MatrixXd centered = s.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(s.rows());
  CHECK((cov - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((model.unmix * model.unmix.transpose() - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("sign convention: largest mixing loading is positive") {
  const auto fm = random_features(120, 6, 9);
  IcaFitConfig cfg;
  cfg.nComponents = 5;
  const IcaModel model = fit_ica(fm, cfg);
  for (int c = 0; c < model.components(); ++c) {
    Eigen::Index arg = 0;
    model.mixing.col(c).cwiseAbs().maxCoeff(&arg);
    CHECK(model.mixing(arg, c) > 0.0);
  }
}

TEST_CASE("insufficient rank is a fit error reporting the rank") {
  const auto fm = random_features(3, 10, 1);
  IcaFitConfig cfg;
  cfg.nComponents = 100;
  try {
    fit_ica(fm, cfg);
    FAIL("expected FitError");
  } catch (const FitError& e) {
    CHECK(std::string(e.what()).find("effective rank 2") != std::string::npos);
  }
  cfg.capToRank = true;
  CHECK(fit_ica(fm, cfg).components() == 2);
}

TEST_CASE("fit is deterministic given the seed") {
  const auto fm = random_features(80, 6, 2);
  IcaFitConfig cfg;
  cfg.nComponents = 4;
  cfg.seed = 17;
  const IcaModel a = fit_ica(fm, cfg);
  const IcaModel b = fit_ica(fm, cfg);
  CHECK(a.combined == b.combined);
  CHECK(a.mixing == b.mixing);
  CHECK(a.selected == b.selected);
}

TEST_CASE("iteration cap is reported as non-convergence, not an error") {
  const auto fm = random_features(80, 6, 2);
  IcaFitConfig cfg;
  cfg.nComponents = 4;
  cfg.maxIterations = 1;
  cfg.tolerance = 1e-15;
  const IcaModel model = fit_ica(fm, cfg);
  CHECK_FALSE(model.converged);
  CHECK(model.iterations == 1);
}

TEST_CASE("transform") {
  const auto fm = random_features(90, 7, 4);
  IcaFitConfig cfg;
  cfg.nComponents = 5;
  const IcaModel model = fit_ica(fm, cfg);

  CHECK(transform(model, model.mean).cwiseAbs().maxCoeff() == 0.0);

  const Eigen::MatrixXd s = transform_rows(model, fm.values);
  for (Eigen::Index r : {0, 17, 89}) {
    CHECK((transform(model, fm.values.row(r).transpose()) - s.row(r).transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }

  Rng rng(5);
  Eigen::VectorXd held(7);
  for (Eigen::Index i = 0; i < 7; ++i) held(i) = rng.uniform(0.0, 6.0);
  const Eigen::VectorXd got = transform(model, held);
  for (int c = 0; c < 5; ++c) {
    double want = 0.0;
    for (int d = 0; d < 7; ++d) want += model.combined(c, d) * (held(d) - model.mean(d));
    CHECK(std::abs(got(c) - want) < 1e-10);
  }
  CHECK_THROWS_AS(transform(model, Eigen::VectorXd::Zero(6)), DimensionError);
}

TEST_CASE("reconstruct") {
  const auto fm = random_features(60, 5, 8);
  IcaFitConfig cfg;
  cfg.nComponents = 5;  // square, full rank
  const IcaModel model = fit_ica(fm, cfg);
  CHECK(reconstruct(model, Eigen::VectorXd::Zero(5), std::vector<int>{}) == model.mean);
  CHECK(reconstruct(model, Eigen::VectorXd::Ones(5), std::vector<int>{}) == model.mean);
  double worst = 0.0;
  for (Eigen::Index r = 0; r < fm.values.rows(); ++r) {
    const Eigen::VectorXd x = fm.values.row(r).transpose();
    worst = std::max(worst, (reconstruct(model, transform(model, x)) - x).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-8);
  CHECK_THROWS_AS(reconstruct(model, Eigen::VectorXd::Zero(5), std::vector<int>{5}), DimensionError);
  CHECK_THROWS_AS(reconstruct(model, Eigen::VectorXd::Zero(4)), DimensionError);
}

TEST_CASE("explained variance equals the from-scratch formula") {
  const auto fm = random_features(70, 9, 12);
  IcaFitConfig cfg;
  cfg.nComponents = 6;
  const IcaModel model = fit_ica(fm, cfg);
  for (int i = 0; i < model.components(); ++i) {
    const double want = oracle::explained_variance(fm.values, model.mean, model.combined, model.mixing, i);
    CHECK(std::abs(explained_variance(model, fm.values, i) - want) < 1e-12);
    CHECK(std::abs(model.explainedVariance(i) - want) < 1e-12);
  }
  CHECK_THROWS_AS(explained_variance(model, fm.values, 6), DimensionError);
  CHECK_THROWS_AS(explained_variance(model, Eigen::MatrixXd::Zero(3, 9), 0), NumericError);
}

TEST_CASE("rank-1 zero-mean data has EV 1") {
  Rng rng(3);
  const Eigen::Index n = 40;
  Eigen::VectorXd s(n);
  for (Eigen::Index i = 0; i < n; ++i) s(i) = rng.uniform(-1.0, 1.0);
  s.array() -= s.mean();
  Eigen::VectorXd a(4);
  a << 1.0, -2.0, 0.5, 3.0;
  FeatureMatrix fm;
  fm.values = s * a.transpose();
  fm.imageIds.resize(static_cast<std::size_t>(n));
  IcaFitConfig cfg;
  cfg.nComponents = 1;
  const IcaModel model = fit_ica(fm, cfg);
  CHECK(model.mean.cwiseAbs().maxCoeff() < 1e-15);
  CHECK(std::abs(explained_variance(model, fm.values, 0) - 1.0) < 1e-12);
}

TEST_CASE("select_components") {
  Eigen::VectorXd ev(3);
  ev << 0.1, 0.5, 0.3;
  CHECK(select_components(ev, 2) == std::vector<int>{1, 2});
  CHECK(select_components(ev, 3) == std::vector<int>{1, 2, 0});
  Eigen::VectorXd tied(4);
  tied << 0.2, 0.4, 0.4, 0.2;
  CHECK(select_components(tied, 4) == std::vector<int>{1, 2, 0, 3});

  const auto fm = random_features(70, 9, 12);
  IcaFitConfig cfg;
  cfg.nComponents = 6;
  const IcaModel model = fit_ica(fm, cfg);
  REQUIRE(model.selected.size() == 3);
  CHECK(model.explainedVariance(model.selected[0]) >= model.explainedVariance(model.selected[1]));
  CHECK(model.explainedVariance(model.selected[1]) >= model.explainedVariance(model.selected[2]));
}

TEST_CASE("reference selection matches a brute-force re-filter") {
  std::map<Tap, FeatureMatrix> features;
  std::map<Tap, IcaModel> models;
  IcaFitConfig cfg;
  cfg.nComponents = 6;
  for (Tap tap : kAllTaps) {
    features[tap] = random_features(200, 10, 40 + static_cast<std::uint64_t>(tap_index(tap)), tap);
    models[tap] = fit_ica(features[tap], cfg);
  }
  const double pct = 45.0;
  const auto sel = select_reference_images(models, features, pct);

  std::map<std::string, int> passes;
  for (Tap tap : kAllTaps) {
    const auto& fm = features[tap];
    std::vector<double> norms;
    for (Eigen::Index r = 0; r < fm.values.rows(); ++r) {
      double sq = 0.0;
      for (int comp : models[tap].selected) {
        double s = 0.0;
        for (Eigen::Index d = 0; d < fm.values.cols(); ++d) {
          s += models[tap].combined(comp, d) * (fm.values(r, d) - models[tap].mean(d));
        }
        sq += s * s;
      }
      norms.push_back(std::sqrt(sq));
    }
    const double threshold = oracle::percentile(norms, pct);
    CHECK(std::abs(sel.threshold.at(tap) - threshold) < 1e-12);
    for (std::size_t r = 0; r < norms.size(); ++r) {
      if (norms[r] <= threshold) passes[fm.imageIds[r]]++;
    }
  }
  std::vector<std::string> expected;
  for (const auto& [id, count] : passes) {
    if (count == 3) expected.push_back(id);
  }
  CHECK(sel.imageIds == expected);
  CHECK_FALSE(expected.empty());

  // Row order does not matter.
  std::map<Tap, FeatureMatrix> shuffled = features;
  for (auto& [tap, fm] : shuffled) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(fm.values.rows()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(order.size() - 1 - i);
    FeatureMatrix copy = fm;
    for (std::size_t i = 0; i < order.size(); ++i) {
      copy.values.row(static_cast<Eigen::Index>(i)) = fm.values.row(order[i]);
      copy.imageIds[i] = fm.imageIds[static_cast<std::size_t>(order[i])];
    }
    fm = copy;
  }
  const auto sel2 = select_reference_images(models, shuffled, pct);
  CHECK(sel2.imageIds == sel.imageIds);
  for (Tap tap : kAllTaps) CHECK(sel2.threshold.at(tap) == sel.threshold.at(tap));
}

TEST_CASE("single-image corpus selects that image at its own norm") {
  std::map<Tap, FeatureMatrix> train;
  std::map<Tap, IcaModel> models;
  std::map<Tap, FeatureMatrix> one;
  IcaFitConfig cfg;
  cfg.nComponents = 4;
  for (Tap tap : kAllTaps) {
    train[tap] = random_features(50, 6, 60 + static_cast<std::uint64_t>(tap_index(tap)), tap);
    models[tap] = fit_ica(train[tap], cfg);
    FeatureMatrix single;
    single.tap = tap;
    single.values = train[tap].values.topRows(1);
    single.imageIds = {"only"};
    one[tap] = single;
  }
  const auto sel = select_reference_images(models, one, 20.0);
  CHECK(sel.imageIds == std::vector<std::string>{"only"});
  for (Tap tap : kAllTaps) {
    const Eigen::VectorXd s = transform(models[tap], one[tap].values.row(0).transpose());
    double sq = 0.0;
    for (int c : models[tap].selected) sq += s(c) * s(c);
    CHECK(sel.threshold.at(tap) == doctest::Approx(std::sqrt(sq)).epsilon(1e-14));
  }
}

TEST_CASE("empty intersection advises a larger percentile") {
  std::map<Tap, FeatureMatrix> features;
  std::map<Tap, IcaModel> models;
  IcaFitConfig cfg;
  cfg.nComponents = 4;
  for (Tap tap : kAllTaps) {
    features[tap] = random_features(40, 6, 80 + static_cast<std::uint64_t>(tap_index(tap)), tap);
    models[tap] = fit_ica(features[tap], cfg);
  }
  try {
    select_reference_images(models, features, 0.0);
    FAIL("expected FitError");
  } catch (const FitError& e) {
    CHECK(std::string(e.what()).find("larger percentile") != std::string::npos);
  }
}

TEST_CASE("published selection metadata") {
  CHECK(kPublishedReferenceSelection.conv1 == 1.22);
  CHECK(kPublishedReferenceSelection.layer3 == 1.73);
  CHECK(kPublishedReferenceSelection.avgpool == 0.79);
  CHECK(kPublishedReferenceSelection.selectedImages == 614);
}

TEST_CASE("model persistence round-trips") {
  const auto fm = random_features(50, 6, 5);
  IcaFitConfig cfg;
  cfg.nComponents = 4;
  cfg.seed = 3;
  const IcaModel model = fit_ica(fm, cfg);
  const auto dir = fixture::scratch_dir("ica-io");
  save_ica_model(dir / "m.ica", model);
  const IcaModel back = load_ica_model(dir / "m.ica");
  CHECK(back.combined == model.combined);
  CHECK(back.mixing == model.mixing);
  CHECK(back.mean == model.mean);
  CHECK(back.selected == model.selected);
  CHECK(back.config.seed == 3);
  CHECK(back.tap == model.tap);
  auto bytes = read_file_bytes(dir / "m.ica");
  bytes.resize(40);
  write_file_bytes(dir / "bad.ica", bytes);
  std::filesystem::copy_file(dir / "m.ica.json", dir / "bad.ica.json");
  CHECK_THROWS_AS(load_ica_model(dir / "bad.ica"), LoadError);
}
