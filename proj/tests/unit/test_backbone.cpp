#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "mame/backbone.hpp"
#include "mame/error.hpp"
#include "mame/features.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace mame;

namespace {

LossEvaluation early_gram_norm(const FeatureMaps& maps) {
  const auto& fm = maps.at(Tap::early);
  const GramVector g = gram(fm);
  LossEvaluation eval;
  eval.value = g.values.squaredNorm();
  eval.gradients[Tap::early] = gram_backward(fm, 2.0 * g.values);
  return eval;
}

}  // namespace

TEST_CASE("build_backbone is deterministic per seed") {
  auto config = BackboneConfig::desk_default();
  config.seed = 7;
  const Backbone a(config);
  const Backbone b(config);
  CHECK(a.same_weights(b));
  config.seed = 8;
  CHECK_FALSE(a.same_weights(Backbone(config)));
}

TEST_CASE("desk default tap shapes follow valid-convolution arithmetic") {
  const Backbone backbone(BackboneConfig::desk_default());
  const auto early = backbone.tap_shape(Tap::early);
  CHECK(early.height == 29);
  CHECK(early.width == 29);
  CHECK(early.filters == 16);
  const auto mid = backbone.tap_shape(Tap::mid);
  CHECK(mid.height == 12);  // 29 -> 27 -> 25 -> pool 12
  CHECK(mid.filters == 32);
  const auto late = backbone.tap_shape(Tap::late);
  CHECK(late.height == 1);
  CHECK(late.width == 1);
  CHECK(late.filters == 64);

  const auto image = fixture::random_image({64, 64, 3}, 1);
  const auto maps = backbone.forward(image, {Tap::early, Tap::mid, Tap::late});
  CHECK(maps.at(Tap::early).values.rows() == 16);
  CHECK(maps.at(Tap::early).values.cols() == 29 * 29);
  CHECK(maps.at(Tap::mid).values.cols() == 144);
  CHECK(maps.at(Tap::late).values.cols() == 1);
}

TEST_CASE("tap shape arithmetic across a config matrix") {
  for (int size : {16, 23, 40, 64}) {
    for (int k : {1, 3, 5}) {
      for (int s : {1, 2, 3}) {
        BackboneConfig config;
        config.input = {size, size, 3};
        config.stages = {{"a", {{k, s, 4}}, Nonlinearity::relu, Pooling::none},
                         {"b", {{1, 1, 4}}, Nonlinearity::relu, Pooling::max2x2},
                         {"c", {{1, 1, 4}}, Nonlinearity::relu, Pooling::global_average}};
        const int expected = (size - k) / s + 1;
        const Backbone backbone(config);
        CHECK(backbone.tap_shape(Tap::early).height == expected);
        CHECK(backbone.tap_shape(Tap::mid).height == expected / 2);
      }
    }
  }
}

TEST_CASE("degenerate stage geometry is rejected with the stage named") {
  auto config = BackboneConfig::desk_default();
  config.stages[1].convs[0].stride = 100;
  try {
    Backbone{config};
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("stage2") != std::string::npos);
  }

  config = BackboneConfig::desk_default();
  config.input = {16, 16, 3};  // 16 -> 5 -> 3 -> 1 -> pool fails
  CHECK_THROWS_AS(Backbone{config}, ConfigError);

  config = BackboneConfig::desk_default();
  config.tapStage = {0, 1, 5};
  CHECK_THROWS_AS(Backbone{config}, ConfigError);
}

TEST_CASE("forward rejects mismatched image sizes") {
  const Backbone backbone(BackboneConfig::desk_default());
  CHECK_THROWS_AS(backbone.forward(ImageTensor::filled({32, 32, 3}, 0.5), {Tap::early}), DimensionError);
}

TEST_CASE("all-zero image gives all-zero features") {
  const Backbone backbone(BackboneConfig::desk_default());
  const auto maps = backbone.forward(ImageTensor::filled({64, 64, 3}, 0.0), {Tap::early, Tap::mid, Tap::late});
  for (const auto& [tap, fm] : maps) CHECK(fm.values.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("positive homogeneity with zero biases") {
  const Backbone backbone(fixture::small_config(1, 3));
  const auto image = fixture::random_image({12, 12, 3}, 11, 0.0, 0.5);
  std::vector<double> scaled(image.data().begin(), image.data().end());
  const double alpha = 1.75;
  for (double& v : scaled) v *= alpha;
  const auto a = backbone.forward(image, {Tap::early, Tap::mid, Tap::late});
  const auto b = backbone.forward(ImageTensor(image.shape(), scaled), {Tap::early, Tap::mid, Tap::late});
  for (Tap tap : kAllTaps) {
    const double err = (b.at(tap).values - alpha * a.at(tap).values).cwiseAbs().maxCoeff();
    CHECK(err < 1e-12 * (1.0 + a.at(tap).values.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("early tap equals brute-force cross-correlation") {
  BackboneConfig config;
  config.input = {8, 8, 3};
  config.stages = {{"s1", {{3, 1, 1}}, Nonlinearity::none, Pooling::none},
                   {"s2", {{1, 1, 2}}, Nonlinearity::relu, Pooling::none},
                   {"s3", {{1, 1, 2}}, Nonlinearity::relu, Pooling::global_average}};
  config.seed = 5;
  const Backbone backbone(config);
  const auto image = fixture::random_image({8, 8, 3}, 99, 0.0, 1.0);
  const auto fm = backbone.forward(image, {Tap::early}).at(Tap::early);
  const auto expected = oracle::conv2d(image, backbone.layers()[0]);
  REQUIRE(fm.height == 6);
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 6; ++x) {
      CHECK(fm.values(0, y * 6 + x) == doctest::Approx(expected[0][static_cast<std::size_t>(y)][static_cast<std::size_t>(x)]).epsilon(1e-13));
    }
  }

  // With ReLU and a strided multi-filter stage the oracle still applies after max(0, .).
  config.stages[0] = {"s1", {{3, 2, 4}}, Nonlinearity::relu, Pooling::none};
  const Backbone strided(config);
  const auto fm2 = strided.forward(image, {Tap::early}).at(Tap::early);
  const auto ref2 = oracle::conv2d(image, strided.layers()[0]);
  for (int o = 0; o < 4; ++o) {
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 3; ++x) {
        const double want = std::max(0.0, ref2[static_cast<std::size_t>(o)][static_cast<std::size_t>(y)][static_cast<std::size_t>(x)]);
        CHECK(fm2.values(o, y * 3 + x) == doctest::Approx(want).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("constant loss has zero gradient") {
  const Backbone backbone(fixture::small_config(0, 1));
  const auto image = fixture::random_image({8, 8, 3}, 2);
  const auto result = backbone.grad_wrt_input(image, {Tap::mid}, [](const FeatureMaps& maps) {
    LossEvaluation e;
    e.value = 3.0;
    e.gradients[Tap::mid] = Eigen::MatrixXd::Zero(maps.at(Tap::mid).values.rows(), maps.at(Tap::mid).values.cols());
    return e;
  });
  CHECK(result.loss == 3.0);
  for (double g : result.gradient.data) CHECK(g == 0.0);
}

TEST_CASE("dead units pass no gradient") {
  // A single filter whose weights are all negative never fires on a non-negative image.
  BackboneConfig config;
  config.input = {8, 8, 1};
  config.stages = {{"s1", {{3, 1, 1}}, Nonlinearity::relu, Pooling::none},
                   {"s2", {{1, 1, 1}}, Nonlinearity::relu, Pooling::none},
                   {"s3", {{1, 1, 1}}, Nonlinearity::relu, Pooling::global_average}};
  Backbone backbone(config);
  const auto dir = fixture::scratch_dir("dead-units");
  backbone.export_weights(dir / "w.bin");
  auto bytes = read_file_bytes(dir / "w.bin");
  // Header: magic(6) + stage count + 3 conv counts + 3 x 4 shape words.
  const std::size_t weightsOffset = 6 + 4 + 3 * 4 + 3 * 16;
  for (int i = 0; i < 9; ++i) {
    const float v = -0.1f;
    std::memcpy(bytes.data() + weightsOffset + 4 * i, &v, 4);
  }
  write_file_bytes(dir / "w.bin", bytes);
  const Backbone dead = backbone.load_weights(dir / "w.bin");
  const auto image = fixture::random_image({8, 8, 1}, 3, 0.0, 1.0);
  const auto result = dead.grad_wrt_input(image, {Tap::early}, [](const FeatureMaps& maps) {
    LossEvaluation e;
    e.value = maps.at(Tap::early).values.sum();
    e.gradients[Tap::early] = Eigen::MatrixXd::Ones(maps.at(Tap::early).values.rows(), maps.at(Tap::early).values.cols());
    return e;
  });
  CHECK(result.loss == 0.0);
  CHECK(result.gradient.data[3 * 8 + 3] == 0.0);
  for (double g : result.gradient.data) CHECK(g == 0.0);
}

TEST_CASE("early Gram norm gradient matches central differences") {
  const Backbone backbone(fixture::small_config(0, 21));
  const auto image = fixture::random_image({8, 8, 3}, 22);
  const auto analytic = backbone.grad_wrt_input(image, {Tap::early}, early_gram_norm);
  const auto numeric = oracle::central_difference(
      [&](const std::vector<double>& x) {
        return gram(backbone.forward(ImageTensor(image.shape(), x), {Tap::early}).at(Tap::early)).values.squaredNorm();
      },
      std::vector<double>(image.data().begin(), image.data().end()), 1e-4);
  const auto cmp = oracle::compare_gradients(analytic.gradient.data, numeric);
  CHECK(cmp.maxRelativeError < 1e-3);
  CHECK(cmp.maxAbsoluteErrorSmall < 1e-6);
}

TEST_CASE("non-finite loss names the tap") {
  const Backbone backbone(fixture::small_config(0, 1));
  const auto image = fixture::random_image({8, 8, 3}, 2);
  try {
    backbone.grad_wrt_input(image, {Tap::late}, [](const FeatureMaps& maps) {
      LossEvaluation e;
      e.value = std::numeric_limits<double>::infinity();
      e.gradients[Tap::late] = Eigen::MatrixXd::Zero(maps.at(Tap::late).values.rows(), 1);
      return e;
    });
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("late") != std::string::npos);
  }
}

TEST_CASE("forward and gradient are pure") {
  const Backbone backbone(fixture::small_config(2, 4));
  const auto image = fixture::random_image({16, 16, 3}, 5);
  const auto a = backbone.forward(image, {Tap::mid});
  const auto b = backbone.forward(image, {Tap::mid});
  CHECK(a.at(Tap::mid).values == b.at(Tap::mid).values);
  auto loss = [](const FeatureMaps& maps) {
    LossEvaluation e;
    e.value = maps.at(Tap::mid).values.squaredNorm();
    e.gradients[Tap::mid] = 2.0 * maps.at(Tap::mid).values;
    return e;
  };
  CHECK(backbone.grad_wrt_input(image, {Tap::mid}, loss).gradient.data ==
        backbone.grad_wrt_input(image, {Tap::mid}, loss).gradient.data);
}

TEST_CASE("weights export/load round-trips bitwise") {
  auto config = BackboneConfig::desk_default();
  config.seed = 13;
  const Backbone original(config);
  const auto dir = fixture::scratch_dir("weights");
  original.export_weights(dir / "w.bin");

  auto other = config;
  other.seed = 99;
  const Backbone reloaded = Backbone(other).load_weights(dir / "w.bin");
  CHECK(reloaded.same_weights(original));
  const auto image = fixture::random_image({64, 64, 3}, 6);
  CHECK(reloaded.forward(image, {Tap::late}).at(Tap::late).values ==
        original.forward(image, {Tap::late}).at(Tap::late).values);
}

TEST_CASE("truncated or mismatched weights fail to load") {
  const Backbone original(BackboneConfig::desk_default());
  const auto dir = fixture::scratch_dir("weights-bad");
  original.export_weights(dir / "w.bin");
  auto bytes = read_file_bytes(dir / "w.bin");
  bytes.resize(bytes.size() / 2);
  write_file_bytes(dir / "trunc.bin", bytes);
  CHECK_THROWS_AS(original.load_weights(dir / "trunc.bin"), LoadError);

  auto wide = BackboneConfig::desk_default();
  wide.stages[1].convs[1].filters = 48;
  wide.stages[2].convs[0].filters = 64;
  Backbone(wide).export_weights(dir / "wide.bin");
  try {
    original.load_weights(dir / "wide.bin");
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stage2") != std::string::npos);
    CHECK(msg.find("expected (filters 32") != std::string::npos);
    CHECK(msg.find("found (filters 48") != std::string::npos);
  }
  CHECK_THROWS_AS(original.load_weights(dir / "missing.bin"), LoadError);
}
