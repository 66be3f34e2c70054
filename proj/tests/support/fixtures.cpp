#include "support/fixtures.hpp"

#include <unistd.h>

#include <vector>

#include "mame/corpus.hpp"

namespace mame::fixture {

ImageTensor random_image(ImageShape shape, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  std::vector<double> data(shape.size());
  for (double& v : data) v = rng.uniform(lo, hi);
  return ImageTensor(shape, std::move(data));
}

BackboneConfig small_config(int variant, std::uint64_t seed) {
  BackboneConfig config;
  config.seed = seed;
  switch (variant % 3) {
    case 0:
      config.input = {8, 8, 3};
      config.stages = {
          {"s1", {{3, 1, 4}}, Nonlinearity::relu, Pooling::none},
          {"s2", {{3, 1, 6}}, Nonlinearity::relu, Pooling::max2x2},
          {"s3", {{1, 1, 8}}, Nonlinearity::relu, Pooling::global_average},
      };
      break;
    case 1:
      config.input = {12, 12, 3};
      config.stages = {
          {"s1", {{3, 1, 5}}, Nonlinearity::relu, Pooling::none},
          {"s2", {{3, 1, 6}, {3, 1, 6}}, Nonlinearity::relu, Pooling::max2x2},
          {"s3", {{2, 1, 8}}, Nonlinearity::relu, Pooling::global_average},
      };
      break;
    default:
      config.input = {16, 16, 3};
      config.stages = {
          {"s1", {{5, 2, 6}}, Nonlinearity::relu, Pooling::none},
          {"s2", {{3, 1, 8}}, Nonlinearity::relu, Pooling::max2x2},
          {"s3", {{2, 1, 10}}, Nonlinearity::relu, Pooling::global_average},
      };
      break;
  }
  config.tapStage = {0, 1, 2};
  return config;
}

std::filesystem::path scratch_dir(const std::string& name) {
  // Removed again when the test process exits.
  static const struct Root {
    std::filesystem::path path =
        std::filesystem::temp_directory_path() / ("mame-test-" + std::to_string(::getpid()));
    ~Root() {
      std::error_code ec;
      std::filesystem::remove_all(path, ec);
    }
  } root;
  auto dir = root.path / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::filesystem::path data_path(const std::string& relative) { return std::filesystem::path(MAME_TEST_DATA) / relative; }

SmallWorld small_world(std::uint64_t seed, int images, int components) {
  SmallWorld world{Backbone(small_config(2, seed)), {}, {}};
  world.images = synthetic_corpus(images, world.backbone.config().input, seed);
  const auto features = extract_corpus(world.backbone, world.images, {Tap::early, Tap::mid, Tap::late});
  IcaFitConfig cfg;
  cfg.nComponents = components;
  cfg.capToRank = true;
  cfg.seed = seed;
  for (const auto& [tap, fm] : features) world.models[tap] = fit_ica(fm, cfg);
  return world;
}

std::shared_ptr<const ExperimentAssets> small_assets() {
  static const auto assets = [] {
    SmallWorld w = small_world();
    std::map<std::string, ImageTensor> refs;
    for (std::size_t i = 0; i < 6; ++i) refs.emplace(w.images[i].id, w.images[i].image);
    OptimConfig optim;
    optim.timeBudget = 0.0;
    optim.iterations = 60;
    return std::make_shared<const ExperimentAssets>(w.backbone, w.models, refs, StaircaseConfig::desk_default(), optim);
  }();
  return assets;
}

}  // namespace mame::fixture
