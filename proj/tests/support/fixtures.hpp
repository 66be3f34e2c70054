#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mame/backbone.hpp"
#include "mame/features.hpp"
#include "mame/ica.hpp"
#include "mame/image.hpp"
#include "mame/rng.hpp"
#include "mame/session.hpp"

namespace mame::fixture {

/// Uniform random image with intensities in [lo, hi].
ImageTensor random_image(ImageShape shape, std::uint64_t seed, double lo = 0.1, double hi = 0.9);

/// Small backbones for gradient checks: 8x8, 12x12 and 16x16 inputs, three stages each.
BackboneConfig small_config(int variant, std::uint64_t seed);

/// Fresh, empty scratch directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

std::filesystem::path data_path(const std::string& relative);

/// A 16x16 backbone with ICA models fitted on a small synthetic corpus; cheap
/// enough for synthesis-heavy tests.
struct SmallWorld {
  Backbone backbone;
  std::vector<LabeledImage> images;
  std::map<Tap, IcaModel> models;
};

SmallWorld small_world(std::uint64_t seed = 7, int images = 60, int components = 12);

/// Session assets over `small_world()`: six references, desk staircase, 60-step
/// deterministic synthesis. Built once per process.
std::shared_ptr<const ExperimentAssets> small_assets();

}  // namespace mame::fixture
