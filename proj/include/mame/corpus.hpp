#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mame/features.hpp"
#include "mame/image.hpp"

namespace mame {

/// Seeded synthetic textures (filtered noise, gratings, blobs and checks) used as
/// the desk corpus. Image i depends only on (seed, i).
std::vector<LabeledImage> synthetic_corpus(int count, ImageShape shape, std::uint64_t seed);

/// Writes `<dir>/<id>.png` for every image and `<dir>/manifest.json`; returns the manifest path.
std::filesystem::path write_corpus(const std::filesystem::path& dir, const std::vector<LabeledImage>& images);

}  // namespace mame
