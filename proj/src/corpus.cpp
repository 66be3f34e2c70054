#include "mame/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "mame/error.hpp"
#include "mame/rng.hpp"

namespace mame {

namespace {

using Plane = std::vector<double>;

// Separable box blur applied `passes` times (roughly Gaussian), wrapping at the edges.
void blur(Plane& p, int h, int w, int radius, int passes) {
  if (radius <= 0) return;
  Plane tmp(p.size());
  const double norm = 1.0 / (2 * radius + 1);
  for (int pass = 0; pass < passes; ++pass) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int d = -radius; d <= radius; ++d) s += p[y * w + ((x + d) % w + w) % w];
        tmp[y * w + x] = s * norm;
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int d = -radius; d <= radius; ++d) s += tmp[((y + d) % h + h) % h * w + x];
        p[y * w + x] = s * norm;
      }
    }
  }
}

void normalize(Plane& p) {
  const auto [lo, hi] = std::minmax_element(p.begin(), p.end());
  const double a = *lo;
  const double span = *hi - *lo;
  for (double& v : p) v = span > 0 ? (v - a) / span : 0.5;
}

Plane filtered_noise(Rng& rng, int h, int w) {
  Plane p(static_cast<std::size_t>(h * w));
  for (double& v : p) v = rng.normal();
  blur(p, h, w, 1 + static_cast<int>(rng.below(4)), 3);
  normalize(p);
  return p;
}

Plane gratings(Rng& rng, int h, int w) {
  Plane p(static_cast<std::size_t>(h * w), 0.0);
  const int waves = 1 + static_cast<int>(rng.below(3));
  for (int k = 0; k < waves; ++k) {
    const double theta = rng.uniform(0.0, M_PI);
    const double freq = rng.uniform(0.04, 0.3);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    const double amp = rng.uniform(0.5, 1.0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double u = x * std::cos(theta) + y * std::sin(theta);
        p[y * w + x] += amp * std::sin(2.0 * M_PI * freq * u + phase);
      }
    }
  }
  normalize(p);
  return p;
}

Plane blobs(Rng& rng, int h, int w) {
  Plane p(static_cast<std::size_t>(h * w), 0.0);
  const int count = 4 + static_cast<int>(rng.below(20));
  for (int k = 0; k < count; ++k) {
    const double cy = rng.uniform(0.0, h);
    const double cx = rng.uniform(0.0, w);
    const double r = rng.uniform(1.5, 8.0);
    const double sign = rng.coin() ? 1.0 : -1.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        p[y * w + x] += sign * std::exp(-d2 / (2.0 * r * r));
      }
    }
  }
  normalize(p);
  return p;
}

Plane checks(Rng& rng, int h, int w) {
  Plane p(static_cast<std::size_t>(h * w));
  const int cell = 2 + static_cast<int>(rng.below(9));
  const int ox = static_cast<int>(rng.below(static_cast<std::size_t>(cell)));
  const int oy = static_cast<int>(rng.below(static_cast<std::size_t>(cell)));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) p[y * w + x] = (((x + ox) / cell + (y + oy) / cell) % 2) ? 1.0 : 0.0;
  }
  blur(p, h, w, static_cast<int>(rng.below(2)), 1);
  for (double& v : p) v += 0.15 * rng.normal();
  normalize(p);
  return p;
}

}  // namespace

std::vector<LabeledImage> synthetic_corpus(int count, ImageShape shape, std::uint64_t seed) {
  if (count < 0) throw ConfigError("corpus count must be nonnegative");
  if (shape.height <= 0 || shape.width <= 0 || (shape.channels != 1 && shape.channels != 3)) {
    throw ConfigError("invalid corpus image shape " + to_string(shape));
  }
  const int h = shape.height;
  const int w = shape.width;
  std::vector<LabeledImage> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    Plane base;
    switch (rng.below(4)) {
      case 0: base = filtered_noise(rng, h, w); break;
      case 1: base = gratings(rng, h, w); break;
      case 2: base = blobs(rng, h, w); break;
      default: base = checks(rng, h, w); break;
    }
    // Texture detail on top, then a two-color palette.
    Plane detail = filtered_noise(rng, h, w);
    const double mixAmount = rng.uniform(0.0, 0.35);
    std::vector<double> lo(3), hi(3);
    for (int c = 0; c < 3; ++c) {
      lo[static_cast<std::size_t>(c)] = rng.uniform(0.0, 0.5);
      hi[static_cast<std::size_t>(c)] = rng.uniform(0.5, 1.0);
    }
    std::vector<double> data(shape.size());
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t k = static_cast<std::size_t>(y * w + x);
        const double v = (1.0 - mixAmount) * base[k] + mixAmount * detail[k];
        for (int c = 0; c < shape.channels; ++c) {
          const std::size_t cc = shape.channels == 1 ? 0 : static_cast<std::size_t>(c);
          data[k * static_cast<std::size_t>(shape.channels) + static_cast<std::size_t>(c)] =
              lo[cc] + (hi[cc] - lo[cc]) * v;
        }
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "tex%04d", i);
    out.push_back({id, ImageTensor::clamped(shape, std::move(data))});
  }
  return out;
}

std::filesystem::path write_corpus(const std::filesystem::path& dir, const std::vector<LabeledImage>& images) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& item : images) {
    const std::string name = item.id + ".png";
    write_png(dir / name, item.image);
    manifest.push_back({{"id", item.id}, {"path", name}});
  }
  const auto path = dir / "manifest.json";
  write_text_atomic(path, manifest.dump(2) + "\n");
  return path;
}

}  // namespace mame
