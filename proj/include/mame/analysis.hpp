#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mame/adaptive.hpp"
#include "mame/backbone.hpp"
#include "mame/features.hpp"
#include "mame/ica.hpp"
#include "mame/image.hpp"
#include "mame/synthesis.hpp"

namespace mame {

/// Single-channel signed image (difference images may be negative).
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<double> values;
};

/// Rec. 709 luma: 0.2126 R + 0.7152 G + 0.0722 B; single-channel input is copied.
GrayImage to_grayscale(const ImageTensor& image);
/// grayscale(perturbed) - grayscale(reference).
GrayImage difference_image(const ImageTensor& perturbed, const ImageTensor& reference);

/// sqrt(mean((I - mean I)^2)), population form. Throws on empty input.
double rms_contrast(std::span<const double> values);
double rms_contrast(const GrayImage& image);

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

/// Local SSIM at every valid window position (no padding), row-major.
std::vector<double> ssim_map(const GrayImage& a, const GrayImage& b, const SsimConfig& cfg = {});
/// Mean of `ssim_map`.
double ssim(const GrayImage& a, const GrayImage& b, const SsimConfig& cfg = {});
/// Grayscale conversion then `ssim`.
double ssim(const ImageTensor& a, const ImageTensor& b, const SsimConfig& cfg = {});

struct AggregateRow {
  Tap tap = Tap::early;
  int eccentricityDeg = 4;
  double mean = 0.0;
  /// Sample (n - 1) standard deviation of subject means; 0 for a single subject.
  double std = 0.0;
  int subjects = 0;
};

struct AggregateTable {
  std::vector<AggregateRow> rows;  // tap-major, eccentricity ascending

  const AggregateRow& at(Tap tap, int eccentricityDeg) const;
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// Per subject and (tap, eccentricity), the mean over component x direction
/// cells; then mean and sample std across subjects. Missing cells throw unless
/// `allowMissing`, in which case the available cells are averaged.
AggregateTable aggregate_thresholds(const std::vector<ThresholdRecord>& records, bool allowMissing = false);

/// CSV with header subjectId,tap,component,direction,eccentricityDeg,thresholdValue.
std::vector<ThresholdRecord> read_threshold_csv(const std::filesystem::path& path);
std::string threshold_csv(const std::vector<ThresholdRecord>& records);

struct ProfileCell {
  double threshold = 0.0;
  double meanRms = 0.0;
  double stdRms = 0.0;
  double meanSsim = 1.0;
  double stdSsim = 0.0;
  int samples = 0;
  int failures = 0;
};

/// For every (tap, eccentricity) threshold, synthesizes one perturbed image per
/// reference (cycling through the six component x direction cells) and reports
/// mean/std of RMS contrast of the difference image and SSIM. Aborts when more
/// than 20% of syntheses fail to converge.
std::map<std::pair<Tap, int>, ProfileCell> boundary_profile(const Backbone& backbone,
                                                             const std::map<Tap, IcaModel>& models,
                                                             const std::vector<ImageTensor>& references,
                                                             const std::map<std::pair<Tap, int>, double>& thresholds,
                                                             const OptimConfig& optim);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Ordinary least squares y = slope x + intercept.
LinearFit linear_fit(std::span<const double> x, std::span<const double> y);

}  // namespace mame
