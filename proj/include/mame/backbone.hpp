#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mame/image.hpp"
#include "mame/tap.hpp"

namespace mame {

enum class Nonlinearity { relu, none };
enum class Pooling { none, max2x2, global_average };

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int filters = 16;
};

/// One stage: a chain of valid (unpadded) convolutions, each followed by the
/// stage nonlinearity, then an optional pooling step.
struct StageSpec {
  std::string name;
  std::vector<ConvSpec> convs;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  Pooling pooling = Pooling::none;
};

struct BackboneConfig {
  ImageShape input{64, 64, 3};
  std::vector<StageSpec> stages;
  /// Stage index tapped for early, mid and late features.
  std::array<int, 3> tapStage{0, 1, 2};
  std::uint64_t seed = 0;

  /// 7x7/2 conv (16) | 2x 3x3 conv (32) + 2x2 max pool | 3x3 conv (64) + global average pool.
  static BackboneConfig desk_default();

  /// Throws ConfigError naming the offending stage.
  void validate() const;
};

void to_json(nlohmann::json& j, const BackboneConfig& config);
void from_json(const nlohmann::json& j, BackboneConfig& config);

/// Activations of one tap: `values` is filters x positions, positions in row-major (y, x) order.
struct FeatureMap {
  Tap tap = Tap::early;
  int height = 0;
  int width = 0;
  Eigen::MatrixXd values;

  int filters() const { return static_cast<int>(values.rows()); }
  int positions() const { return static_cast<int>(values.cols()); }
};

using FeatureMaps = std::map<Tap, FeatureMap>;

struct TapShape {
  int height = 0;
  int width = 0;
  int filters = 0;
};

/// Value of a scalar loss over tapped features, with its gradient per tap
/// (each gradient matrix shaped like the tap's `values`).
struct LossEvaluation {
  double value = 0.0;
  std::map<Tap, Eigen::MatrixXd> gradients;
};

using TapLoss = std::function<LossEvaluation(const FeatureMaps&)>;

struct InputGradient {
  double loss = 0.0;
  ImageGradient gradient;
};

/// Deterministic convolutional feature extractor with reverse-mode gradients
/// with respect to the input image. Immutable after construction, so a single
/// instance may be shared across threads.
class Backbone {
 public:
  struct ConvLayer {
    int stage = 0;
    int inChannels = 0;
    int outChannels = 0;
    int kernel = 0;
    int stride = 1;
    /// (inChannels * kernel * kernel) x outChannels; row index (c * k + ky) * k + kx.
    Eigen::MatrixXd weights;
    Eigen::VectorXd bias;
  };

  /// Validates the config and draws seeded fan-in-scaled uniform filters; biases are zero.
  explicit Backbone(BackboneConfig config);

  const BackboneConfig& config() const { return config_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  TapShape tap_shape(Tap tap) const;

  /// Throws DimensionError if the image does not match the configured input shape.
  FeatureMaps forward(const ImageTensor& image, const TapSet& taps) const;

  /// Gradient of `loss` with respect to every input pixel. Throws NumericError
  /// naming the offending tap when the loss or its gradient is not finite.
  InputGradient grad_wrt_input(const ImageTensor& image, const TapSet& taps, const TapLoss& loss) const;

  /// Little-endian "MAMEW1" container: see README for the layout.
  void export_weights(const std::filesystem::path& path) const;
  /// Returns a backbone with the config of `this` and the filters stored at `path`.
  Backbone load_weights(const std::filesystem::path& path) const;

  bool same_weights(const Backbone& other) const;

 private:
  struct Trace;
  Trace run_forward(const ImageTensor& image, int lastStage) const;
  FeatureMap tap_map(const Trace& trace, Tap tap) const;

  BackboneConfig config_;
  std::vector<ConvLayer> layers_;
  std::vector<TapShape> stageShapes_;
};

}  // namespace mame
