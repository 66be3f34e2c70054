#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include <json.hpp>

#include "mame/backbone.hpp"
#include "mame/ica.hpp"
#include "mame/image.hpp"

namespace mame {

struct SynthesisSpec {
  Tap tap = Tap::early;
  /// Position in the model's selected components (0..selectCount-1).
  int component = 0;
  int direction = 1;
  double target = 0.0;
  std::string referenceImageId;
};

struct OptimConfig {
  double learningRate = 0.01;
  /// Cap on loss evaluations.
  int iterations = 300;
  double adamBeta1 = 0.9;
  double adamBeta2 = 0.999;
  double adamEpsilon = 1e-8;
  /// Early exit once the mean squared component error drops to this value.
  double stopLoss = 1e-6;
  /// Seconds; 0 disables the wall-clock budget (fully deterministic output).
  double timeBudget = 3.0;
  /// Learning rate is multiplied by `decay` whenever the loss fails to improve
  /// for `patience` consecutive evaluations.
  double decay = 0.7;
  int patience = 20;
  /// Match every ICA coordinate instead of only the selected ones.
  bool matchAllComponents = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);

struct SynthesisResult {
  ImageTensor image;
  Eigen::VectorXd achieved;  // all ICA coordinates of `image`
  Eigen::VectorXd target;
  Eigen::VectorXd original;
  double finalLoss = 0.0;
  std::vector<double> lossTrace;
  double elapsed = 0.0;
  bool converged = false;
};

nlohmann::json summary_json(const SynthesisResult& r, const std::vector<int>& selected);

struct Target {
  Eigen::VectorXd original;  // y_o
  Eigen::VectorXd target;    // y_t
};

/// ICA coordinates of `image` at the model's tap.
Eigen::VectorXd component_vector(const Backbone& backbone, const IcaModel& model, const ImageTensor& image);

/// y_t = y_o + direction * t * e_{selected[component]}.
Target make_target(const Backbone& backbone, const IcaModel& model, const ImageTensor& reference,
                   const SynthesisSpec& spec);
Target make_target(const IcaModel& model, const Eigen::VectorXd& original, const SynthesisSpec& spec);

/// Adam on raw pixels starting at the reference, clamped to [0, 1] after every step.
/// Returns the lowest-loss image seen.
SynthesisResult synthesize(const Backbone& backbone, const IcaModel& model, const ImageTensor& reference,
                           const SynthesisSpec& spec, const OptimConfig& optim);

}  // namespace mame
