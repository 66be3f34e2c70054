#include "mame/synthesis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "mame/error.hpp"
#include "mame/features.hpp"

namespace mame {

void OptimConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("optim.") + name + " must be positive");
  };
  positive(learningRate, "learningRate");
  positive(adamBeta1, "adamBeta1");
  positive(adamBeta2, "adamBeta2");
  positive(adamEpsilon, "adamEpsilon");
  positive(stopLoss, "stopLoss");
  positive(decay, "decay");
  if (iterations <= 0) throw ConfigError("optim.iterations must be positive");
  if (patience <= 0) throw ConfigError("optim.patience must be positive");
  if (adamBeta1 >= 1.0 || adamBeta2 >= 1.0) throw ConfigError("optim Adam betas must be below 1");
  if (decay > 1.0) throw ConfigError("optim.decay must be at most 1");
  if (timeBudget < 0.0 || !std::isfinite(timeBudget)) throw ConfigError("optim.timeBudget must be nonnegative");
}

void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = {{"learningRate", c.learningRate}, {"iterations", c.iterations},   {"adamBeta1", c.adamBeta1},
       {"adamBeta2", c.adamBeta2},       {"adamEpsilon", c.adamEpsilon}, {"stopLoss", c.stopLoss},
       {"timeBudget", c.timeBudget},     {"decay", c.decay},             {"patience", c.patience},
       {"matchAllComponents", c.matchAllComponents}};
}

void from_json(const nlohmann::json& j, OptimConfig& c) {
  OptimConfig d;
  c.learningRate = j.value("learningRate", d.learningRate);
  c.iterations = j.value("iterations", d.iterations);
  c.adamBeta1 = j.value("adamBeta1", d.adamBeta1);
  c.adamBeta2 = j.value("adamBeta2", d.adamBeta2);
  c.adamEpsilon = j.value("adamEpsilon", d.adamEpsilon);
  c.stopLoss = j.value("stopLoss", d.stopLoss);
  c.timeBudget = j.value("timeBudget", d.timeBudget);
  c.decay = j.value("decay", d.decay);
  c.patience = j.value("patience", d.patience);
  c.matchAllComponents = j.value("matchAllComponents", d.matchAllComponents);
}

nlohmann::json summary_json(const SynthesisResult& r, const std::vector<int>& selected) {
  std::vector<double> achieved, target, original;
  for (int c : selected) {
    achieved.push_back(r.achieved(c));
    target.push_back(r.target(c));
    original.push_back(r.original(c));
  }
  return {{"achieved", achieved}, {"target", target},       {"original", original},
          {"finalLoss", r.finalLoss}, {"iterations", r.lossTrace.size()}, {"elapsed", r.elapsed},
          {"converged", r.converged}, {"lossTrace", r.lossTrace}};
}

Eigen::VectorXd component_vector(const Backbone& backbone, const IcaModel& model, const ImageTensor& image) {
  const auto maps = backbone.forward(image, {model.tap});
  return transform(model, gram(maps.at(model.tap)).values);
}

Target make_target(const IcaModel& model, const Eigen::VectorXd& original, const SynthesisSpec& spec) {
  if (spec.component < 0 || spec.component >= static_cast<int>(model.selected.size())) {
    throw ConfigError("component " + std::to_string(spec.component) + " outside the " +
                      std::to_string(model.selected.size()) + " selected components");
  }
  if (spec.direction != 1 && spec.direction != -1) throw ConfigError("direction must be +1 or -1");
  if (!(spec.target >= 0.0) || !std::isfinite(spec.target)) throw ConfigError("target value must be finite and >= 0");
  if (original.size() != model.components()) throw DimensionError("component vector size mismatch");
  Target t{original, original};
  t.target(model.selected[static_cast<std::size_t>(spec.component)]) += spec.direction * spec.target;
  return t;
}

Target make_target(const Backbone& backbone, const IcaModel& model, const ImageTensor& reference,
                   const SynthesisSpec& spec) {
  return make_target(model, component_vector(backbone, model, reference), spec);
}

SynthesisResult synthesize(const Backbone& backbone, const IcaModel& model, const ImageTensor& reference,
                           const SynthesisSpec& spec, const OptimConfig& optim) {
  optim.validate();
  if (spec.tap != model.tap) {
    throw ConfigError("spec tap " + std::string(to_string(spec.tap)) + " does not match model tap " +
                      std::string(to_string(model.tap)));
  }
  const auto start = std::chrono::steady_clock::now();
  const auto seconds = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  const Target goal = make_target(backbone, model, reference, spec);
  SynthesisResult result;
  result.original = goal.original;
  result.target = goal.target;
  if (spec.target == 0.0) {
    result.image = reference;
    result.achieved = goal.original;
    result.converged = true;
    result.elapsed = seconds();
    return result;
  }

  std::vector<int> idx;
  if (optim.matchAllComponents) {
    for (int c = 0; c < model.components(); ++c) idx.push_back(c);
  } else {
    idx = model.selected;
  }
  const double k = static_cast<double>(idx.size());

  Eigen::VectorXd current;  // ICA coordinates from the latest evaluation
  const TapLoss loss = [&](const FeatureMaps& maps) {
    const FeatureMap& fm = maps.at(model.tap);
    const Eigen::VectorXd g = gram(fm).values;
    current = model.combined * (g - model.mean);
    Eigen::VectorXd dy = Eigen::VectorXd::Zero(current.size());
    double value = 0.0;
    for (int c : idx) {
      const double diff = current(c) - goal.target(c);
      value += diff * diff;
      dy(c) = 2.0 * diff / k;
    }
    LossEvaluation out;
    out.value = value / k;
    out.gradients[model.tap] = gram_backward(fm, model.combined.transpose() * dy);
    return out;
  };

  const ImageShape shape = reference.shape();
  std::vector<double> x(reference.data().begin(), reference.data().end());
  std::vector<double> m(x.size(), 0.0), v(x.size(), 0.0);
  double lr = optim.learningRate;
  double b1t = 1.0, b2t = 1.0;
  double best = std::numeric_limits<double>::infinity();
  int sinceImprovement = 0;
  std::vector<double> bestPixels = x;
  Eigen::VectorXd bestAchieved = goal.original;

  for (int it = 0; it < optim.iterations; ++it) {
    const ImageTensor image(shape, x);
    InputGradient grad;
    try {
      grad = backbone.grad_wrt_input(image, {model.tap}, loss);
    } catch (const NumericError& e) {
      throw NumericError("synthesis iteration " + std::to_string(it) + ": " + e.what());
    }
    result.lossTrace.push_back(grad.loss);
    if (grad.loss < best) {
      best = grad.loss;
      bestPixels = x;
      bestAchieved = current;
      sinceImprovement = 0;
    } else if (++sinceImprovement >= optim.patience) {
      lr *= optim.decay;
      sinceImprovement = 0;
    }
    if (best <= optim.stopLoss) break;
    if (optim.timeBudget > 0.0 && seconds() > optim.timeBudget) break;
    if (it + 1 == optim.iterations) break;

    b1t *= optim.adamBeta1;
    b2t *= optim.adamBeta2;
    const auto& g = grad.gradient.data;
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = optim.adamBeta1 * m[i] + (1.0 - optim.adamBeta1) * g[i];
      v[i] = optim.adamBeta2 * v[i] + (1.0 - optim.adamBeta2) * g[i] * g[i];
      const double mh = m[i] / (1.0 - b1t);
      const double vh = v[i] / (1.0 - b2t);
      x[i] = std::clamp(x[i] - lr * mh / (std::sqrt(vh) + optim.adamEpsilon), 0.0, 1.0);
    }
  }

  result.image = ImageTensor(shape, std::move(bestPixels));
  result.achieved = bestAchieved;
  result.finalLoss = best;
  result.converged = best <= optim.stopLoss;
  result.elapsed = seconds();
  return result;
}

}  // namespace mame
