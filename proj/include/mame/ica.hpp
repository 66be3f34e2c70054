#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mame/features.hpp"
#include "mame/tap.hpp"

namespace mame {

enum class IcaContrast { logcosh };

struct IcaFitConfig {
  /// Requested component count; see `effective_components` for the desk-scale cap.
  int nComponents = 100;
  IcaContrast contrast = IcaContrast::logcosh;
  double tolerance = 1e-4;
  int maxIterations = 200;
  std::uint64_t seed = 0;
  /// Number of exploration axes kept in `IcaModel::selected`.
  int selectCount = 3;
  /// When true, nComponents is capped at the effective rank of the centered data
  /// instead of failing.
  bool capToRank = false;
};

void to_json(nlohmann::json& j, const IcaFitConfig& c);
void from_json(const nlohmann::json& j, IcaFitConfig& c);

/// FastICA model of one tap: s = combined * (x - mean), x ~ mean + mixing * s.
struct IcaModel {
  Tap tap = Tap::early;
  Eigen::VectorXd mean;          // dim
  Eigen::MatrixXd whiten;        // c x dim
  Eigen::MatrixXd unmix;         // c x c, orthonormal rows
  Eigen::MatrixXd combined;      // c x dim, unmix * whiten
  Eigen::MatrixXd mixing;        // dim x c, pseudo-inverse of combined
  Eigen::VectorXd explainedVariance;  // c, on the training matrix
  std::vector<int> selected;     // descending explained variance
  IcaFitConfig config;
  int iterations = 0;
  bool converged = true;

  int components() const { return static_cast<int>(combined.rows()); }
  Eigen::Index dim() const { return combined.cols(); }
};

/// Count of singular values of the centered matrix above a relative 1e-10 cutoff.
int effective_rank(const Eigen::MatrixXd& x);

/// Whitening by SVD of the centered matrix, log-cosh FastICA with symmetric
/// decorrelation, sign fixed so the largest-magnitude mixing loading of each
/// component is positive. Non-convergence is reported via `converged`.
IcaModel fit_ica(const FeatureMatrix& x, const IcaFitConfig& cfg);

Eigen::VectorXd transform(const IcaModel& model, const Eigen::VectorXd& x);
/// Row-wise transform of an n x dim matrix; returns n x c.
Eigen::MatrixXd transform_rows(const IcaModel& model, const Eigen::MatrixXd& x);

/// mean + mixing * (s masked to keepOnly); all components when keepOnly is empty optional.
Eigen::VectorXd reconstruct(const IcaModel& model, const Eigen::VectorXd& s,
                            const std::optional<std::vector<int>>& keepOnly = std::nullopt);

/// 1 - ||X - Xhat_i||_F^2 / ||X||_F^2, Xhat_i keeping only component i.
double explained_variance(const IcaModel& model, const Eigen::MatrixXd& x, int component);

/// Indices of the k largest values, descending; ties broken by lower index.
std::vector<int> select_components(const Eigen::VectorXd& explainedVariance, int k);

struct ReferenceSelection {
  std::map<Tap, double> threshold;
  std::map<Tap, Eigen::VectorXd> norms;  // per tap, aligned with `candidateIds`
  std::vector<std::string> candidateIds;
  std::vector<std::string> imageIds;     // sorted
  double percentile = 20.0;
};

/// Linear-interpolated percentile (0..100) of `values`.
double percentile(std::vector<double> values, double pct);

/// Per tap, threshold = percentile of Euclidean norms of the selected-component
/// vectors; returns the ids at or below threshold at every tap. Throws when the
/// intersection is empty.
ReferenceSelection select_reference_images(const std::map<Tap, IcaModel>& models,
                                           const std::map<Tap, FeatureMatrix>& features, double pct = 20.0);

/// Thresholds and image count reported for a robust ResNet50 on 50,000 ImageNet
/// validation images (conv1, layer3, avgpool). Metadata only; the desk backbone
/// does not reproduce them.
struct PublishedReferenceSelection {
  double conv1 = 1.22;
  double layer3 = 1.73;
  double avgpool = 0.79;
  int selectedImages = 614;
  int corpusImages = 50000;
  double percentile = 20.0;
};
inline constexpr PublishedReferenceSelection kPublishedReferenceSelection{};

/// "MAMEICA1" binary matrices at `path` plus JSON metadata at `<path>.json`.
void save_ica_model(const std::filesystem::path& path, const IcaModel& model,
                    const nlohmann::json& extra = nlohmann::json::object());
IcaModel load_ica_model(const std::filesystem::path& path);

}  // namespace mame
