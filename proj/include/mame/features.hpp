#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mame/backbone.hpp"
#include "mame/image.hpp"
#include "mame/tap.hpp"

namespace mame {

/// Length of the non-redundant (upper triangle incl. diagonal) Gram vector for m filters.
inline Eigen::Index gram_dim(Eigen::Index filters) { return filters * (filters + 1) / 2; }

/// Upper-triangular entries of G = F F^T, row-major: (0,0), (0,1), ..., (0,m-1), (1,1), ...
struct GramVector {
  Tap tap = Tap::early;
  int filters = 0;
  Eigen::VectorXd values;
};

GramVector gram(const FeatureMap& fm);

/// Full symmetric m x m Gram matrix from its vectorized form.
Eigen::MatrixXd unpack_gram(const GramVector& g);

/// Back-propagates dL/d(gram vector) to dL/dF (filters x positions).
Eigen::MatrixXd gram_backward(const FeatureMap& fm, const Eigen::VectorXd& dvalues);

/// n x dim matrix whose row i is the Gram vector of image i at one tap.
struct FeatureMatrix {
  Tap tap = Tap::early;
  Eigen::MatrixXd values;
  std::vector<std::string> imageIds;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
};

struct LabeledImage {
  std::string id;
  ImageTensor image;
};

struct CorpusEntry {
  std::string id;
  std::filesystem::path path;
};

/// Reads a JSON manifest `[{"id": ..., "path": ...}, ...]`; relative paths resolve
/// against the manifest's directory.
std::vector<CorpusEntry> read_corpus_manifest(const std::filesystem::path& manifest);

/// Loads every entry as PNG; unreadable files are collected and reported together.
std::vector<LabeledImage> load_corpus(const std::vector<CorpusEntry>& entries);

/// Row order follows input order. Mis-sized images are collected and the run
/// aborts with a single error listing every offender.
std::map<Tap, FeatureMatrix> extract_corpus(const Backbone& backbone, const std::vector<LabeledImage>& images,
                                            const TapSet& taps);

/// Binary "MAMEFM1" container (u64 rows, u64 cols, f64 row-major values) plus a
/// JSON sidecar `<path>.json` with the tap, image ids and any extra metadata.
void save_feature_matrix(const std::filesystem::path& path, const FeatureMatrix& matrix,
                         const nlohmann::json& extra = nlohmann::json::object());
FeatureMatrix load_feature_matrix(const std::filesystem::path& path);

}  // namespace mame
