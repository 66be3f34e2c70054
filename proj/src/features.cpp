#include "mame/features.hpp"

#include <bit>
#include <cstring>
#include <sstream>

#include "mame/binary_io.hpp"
#include "mame/error.hpp"

namespace mame {

namespace {
constexpr char kMatrixMagic[7] = {'M', 'A', 'M', 'E', 'F', 'M', '1'};
}

GramVector gram(const FeatureMap& fm) {
  const Eigen::Index m = fm.values.rows();
  const Eigen::MatrixXd full = fm.values * fm.values.transpose();
  GramVector g;
  g.tap = fm.tap;
  g.filters = static_cast<int>(m);
  g.values.resize(gram_dim(m));
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = i; j < m; ++j) g.values(k++) = full(i, j);
  }
  return g;
}

Eigen::MatrixXd unpack_gram(const GramVector& g) {
  const Eigen::Index m = g.filters;
  Eigen::MatrixXd full(m, m);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = i; j < m; ++j) {
      full(i, j) = g.values(k);
      full(j, i) = g.values(k);
      ++k;
    }
  }
  return full;
}

Eigen::MatrixXd gram_backward(const FeatureMap& fm, const Eigen::VectorXd& dvalues) {
  const Eigen::Index m = fm.values.rows();
  if (dvalues.size() != gram_dim(m)) throw DimensionError("gram gradient length mismatch");
  // L depends on G only through the upper triangle; spreading off-diagonal weights
  // symmetrically gives dL/dF = 2 M F with M symmetric.
  Eigen::MatrixXd sym(m, m);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    sym(i, i) = dvalues(k++);
    for (Eigen::Index j = i + 1; j < m; ++j) {
      sym(i, j) = 0.5 * dvalues(k);
      sym(j, i) = 0.5 * dvalues(k);
      ++k;
    }
  }
  return 2.0 * sym * fm.values;
}

std::vector<CorpusEntry> read_corpus_manifest(const std::filesystem::path& manifest) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest.string() + ": " + e.what());
  }
  if (!j.is_array()) throw IoError(manifest.string() + ": manifest must be a JSON list of {id, path}");
  std::vector<CorpusEntry> entries;
  for (const auto& item : j) {
    CorpusEntry e;
    e.id = item.at("id").get<std::string>();
    e.path = item.at("path").get<std::string>();
    if (e.path.is_relative()) e.path = manifest.parent_path() / e.path;
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<LabeledImage> load_corpus(const std::vector<CorpusEntry>& entries) {
  std::vector<LabeledImage> images;
  std::vector<std::string> failures;
  for (const auto& entry : entries) {
    try {
      images.push_back({entry.id, read_png(entry.path)});
    } catch (const Error& e) {
      failures.push_back(entry.id + ": " + e.what());
    }
  }
  if (!failures.empty()) {
    std::string msg = std::to_string(failures.size()) + " corpus image(s) unreadable:";
    for (const auto& f : failures) msg += "\n  " + f;
    throw IoError(msg);
  }
  return images;
}

std::map<Tap, FeatureMatrix> extract_corpus(const Backbone& backbone, const std::vector<LabeledImage>& images,
                                            const TapSet& taps) {
  std::vector<std::string> offenders;
  for (const auto& item : images) {
    if (item.image.shape() != backbone.config().input) {
      offenders.push_back(item.id + " (" + to_string(item.image.shape()) + ")");
    }
  }
  if (!offenders.empty()) {
    std::string msg = "corpus images not sized for the backbone input " + to_string(backbone.config().input) + ":";
    for (const auto& o : offenders) msg += "\n  " + o;
    throw DimensionError(msg);
  }

  std::map<Tap, FeatureMatrix> out;
  for (Tap tap : taps) {
    const auto m = backbone.tap_shape(tap).filters;
    auto& fm = out[tap];
    fm.tap = tap;
    fm.values.resize(static_cast<Eigen::Index>(images.size()), gram_dim(m));
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto maps = backbone.forward(images[i].image, taps);
    for (Tap tap : taps) {
      auto& fm = out[tap];
      fm.values.row(static_cast<Eigen::Index>(i)) = gram(maps.at(tap)).values.transpose();
      fm.imageIds.push_back(images[i].id);
    }
  }
  return out;
}

void save_feature_matrix(const std::filesystem::path& path, const FeatureMatrix& matrix, const nlohmann::json& extra) {
  BinaryWriter out;
  out.bytes(kMatrixMagic, sizeof kMatrixMagic);
  out.matrix(matrix.values);
  write_file_atomic(path, out.data());

  nlohmann::json meta = extra;
  meta["tap"] = std::string(to_string(matrix.tap));
  meta["rows"] = matrix.rows();
  meta["cols"] = matrix.cols();
  meta["imageIds"] = matrix.imageIds;
  auto sidecar = path;
  sidecar += ".json";
  write_text_atomic(sidecar, meta.dump(2) + "\n");
}

FeatureMatrix load_feature_matrix(const std::filesystem::path& path) {
  BinaryReader in(path);
  in.expect_magic(kMatrixMagic, sizeof kMatrixMagic);
  FeatureMatrix fm;
  fm.values = in.matrix();
  in.expect_end();
  auto sidecar = path;
  sidecar += ".json";
  const auto meta = nlohmann::json::parse(read_text(sidecar));
  fm.tap = parse_tap(meta.at("tap").get<std::string>());
  fm.imageIds = meta.at("imageIds").get<std::vector<std::string>>();
  if (static_cast<Eigen::Index>(fm.imageIds.size()) != fm.values.rows()) {
    throw LoadError(path.string() + ": imageIds count does not match matrix rows");
  }
  return fm;
}

}  // namespace mame
