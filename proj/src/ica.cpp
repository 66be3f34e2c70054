#include "mame/ica.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mame/binary_io.hpp"
#include "mame/error.hpp"
#include "mame/rng.hpp"

namespace mame {

namespace {

constexpr char kIcaMagic[8] = {'M', 'A', 'M', 'E', 'I', 'C', 'A', '1'};
constexpr double kRankCutoff = 1e-10;

/// R <- (R R^T)^{-1/2} R
Eigen::MatrixXd symmetric_decorrelation(const Eigen::MatrixXd& r) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(r * r.transpose());
  const Eigen::VectorXd inv_sqrt = eig.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose() * r;
}

}  // namespace

void to_json(nlohmann::json& j, const IcaFitConfig& c) {
  j = {{"nComponents", c.nComponents}, {"contrast", "logcosh"},    {"tolerance", c.tolerance},
       {"maxIterations", c.maxIterations}, {"seed", c.seed},       {"selectCount", c.selectCount},
       {"capToRank", c.capToRank}};
}

void from_json(const nlohmann::json& j, IcaFitConfig& c) {
  c = IcaFitConfig{};
  c.nComponents = j.value("nComponents", c.nComponents);
  if (j.value("contrast", std::string("logcosh")) != "logcosh") {
    throw ConfigError("unsupported ICA contrast '" + j.value("contrast", std::string()) + "'");
  }
  c.tolerance = j.value("tolerance", c.tolerance);
  c.maxIterations = j.value("maxIterations", c.maxIterations);
  c.seed = j.value("seed", c.seed);
  c.selectCount = j.value("selectCount", c.selectCount);
  c.capToRank = j.value("capToRank", c.capToRank);
}

int effective_rank(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > sv(0) * kRankCutoff) ++rank;
  }
  return rank;
}

IcaModel fit_ica(const FeatureMatrix& fm, const IcaFitConfig& cfg) {
  const Eigen::MatrixXd& x = fm.values;
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (cfg.tolerance <= 0.0) throw ConfigError("ICA tolerance must be positive");
  if (cfg.nComponents <= 0) throw ConfigError("ICA component count must be positive");
  if (cfg.maxIterations <= 0) throw ConfigError("ICA iteration cap must be positive");
  if (!x.allFinite()) throw FitError("feature matrix contains non-finite values");
  if (n < 2) throw FitError("need at least 2 rows to fit ICA, got " + std::to_string(n));

  IcaModel model;
  model.tap = fm.tap;
  model.config = cfg;
  model.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - model.mean.transpose();

  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(0) > 0.0 && sv(i) > sv(0) * kRankCutoff) ++rank;
  }
  int c = cfg.nComponents;
  if (cfg.capToRank) c = std::min(c, rank);
  if (c <= 0 || rank < c || n < c + 1 || d < c) {
    throw FitError("insufficient rank for " + std::to_string(cfg.nComponents) + " components: " + std::to_string(n) +
                   " rows, " + std::to_string(d) + " columns, effective rank " + std::to_string(rank));
  }
  model.config.nComponents = c;

  const double root_n = std::sqrt(static_cast<double>(n));
  const Eigen::MatrixXd v = svd.matrixV().leftCols(c);
  const Eigen::VectorXd s = sv.head(c);
  model.whiten = root_n * s.cwiseInverse().asDiagonal() * v.transpose();
  const Eigen::MatrixXd white = root_n * svd.matrixU().leftCols(c).transpose();  // c x n, unit covariance

  Rng rng(cfg.seed);
  Eigen::MatrixXd r(c, c);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  r = symmetric_decorrelation(r);

  model.converged = false;
  for (int it = 1; it <= cfg.maxIterations; ++it) {
    const Eigen::ArrayXXd g = (r * white).array().tanh();
    const Eigen::VectorXd gprime_mean = (1.0 - g.square()).rowwise().mean().matrix();
    Eigen::MatrixXd next = (g.matrix() * white.transpose()) / static_cast<double>(n) -
                           gprime_mean.asDiagonal() * r;
    next = symmetric_decorrelation(next);
    const double lim = ((next.cwiseProduct(r)).rowwise().sum().cwiseAbs().array() - 1.0).abs().maxCoeff();
    r = std::move(next);
    model.iterations = it;
    if (lim < cfg.tolerance) {
      model.converged = true;
      break;
    }
  }
  r = symmetric_decorrelation(r);

  const Eigen::MatrixXd whiten_pinv = v * s.asDiagonal() / root_n;  // dim x c
  Eigen::MatrixXd mixing = whiten_pinv * r.transpose();
  for (Eigen::Index i = 0; i < c; ++i) {
    Eigen::Index arg = 0;
    mixing.col(i).cwiseAbs().maxCoeff(&arg);
    if (mixing(arg, i) < 0.0) {
      mixing.col(i) *= -1.0;
      r.row(i) *= -1.0;
    }
  }
  model.unmix = r;
  model.combined = r * model.whiten;
  model.mixing = mixing;

  // ||X - (1 mu^T + s_i a_i^T)||^2 = ||Xc||^2 - 2 a_i^T Xc^T s_i + ||a_i||^2 ||s_i||^2
  const Eigen::MatrixXd sources = centered * model.combined.transpose();  // n x c
  const double total = x.squaredNorm();
  if (total == 0.0) throw FitError("feature matrix has zero Frobenius norm");
  const double centered_sq = centered.squaredNorm();
  const Eigen::MatrixXd projected = centered.transpose() * sources;  // dim x c
  model.explainedVariance.resize(c);
  for (Eigen::Index i = 0; i < c; ++i) {
    const double residual = centered_sq - 2.0 * mixing.col(i).dot(projected.col(i)) +
                            mixing.col(i).squaredNorm() * sources.col(i).squaredNorm();
    model.explainedVariance(i) = 1.0 - residual / total;
  }
  model.selected = select_components(model.explainedVariance, std::min(cfg.selectCount, c));
  return model;
}

Eigen::VectorXd transform(const IcaModel& model, const Eigen::VectorXd& x) {
  if (x.size() != model.dim()) {
    throw DimensionError("feature vector length " + std::to_string(x.size()) + " does not match model dimension " +
                         std::to_string(model.dim()));
  }
  return model.combined * (x - model.mean);
}

Eigen::MatrixXd transform_rows(const IcaModel& model, const Eigen::MatrixXd& x) {
  if (x.cols() != model.dim()) throw DimensionError("feature matrix width does not match model dimension");
  return (x.rowwise() - model.mean.transpose()) * model.combined.transpose();
}

Eigen::VectorXd reconstruct(const IcaModel& model, const Eigen::VectorXd& s,
                            const std::optional<std::vector<int>>& keepOnly) {
  if (s.size() != model.components()) {
    throw DimensionError("component vector length " + std::to_string(s.size()) + " does not match " +
                         std::to_string(model.components()));
  }
  if (!keepOnly) return model.mean + model.mixing * s;
  Eigen::VectorXd out = model.mean;
  for (int i : *keepOnly) {
    if (i < 0 || i >= model.components()) throw DimensionError("component index " + std::to_string(i) + " out of range");
    out += model.mixing.col(i) * s(i);
  }
  return out;
}

double explained_variance(const IcaModel& model, const Eigen::MatrixXd& x, int component) {
  if (component < 0 || component >= model.components()) {
    throw DimensionError("component index " + std::to_string(component) + " out of range");
  }
  const double total = x.squaredNorm();
  if (total == 0.0) throw NumericError("explained variance undefined for a zero matrix");
  const Eigen::MatrixXd sources = transform_rows(model, x);
  const std::vector<int> keep{component};
  double residual = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    residual += (x.row(r).transpose() - reconstruct(model, sources.row(r).transpose(), keep)).squaredNorm();
  }
  return 1.0 - residual / total;
}

std::vector<int> select_components(const Eigen::VectorXd& ev, int k) {
  std::vector<int> order(static_cast<std::size_t>(ev.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return ev(a) > ev(b); });
  order.resize(static_cast<std::size_t>(std::clamp<Eigen::Index>(k, 0, ev.size())));
  return order;
}

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw NumericError("percentile of an empty set");
  if (!(pct >= 0.0 && pct <= 100.0)) throw ConfigError("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

ReferenceSelection select_reference_images(const std::map<Tap, IcaModel>& models,
                                           const std::map<Tap, FeatureMatrix>& features, double pct) {
  if (models.empty()) throw ConfigError("no ICA models given for reference selection");
  ReferenceSelection out;
  out.percentile = pct;

  std::set<std::string> ids;
  bool first = true;
  for (const auto& [tap, model] : models) {
    auto it = features.find(tap);
    if (it == features.end()) throw ConfigError("no features for tap '" + std::string(to_string(tap)) + "'");
    std::set<std::string> these(it->second.imageIds.begin(), it->second.imageIds.end());
    if (these.size() != it->second.imageIds.size()) {
      throw ConfigError("duplicate image ids in features for tap '" + std::string(to_string(tap)) + "'");
    }
    if (first) {
      ids = std::move(these);
      first = false;
    } else if (these != ids) {
      throw ConfigError("taps were not fitted on the same image id set");
    }
  }
  out.candidateIds.assign(ids.begin(), ids.end());
  const auto n = static_cast<Eigen::Index>(out.candidateIds.size());

  std::vector<bool> keep(out.candidateIds.size(), true);
  for (const auto& [tap, model] : models) {
    const auto& fm = features.at(tap);
    std::map<std::string, Eigen::Index> row_of;
    for (std::size_t r = 0; r < fm.imageIds.size(); ++r) row_of[fm.imageIds[r]] = static_cast<Eigen::Index>(r);
    const Eigen::MatrixXd sources = transform_rows(model, fm.values);
    Eigen::VectorXd norms(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index r = row_of.at(out.candidateIds[static_cast<std::size_t>(i)]);
      double sq = 0.0;
      for (int comp : model.selected) sq += sources(r, comp) * sources(r, comp);
      norms(i) = std::sqrt(sq);
    }
    const double threshold = percentile(std::vector<double>(norms.data(), norms.data() + n), pct);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (norms(i) > threshold) keep[static_cast<std::size_t>(i)] = false;
    }
    out.threshold[tap] = threshold;
    out.norms[tap] = std::move(norms);
  }
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) out.imageIds.push_back(out.candidateIds[i]);
  }
  if (out.imageIds.empty()) {
    throw FitError("no image lies within the lowest " + std::to_string(pct) +
                   "% at every tap; retry with a larger percentile");
  }
  return out;
}

void save_ica_model(const std::filesystem::path& path, const IcaModel& model, const nlohmann::json& extra) {
  BinaryWriter out;
  out.bytes(kIcaMagic, sizeof kIcaMagic);
  out.matrix(model.mean);
  out.matrix(model.whiten);
  out.matrix(model.unmix);
  out.matrix(model.combined);
  out.matrix(model.mixing);
  out.matrix(model.explainedVariance);
  write_file_atomic(path, out.data());

  nlohmann::json meta = extra;
  meta["format"] = "MAMEICA1";
  meta["tap"] = std::string(to_string(model.tap));
  meta["seed"] = model.config.seed;
  meta["config"] = model.config;
  meta["explainedVariance"] = std::vector<double>(model.explainedVariance.data(),
                                                  model.explainedVariance.data() + model.explainedVariance.size());
  meta["selected"] = model.selected;
  meta["converged"] = model.converged;
  meta["iterations"] = model.iterations;
  auto sidecar = path;
  sidecar += ".json";
  write_text_atomic(sidecar, meta.dump(2) + "\n");
}

IcaModel load_ica_model(const std::filesystem::path& path) {
  BinaryReader in(path);
  in.expect_magic(kIcaMagic, sizeof kIcaMagic);
  IcaModel model;
  model.mean = in.matrix();
  model.whiten = in.matrix();
  model.unmix = in.matrix();
  model.combined = in.matrix();
  model.mixing = in.matrix();
  model.explainedVariance = in.matrix();
  in.expect_end();
  const Eigen::Index c = model.combined.rows();
  const Eigen::Index d = model.combined.cols();
  if (model.mean.size() != d || model.whiten.rows() != c || model.whiten.cols() != d || model.unmix.rows() != c ||
      model.unmix.cols() != c || model.mixing.rows() != d || model.mixing.cols() != c ||
      model.explainedVariance.size() != c) {
    throw LoadError(path.string() + ": inconsistent ICA matrix shapes");
  }
  auto sidecar = path;
  sidecar += ".json";
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text(sidecar));
  } catch (const std::exception& e) {
    throw LoadError(sidecar.string() + ": " + e.what());
  }
  if (meta.value("format", std::string()) != "MAMEICA1") throw LoadError(sidecar.string() + ": not a MAMEICA1 model");
  model.tap = parse_tap(meta.at("tap").get<std::string>());
  model.config = meta.at("config").get<IcaFitConfig>();
  model.selected = meta.at("selected").get<std::vector<int>>();
  model.converged = meta.value("converged", true);
  model.iterations = meta.value("iterations", 0);
  for (int i : model.selected) {
    if (i < 0 || i >= c) throw LoadError(sidecar.string() + ": selected component out of range");
  }
  return model;
}

}  // namespace mame
