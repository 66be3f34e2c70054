#include "mame/analysis.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "mame/error.hpp"

namespace mame {

namespace {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd sample_stats(const std::vector<double>& v) {
  MeanStd out;
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return out;
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return out;
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const double c = 0.5 * (size - 1);
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i)];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Valid-mode separable filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& p, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = h - n + 1;
  const int ow = w - n + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[static_cast<std::size_t>(i)] * p[static_cast<std::size_t>(y * w + x + i)];
      rows[static_cast<std::size_t>(y * ow + x)] = s;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>((y + i) * ow + x)];
      out[static_cast<std::size_t>(y * ow + x)] = s;
    }
  }
  return out;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, sep)) {
    while (!item.empty() && (item.back() == '\r' || item.back() == ' ')) item.pop_back();
    while (!item.empty() && item.front() == ' ') item.erase(item.begin());
    out.push_back(item);
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

GrayImage to_grayscale(const ImageTensor& image) {
  GrayImage g{image.height(), image.width(), {}};
  const auto px = image.data();
  const std::size_t n = static_cast<std::size_t>(image.height()) * static_cast<std::size_t>(image.width());
  g.values.resize(n);
  if (image.channels() == 1) {
    for (std::size_t i = 0; i < n; ++i) g.values[i] = px[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      g.values[i] = 0.2126 * px[3 * i] + 0.7152 * px[3 * i + 1] + 0.0722 * px[3 * i + 2];
    }
  }
  return g;
}

GrayImage difference_image(const ImageTensor& perturbed, const ImageTensor& reference) {
  if (perturbed.shape() != reference.shape()) {
    throw DimensionError("difference of mismatched images: " + to_string(perturbed.shape()) + " vs " +
                         to_string(reference.shape()));
  }
  GrayImage a = to_grayscale(perturbed);
  const GrayImage b = to_grayscale(reference);
  for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] -= b.values[i];
  return a;
}

double rms_contrast(std::span<const double> values) {
  if (values.empty()) throw DimensionError("rms_contrast of an empty image");
  // Shifted by the first sample so constant inputs give exactly zero.
  const double shift = values[0];
  double mean = 0.0;
  for (double v : values) mean += v - shift;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - shift - mean) * (v - shift - mean);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

double rms_contrast(const GrayImage& image) { return rms_contrast(image.values); }

std::vector<double> ssim_map(const GrayImage& a, const GrayImage& b, const SsimConfig& cfg) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("ssim of mismatched images");
  if (a.height < cfg.window || a.width < cfg.window) {
    throw DimensionError("image " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " smaller than the " + std::to_string(cfg.window) + "x" + std::to_string(cfg.window) +
                         " ssim window");
  }
  const auto k = gaussian_kernel(cfg.window, cfg.sigma);
  const std::size_t n = a.values.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a.values[i] * a.values[i];
    bb[i] = b.values[i] * b.values[i];
    ab[i] = a.values[i] * b.values[i];
  }
  const auto mu_a = filter_valid(a.values, a.height, a.width, k);
  const auto mu_b = filter_valid(b.values, a.height, a.width, k);
  const auto e_aa = filter_valid(aa, a.height, a.width, k);
  const auto e_bb = filter_valid(bb, a.height, a.width, k);
  const auto e_ab = filter_valid(ab, a.height, a.width, k);
  const double c1 = (cfg.k1 * cfg.range) * (cfg.k1 * cfg.range);
  const double c2 = (cfg.k2 * cfg.range) * (cfg.k2 * cfg.range);
  std::vector<double> out(mu_a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double ma = mu_a[i];
    const double mb = mu_b[i];
    const double va = e_aa[i] - ma * ma;
    const double vb = e_bb[i] - mb * mb;
    const double cov = e_ab[i] - ma * mb;
    out[i] = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return out;
}

double ssim(const GrayImage& a, const GrayImage& b, const SsimConfig& cfg) {
  const auto m = ssim_map(a, b, cfg);
  double s = 0.0;
  for (double v : m) s += v;
  return s / static_cast<double>(m.size());
}

double ssim(const ImageTensor& a, const ImageTensor& b, const SsimConfig& cfg) {
  if (a.shape() != b.shape()) {
    throw DimensionError("ssim of mismatched images: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  return ssim(to_grayscale(a), to_grayscale(b), cfg);
}

const AggregateRow& AggregateTable::at(Tap tap, int eccentricityDeg) const {
  for (const auto& r : rows) {
    if (r.tap == tap && r.eccentricityDeg == eccentricityDeg) return r;
  }
  throw StateError("no aggregate row for " + std::string(to_string(tap)) + " at " + std::to_string(eccentricityDeg) +
                   " deg");
}

std::string AggregateTable::to_csv() const {
  std::string out = "tap,eccentricityDeg,mean,std,subjects\n";
  for (const auto& r : rows) {
    out += std::string(to_string(r.tap)) + "," + std::to_string(r.eccentricityDeg) + "," + format_double(r.mean) +
           "," + format_double(r.std) + "," + std::to_string(r.subjects) + "\n";
  }
  return out;
}

nlohmann::json AggregateTable::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"tap", std::string(to_string(r.tap))},
                 {"eccentricityDeg", r.eccentricityDeg},
                 {"mean", r.mean},
                 {"std", r.std},
                 {"subjects", r.subjects}});
  }
  return j;
}

AggregateTable aggregate_thresholds(const std::vector<ThresholdRecord>& records, bool allowMissing) {
  std::map<std::string, std::map<int, double>> bySubject;
  for (const auto& r : records) {
    if (!std::isfinite(r.thresholdValue)) throw ConfigError("non-finite threshold for subject " + r.subjectId);
    const int idx = condition_index(r.condition);
    if (!bySubject[r.subjectId].emplace(idx, r.thresholdValue).second) {
      throw ConfigError("duplicate threshold record: subject " + r.subjectId + ", " + condition_key(r.condition));
    }
  }
  if (bySubject.empty()) throw ConfigError("no threshold records");

  AggregateTable table;
  std::vector<std::string> missing;
  for (Tap tap : kAllTaps) {
    for (int ecc : kEccentricities) {
      std::vector<double> subjectMeans;
      for (const auto& [subject, cells] : bySubject) {
        double sum = 0.0;
        int count = 0;
        for (int c = 0; c < 3; ++c) {
          for (int dir : {1, -1}) {
            const Condition cond{tap, c, dir, ecc};
            const auto it = cells.find(condition_index(cond));
            if (it == cells.end()) {
              missing.push_back(subject + " " + condition_key(cond));
              continue;
            }
            sum += it->second;
            ++count;
          }
        }
        if (count > 0) subjectMeans.push_back(sum / count);
      }
      if (subjectMeans.empty()) continue;
      const MeanStd s = sample_stats(subjectMeans);
      table.rows.push_back({tap, ecc, s.mean, s.std, static_cast<int>(subjectMeans.size())});
    }
  }
  if (!missing.empty() && !allowMissing) {
    std::string msg = std::to_string(missing.size()) + " missing threshold cell(s):";
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) msg += "\n  " + missing[i];
    if (missing.size() > 10) msg += "\n  ...";
    throw ConfigError(msg);
  }
  return table;
}

std::vector<ThresholdRecord> read_threshold_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty threshold file");
  const auto header = split(line, ',');
  const std::vector<std::string> expected{"subjectId", "tap", "component", "direction", "eccentricityDeg",
                                          "thresholdValue"};
  if (header != expected) throw IoError(path.string() + ": unexpected header '" + line + "'");
  std::vector<ThresholdRecord> out;
  int lineNo = 1;
  while (std::getline(in, line)) {
    ++lineNo;
    if (line.empty() || line[0] == '#') continue;
    const auto f = split(line, ',');
    if (f.size() != 6) throw IoError(path.string() + ":" + std::to_string(lineNo) + ": expected 6 fields");
    try {
      ThresholdRecord r;
      r.subjectId = f[0];
      r.condition = {parse_tap(f[1]), std::stoi(f[2]), std::stoi(f[3]), std::stoi(f[4])};
      condition_index(r.condition);
      r.thresholdValue = std::stod(f[5]);
      out.push_back(r);
    } catch (const std::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineNo) + ": " + e.what());
    }
  }
  return out;
}

std::string threshold_csv(const std::vector<ThresholdRecord>& records) {
  std::string out = "subjectId,tap,component,direction,eccentricityDeg,thresholdValue\n";
  for (const auto& r : records) {
    out += r.subjectId + "," + std::string(to_string(r.condition.tap)) + "," + std::to_string(r.condition.component) +
           "," + std::to_string(r.condition.direction) + "," + std::to_string(r.condition.eccentricityDeg) + "," +
           format_double(r.thresholdValue) + "\n";
  }
  return out;
}

std::map<std::pair<Tap, int>, ProfileCell> boundary_profile(const Backbone& backbone,
                                                             const std::map<Tap, IcaModel>& models,
                                                             const std::vector<ImageTensor>& references,
                                                             const std::map<std::pair<Tap, int>, double>& thresholds,
                                                             const OptimConfig& optim) {
  if (references.empty()) throw ConfigError("boundary_profile needs at least one reference image");
  std::map<std::pair<Tap, int>, ProfileCell> out;
  for (const auto& [key, threshold] : thresholds) {
    const auto model = models.find(key.first);
    if (model == models.end()) throw ConfigError("no ICA model for tap " + std::string(to_string(key.first)));
    ProfileCell cell;
    cell.threshold = threshold;
    std::vector<double> rms, sim;
    for (std::size_t i = 0; i < references.size(); ++i) {
      const int c = static_cast<int>(i % 6);
      const SynthesisSpec spec{key.first, c / 2, c % 2 == 0 ? 1 : -1, threshold, std::to_string(i)};
      const auto r = synthesize(backbone, model->second, references[i], spec, optim);
      if (!r.converged) {
        ++cell.failures;
        continue;
      }
      rms.push_back(rms_contrast(difference_image(r.image, references[i])));
      sim.push_back(ssim(references[i], r.image));
    }
    if (cell.failures * 5 > static_cast<int>(references.size())) {
      throw Error("boundary profile aborted: " + std::to_string(cell.failures) + " of " +
                  std::to_string(references.size()) + " syntheses failed at " + std::string(to_string(key.first)) +
                  ", " + std::to_string(key.second) + " deg, t = " + format_double(threshold));
    }
    const MeanStd r = sample_stats(rms);
    const MeanStd s = sample_stats(sim);
    cell.meanRms = r.mean;
    cell.stdRms = r.std;
    cell.meanSsim = s.mean;
    cell.stdSsim = s.std;
    cell.samples = static_cast<int>(rms.size());
    out[key] = cell;
  }
  return out;
}

LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("linear_fit needs two or more paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw NumericError("linear_fit with constant x");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ssRes = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.slope * x[i] + f.intercept);
    ssRes += e * e;
  }
  f.r2 = syy == 0.0 ? (ssRes == 0.0 ? 1.0 : 0.0) : 1.0 - ssRes / syy;
  return f;
}

}  // namespace mame
