#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mame/analysis.hpp"
#include "mame/error.hpp"
#include "mame/rng.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace mame;

namespace {

GrayImage gray_random(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  GrayImage g{h, w, std::vector<double>(static_cast<std::size_t>(h * w))};
  for (double& v : g.values) v = rng.uniform();
  return g;
}

std::vector<ThresholdRecord> full_subject(const std::string& id, double base) {
  std::vector<ThresholdRecord> out;
  for (const auto& c : all_conditions()) {
    out.push_back({id, c, base + tap_index(c.tap) * 10 + c.eccentricityDeg + 0.1 * c.component * c.direction});
  }
  return out;
}

}  // namespace

TEST_CASE("rms contrast") {
  CHECK(rms_contrast(std::vector<double>(25, 0.3)) == 0.0);
  std::vector<double> checker;
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) checker.push_back((x + y) % 2);
  }
  CHECK(rms_contrast(checker) == 0.5);
  const GrayImage g = gray_random(16, 16, 4);
  CHECK(std::abs(rms_contrast(g) - oracle::rms_contrast(g.values)) < 1e-12);
  std::vector<double> scaled;
  for (double v : g.values) scaled.push_back(-2.5 * v + 7.0);
  CHECK(rms_contrast(scaled) == doctest::Approx(2.5 * rms_contrast(g)).epsilon(1e-12));
  CHECK_THROWS_AS(rms_contrast(std::vector<double>{}), DimensionError);
}

TEST_CASE("grayscale and difference images") {
  const ImageTensor ref = fixture::random_image({8, 8, 3}, 9);
  for (double v : difference_image(ref, ref).values) CHECK(v == 0.0);
  const auto white = ImageTensor::filled({4, 4, 3}, 1.0);
  const auto black = ImageTensor::filled({4, 4, 3}, 0.0);
  for (double v : difference_image(white, black).values) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
  const ImageTensor other = fixture::random_image({8, 8, 3}, 10);
  const GrayImage d1 = difference_image(other, ref);
  const GrayImage d2 = difference_image(ref, other);
  for (std::size_t i = 0; i < d1.values.size(); ++i) CHECK(d1.values[i] == -d2.values[i]);
  CHECK(rms_contrast(d1) == doctest::Approx(rms_contrast(d2)).epsilon(1e-15));
  const GrayImage g = to_grayscale(ref);
  CHECK(g.values[5] == doctest::Approx(0.2126 * ref.at(0, 5, 0) + 0.7152 * ref.at(0, 5, 1) + 0.0722 * ref.at(0, 5, 2)));
  CHECK_THROWS_AS(difference_image(ref, white), DimensionError);
}

TEST_CASE("ssim basics") {
  const GrayImage a = gray_random(16, 16, 1);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-14));
  const GrayImage b = gray_random(16, 16, 2);
  CHECK(std::abs(ssim(a, b) - ssim(b, a)) < 1e-12);
  CHECK(ssim_map(a, b).size() == 36);
  CHECK_THROWS_AS(ssim(gray_random(10, 16, 1), gray_random(10, 16, 2)), DimensionError);
  CHECK_THROWS_AS(ssim(a, gray_random(16, 17, 2)), DimensionError);
}

TEST_CASE("ssim matches a scalar brute-force derivation") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const GrayImage a = gray_random(16, 16, 100 + seed);
    GrayImage b = a;
    Rng rng(seed);
    for (double& v : b.values) v = std::clamp(v + 0.2 * rng.normal(), 0.0, 1.0);
    const auto fast = ssim_map(a, b);
    const auto slow = oracle::ssim_windows(a.values, b.values, 16, 16, 11, 1.5, 0.01, 0.03, 1.0);
    REQUIRE(fast.size() == slow.size());
    for (std::size_t i = 0; i < fast.size(); ++i) CHECK(std::abs(fast[i] - slow[i]) < 1e-10);
  }
}

TEST_CASE("ssim decreases with noise amplitude") {
  const GrayImage a = gray_random(32, 32, 7);
  double prev = 1.0 + 1e-12;
  for (double amp : {0.02, 0.05, 0.1, 0.2, 0.4}) {
    GrayImage b = a;
    Rng rng(8);
    for (double& v : b.values) v += amp * rng.normal();
    const double s = ssim(a, b);
    CHECK(s < prev);
    prev = s;
  }
}

TEST_CASE("aggregation matches hand-computed means") {
  std::vector<ThresholdRecord> records;
  std::vector<double> bases{1.0, 2.5, 4.0, 0.5, 3.0, 2.0, 1.5, 6.0};
  for (std::size_t s = 0; s < bases.size(); ++s) {
    const auto r = full_subject("s" + std::to_string(s), bases[s]);
    records.insert(records.end(), r.begin(), r.end());
  }
  const AggregateTable table = aggregate_thresholds(records);
  REQUIRE(table.rows.size() == 9);
  // The component x direction offsets cancel, so subject means are base + 10 tap + ecc.
  double mb = 0.0;
  for (double b : bases) mb += b;
  mb /= 8.0;
  double ss = 0.0;
  for (double b : bases) ss += (b - mb) * (b - mb);
  const double sd = std::sqrt(ss / 7.0);
  for (const auto& row : table.rows) {
    CHECK(std::abs(row.mean - (mb + 10.0 * tap_index(row.tap) + row.eccentricityDeg)) < 1e-10);
    CHECK(std::abs(row.std - sd) < 1e-10);
    CHECK(row.subjects == 8);
  }

  std::vector<ThresholdRecord> shuffled = records;
  Rng rng(1);
  rng.shuffle(std::span<ThresholdRecord>(shuffled));
  const AggregateTable again = aggregate_thresholds(shuffled);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(again.rows[i].mean == table.rows[i].mean);
    CHECK(again.rows[i].std == table.rows[i].std);
  }
}

TEST_CASE("identical subjects give zero spread") {
  std::vector<ThresholdRecord> records = full_subject("a", 3.0);
  const auto b = full_subject("b", 3.0);
  records.insert(records.end(), b.begin(), b.end());
  const AggregateTable t = aggregate_thresholds(records);
  for (const auto& row : t.rows) CHECK(row.std == 0.0);
  CHECK(t.at(Tap::late, 12).mean == doctest::Approx(3.0 + 20.0 + 12.0).epsilon(1e-14));
}

TEST_CASE("missing and duplicate cells") {
  auto records = full_subject("a", 1.0);
  records.pop_back();
  CHECK_THROWS_AS(aggregate_thresholds(records), ConfigError);
  const AggregateTable partial = aggregate_thresholds(records, true);
  CHECK(partial.rows.size() == 9);
  records.push_back(records.front());
  CHECK_THROWS_AS(aggregate_thresholds(records, true), ConfigError);
  CHECK_THROWS_AS(aggregate_thresholds({}), ConfigError);
}

TEST_CASE("threshold CSV round trip") {
  const auto records = full_subject("subj-1", 0.123456789);
  const auto dir = fixture::scratch_dir("csv");
  write_text_atomic(dir / "t.csv", threshold_csv(records));
  const auto back = read_threshold_csv(dir / "t.csv");
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].thresholdValue == records[i].thresholdValue);
    CHECK(back[i].condition == records[i].condition);
  }
  write_text_atomic(dir / "bad.csv", "subjectId,tap\n");
  CHECK_THROWS_AS(read_threshold_csv(dir / "bad.csv"), IoError);
}

TEST_CASE("linear fit") {
  const std::vector<double> x{0, 1, 2, 3};
  const std::vector<double> y{1, 3, 5, 7};
  const LinearFit f = linear_fit(x, y);
  CHECK(f.slope == doctest::Approx(2.0));
  CHECK(f.intercept == doctest::Approx(1.0));
  CHECK(f.r2 == doctest::Approx(1.0));
}

TEST_CASE("boundary profile") {
  const auto w = fixture::small_world();
  std::vector<ImageTensor> refs;
  for (int i = 0; i < 6; ++i) refs.push_back(w.images[static_cast<std::size_t>(i)].image);
  OptimConfig o;
  o.timeBudget = 0.0;
  const std::map<std::pair<Tap, int>, double> zero{{{Tap::early, 4}, 0.0}, {{Tap::late, 12}, 0.0}};
  const auto z = boundary_profile(w.backbone, w.models, refs, zero, o);
  for (const auto& [key, cell] : z) {
    CHECK(cell.meanRms == 0.0);
    CHECK(cell.meanSsim == doctest::Approx(1.0).epsilon(1e-14));
  }
  const std::map<std::pair<Tap, int>, double> some{{{Tap::mid, 8}, 0.7}};
  const auto a = boundary_profile(w.backbone, w.models, refs, some, o);
  const auto b = boundary_profile(w.backbone, w.models, refs, some, o);
  CHECK(a.at({Tap::mid, 8}).meanRms == b.at({Tap::mid, 8}).meanRms);
  CHECK(a.at({Tap::mid, 8}).stdSsim == b.at({Tap::mid, 8}).stdSsim);
  CHECK(a.at({Tap::mid, 8}).meanRms > 0.0);

  OptimConfig starved = o;
  starved.iterations = 1;
  CHECK_THROWS_AS(boundary_profile(w.backbone, w.models, refs, some, starved), Error);
}
