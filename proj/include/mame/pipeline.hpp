#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mame/adaptive.hpp"
#include "mame/analysis.hpp"
#include "mame/backbone.hpp"
#include "mame/ica.hpp"
#include "mame/observer.hpp"
#include "mame/session.hpp"
#include "mame/synthesis.hpp"

namespace mame {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kRunManifestSchema = "mame-run/1";

/// Declared input whose bytes differ from what its producing step recorded.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Operator configuration shared by every subcommand. See README for the schema.
struct PipelineConfig {
  BackboneConfig backbone = BackboneConfig::desk_default();
  /// Empty: `<outDir>/corpus/manifest.json`, written by `corpus-extract --synthetic`.
  std::filesystem::path corpusManifest;
  IcaFitConfig ica;
  StaircaseConfig staircase = StaircaseConfig::desk_default();
  ObserverModel observer;
  /// timeBudget 0 so simulated thresholds do not depend on machine speed.
  OptimConfig optim;
  double referencePercentile = 20.0;
  int syntheticImages = 200;
  std::filesystem::path outDir = "out";
  std::uint64_t seed = 1;

  /// capToRank on: the 200-image desk corpus has rank below 100 at the early tap.
  static PipelineConfig desk_default();
  void validate() const;
  std::filesystem::path corpus_manifest() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
/// Unknown keys are rejected. "backbone" may be an object or a path to a JSON file.
void from_json(const nlohmann::json& j, PipelineConfig& c);

/// Relative paths inside the file resolve against its directory.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
std::string config_hash(const PipelineConfig& c);

/// Written to `<outDir>/manifests/<command>.json` by every step.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string configHash;
  std::uint64_t seed = 0;
  std::string version = kVersion;
  nlohmann::json parameters = nlohmann::json::object();
  /// path -> sha256
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

/// Context of one subcommand invocation: config, argv and provenance bookkeeping.
class Step {
 public:
  Step(std::string command, PipelineConfig config, std::vector<std::string> argv = {});

  const PipelineConfig& config() const { return config_; }
  const std::filesystem::path& out() const { return config_.outDir; }
  nlohmann::json provenance() const;
  void parameter(const std::string& key, nlohmann::json value) { manifest_.parameters[key] = std::move(value); }

  /// Hashes `path` and checks it against the manifest of the step that produced it.
  void input(const std::filesystem::path& path);
  void output(const std::filesystem::path& path);
  /// Writes the run manifest; returns its path.
  std::filesystem::path finish();

 private:
  std::string key(const std::filesystem::path& path) const;

  PipelineConfig config_;
  RunManifest manifest_;
};

/// Manifests under `<outDir>/manifests`, keyed by command.
std::map<std::string, RunManifest> read_manifests(const std::filesystem::path& outDir);

/// Provenance chain of `file`: its producing manifest, then recursively the
/// producers of that step's inputs. External inputs appear with their hash only.
nlohmann::json provenance_chain(const std::filesystem::path& outDir, const std::filesystem::path& file);

struct CorpusExtractResult {
  std::filesystem::path manifest;
  std::map<Tap, std::filesystem::path> features;
  std::size_t images = 0;
};

/// Optionally writes the synthetic corpus, then extracts Gram features per tap.
CorpusExtractResult corpus_extract(Step& step, std::optional<int> synthetic);

/// Fits one model per tap from the extracted features.
std::map<Tap, IcaModel> ica_fit(Step& step);

struct CsvIcaResult {
  IcaModel model;
  Eigen::MatrixXd sources;  // n x c
};

/// ICA on a numeric CSV (one sample per row, optional header line). Writes
/// `<outDir>/models/csv.ica` and `<outDir>/csv_sources.csv`.
CsvIcaResult ica_fit_csv(Step& step, const std::filesystem::path& csv, std::optional<int> components);

Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path);

ReferenceSelection select_refs(Step& step);

/// Loads backbone, models and the selected reference images from the output dir.
std::shared_ptr<const ExperimentAssets> load_assets(const PipelineConfig& config, Step* step = nullptr);

struct SynthRequest {
  SynthesisSpec spec;
  std::string name = "synth";
};

SynthesisResult synth(Step& step, const SynthRequest& request);

struct SimulateResult {
  std::vector<ThresholdRecord> records;
  AggregateTable table;
  int convergedConditions = 0;
  int sessions = 0;
};

/// N full sessions against the simulated observer; session s uses seed
/// mix_seed(seed, s) and observer seed mix_seed(observer.seed ^ seed, s).
/// Writes thresholds.csv, aggregate.csv and aggregate.json under `<outDir>/simulate`.
SimulateResult simulate(Step& step, int sessions);

struct AnalyzeResult {
  AggregateTable table;
  /// Present when the input came with an expected table.
  std::optional<double> maxAbsDeviation;
};

/// Aggregates a threshold CSV; with `expected` (tap,eccentricityDeg,mean,std)
/// also reports the largest deviation. Writes under `<outDir>/analyze`.
AnalyzeResult analyze(Step& step, const std::filesystem::path& records,
                      const std::optional<std::filesystem::path>& expected, bool profile);

std::vector<AggregateRow> read_expected_table(const std::filesystem::path& path);

}  // namespace mame
