// Operator entry point: corpus-extract, ica-fit, select-refs, synth, simulate,
// analyze, serve, report. Exit status 0 on success, 2 on validation errors,
// 1 on runtime failures.

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <thread>

#include "mame/pipeline.hpp"
#include "mame/server.hpp"

#ifndef MAME_FIXTURE_ROOT
#define MAME_FIXTURE_ROOT "tests/data/v1"
#endif

namespace fs = std::filesystem;
using namespace mame;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "Pipeline config JSON (defaults to the desk configuration)")
        ->check(CLI::ExistingFile);
    app->add_option("--out", out, "Output directory (overrides outDir)");
    app->add_option("--seed", seed, "Seed (overrides the config seed)");
  }

  PipelineConfig load() const {
    PipelineConfig c = config.empty() ? PipelineConfig::desk_default() : load_pipeline_config(config);
    if (!out.empty()) c.outDir = out;
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
};

fs::path fixture_root() {
  if (const char* env = std::getenv("MAME_FIXTURE_ROOT"); env && *env) return env;
  return MAME_FIXTURE_ROOT;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Metamer exploration toolkit: features, ICA axes, stimulus synthesis, staircases, analysis, serving"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  Common common;

  auto* extract = app.add_subcommand("corpus-extract", "Extract Gram features per tap from a corpus");
  common.attach(extract);
  std::optional<int> synthetic;
  std::string manifest;
  extract->add_option("--synthetic", synthetic, "Generate N seeded synthetic textures first");
  extract->add_option("--manifest", manifest, "Corpus manifest JSON [{id, path}] (overrides corpusManifest)");

  auto* fit = app.add_subcommand("ica-fit", "Fit FastICA per tap (or on a numeric CSV)");
  common.attach(fit);
  std::string csv;
  std::optional<int> components;
  fit->add_option("--csv", csv, "Fit on a CSV matrix (one sample per row) instead of corpus features")
      ->check(CLI::ExistingFile);
  fit->add_option("--components", components, "Component count (overrides ica.nComponents)")->check(CLI::PositiveNumber);

  auto* refs = app.add_subcommand("select-refs", "Select reference images near the ICA origin");
  common.attach(refs);
  std::optional<double> percentile;
  refs->add_option("--percentile", percentile, "Norm percentile per tap (default 20)")->check(CLI::Range(0.0, 100.0));

  auto* syn = app.add_subcommand("synth", "Synthesize one perturbed image");
  common.attach(syn);
  std::string tapName = "mid";
  int component = 0;
  int direction = 1;
  double target = 0.0;
  std::string reference;
  std::string name = "synth";
  syn->add_option("--tap", tapName, "early | mid | late")->check(CLI::IsMember({"early", "mid", "late"}));
  syn->add_option("--component", component, "Selected component 0..2")->check(CLI::Range(0, 2));
  syn->add_option("--direction", direction, "+1 or -1")->check(CLI::IsMember({1, -1}));
  syn->add_option("--target", target, "ICA target magnitude t")->required()->check(CLI::NonNegativeNumber);
  syn->add_option("--reference", reference, "Reference image id (default: first selected reference)");
  syn->add_option("--name", name, "Output file stem under <out>/synth");

  auto* sim = app.add_subcommand("simulate", "Run N full sessions against the simulated observer");
  common.attach(sim);
  int sessions = 8;
  sim->add_option("--sessions", sessions, "Number of sessions")->check(CLI::PositiveNumber);

  auto* an = app.add_subcommand("analyze", "Aggregate thresholds into the tap x eccentricity table");
  common.attach(an);
  std::string records;
  std::string fixtures;
  std::string expected;
  bool profile = false;
  double tolerance = 1e-3;
  auto* recOpt = an->add_option("--records", records, "Threshold CSV")->check(CLI::ExistingFile);
  an->add_option("--fixtures", fixtures, "Named golden fixture (e.g. paper-table1)")->excludes(recOpt);
  an->add_option("--expected", expected, "Expected table CSV to compare against")->check(CLI::ExistingFile);
  an->add_flag("--profile", profile, "Also report RMS contrast and SSIM at the mean thresholds");
  an->add_option("--tolerance", tolerance, "Allowed deviation from the expected table");

  auto* srv = app.add_subcommand("serve", "Run the experiment server");
  common.attach(srv);
  std::string serverConfig;
  std::optional<int> port;
  std::string dataDir;
  srv->add_option("--server-config", serverConfig, "Server config JSON")->check(CLI::ExistingFile);
  srv->add_option("--port", port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  srv->add_option("--data-dir", dataDir, "Data directory (MAME_DATA_DIR also overrides)");

  auto* rep = app.add_subcommand("report", "Print the provenance chain of an output file");
  common.attach(rep);
  std::string file;
  rep->add_option("file", file, "Artifact path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (extract->parsed()) {
      PipelineConfig c = common.load();
      if (!manifest.empty()) c.corpusManifest = manifest;
      Step step("corpus-extract", c, args);
      const auto r = corpus_extract(step, synthetic);
      step.finish();
      std::cout << "extracted " << r.images << " images from " << r.manifest.string() << "\n";
      for (const auto& [tap, p] : r.features) std::cout << "  " << to_string(tap) << ": " << p.string() << "\n";
    } else if (fit->parsed()) {
      PipelineConfig c = common.load();
      if (components && csv.empty()) c.ica.nComponents = *components;
      Step step("ica-fit", c, args);
      if (!csv.empty()) {
        const auto r = ica_fit_csv(step, csv, components);
        std::cout << "fitted " << r.model.components() << " components on " << r.sources.rows() << " rows"
                  << (r.model.converged ? "" : " (not converged)") << "\n";
      } else {
        for (const auto& [tap, m] : ica_fit(step)) {
          std::cout << to_string(tap) << ": " << m.components() << " components, selected";
          for (int s : m.selected) std::cout << " " << s;
          std::cout << (m.converged ? "" : " (not converged)") << "\n";
        }
      }
      step.finish();
    } else if (refs->parsed()) {
      PipelineConfig c = common.load();
      if (percentile) c.referencePercentile = *percentile;
      Step step("select-refs", c, args);
      const auto sel = select_refs(step);
      step.finish();
      std::cout << "selected " << sel.imageIds.size() << " of " << sel.candidateIds.size() << " images\n";
      for (const auto& [tap, t] : sel.threshold) std::cout << "  " << to_string(tap) << " threshold " << t << "\n";
    } else if (syn->parsed()) {
      Step step("synth", common.load(), args);
      SynthRequest req;
      req.spec = {parse_tap(tapName), component, direction, target, reference};
      req.name = name;
      if (req.spec.referenceImageId.empty()) {
        req.spec.referenceImageId = load_assets(step.config())->reference_ids().front();
      }
      const auto r = synth(step, req);
      step.finish();
      std::cout << (r.converged ? "converged" : "not converged") << " loss " << r.finalLoss << " in " << r.elapsed
                << " s -> " << (step.out() / "synth" / (name + ".png")).string() << "\n";
    } else if (sim->parsed()) {
      Step step("simulate", common.load(), args);
      const auto r = simulate(step, sessions);
      step.finish();
      std::cout << r.sessions << " sessions, " << r.convergedConditions << "/" << r.sessions * kConditionCount
                << " conditions converged\n"
                << r.table.to_csv();
    } else if (an->parsed()) {
      PipelineConfig c = common.load();
      fs::path recordsPath = records;
      std::optional<fs::path> expectedPath;
      if (!expected.empty()) expectedPath = expected;
      if (!fixtures.empty()) {
        const fs::path dir = fixture_root() / fixtures;
        if (!fs::exists(dir / "records.csv")) throw ConfigError("unknown fixture \"" + fixtures + "\" under " + fixture_root().string());
        recordsPath = dir / "records.csv";
        if (!expectedPath && fs::exists(dir / "expected.csv")) expectedPath = dir / "expected.csv";
      }
      if (recordsPath.empty()) throw ConfigError("analyze needs --records or --fixtures");
      Step step("analyze", c, args);
      const auto r = analyze(step, recordsPath, expectedPath, profile);
      step.finish();
      std::cout << r.table.to_csv();
      if (r.maxAbsDeviation) {
        const bool ok = *r.maxAbsDeviation <= tolerance;
        std::cout << "max deviation from expected " << *r.maxAbsDeviation << (ok ? " (match)" : " (MISMATCH)") << "\n";
        if (!ok) return 1;
      }
    } else if (srv->parsed()) {
      ServerConfig sc;
      if (!serverConfig.empty()) sc = load_server_config(serverConfig);
      apply_environment(sc);
      if (!dataDir.empty()) sc.dataDir = dataDir;
      if (port) sc.port = *port;
      if (sc.configs.empty() || !common.config.empty()) {
        if (common.config.empty()) throw ConfigError("serve needs --config or a server config with configs");
        sc.configs["default"] = common.config;
      }
      std::map<std::string, std::shared_ptr<const ExperimentAssets>> assets;
      for (const auto& [ref, path] : sc.configs) {
        PipelineConfig pc = load_pipeline_config(path);
        if (!common.out.empty() && ref == "default") pc.outDir = common.out;
        assets[ref] = load_assets(pc);
      }
      Server server(sc, std::move(assets));
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const int bound = server.start();
      std::cout << "listening on " << sc.host << ":" << bound << std::endl;
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
    } else if (rep->parsed()) {
      const PipelineConfig c = common.load();
      std::cout << provenance_chain(c.outDir, file).dump(2) << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
