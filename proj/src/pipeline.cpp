#include "mame/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mame/corpus.hpp"
#include "mame/features.hpp"
#include "mame/hash.hpp"
#include "mame/rng.hpp"

namespace mame {

namespace fs = std::filesystem;
using nlohmann::json;

PipelineConfig PipelineConfig::desk_default() {
  PipelineConfig c;
  c.ica.capToRank = true;
  c.optim.timeBudget = 0.0;
  return c;
}

void PipelineConfig::validate() const {
  backbone.validate();
  staircase.validate();
  observer.validate();
  optim.validate();
  if (ica.nComponents < ica.selectCount) throw ConfigError("ica.nComponents must be >= ica.selectCount");
  if (ica.selectCount < 3) throw ConfigError("ica.selectCount must be >= 3 (three exploration axes per tap)");
  if (!(referencePercentile > 0.0 && referencePercentile <= 100.0)) {
    throw ConfigError("referencePercentile must lie in (0, 100]");
  }
  if (syntheticImages < 2) throw ConfigError("syntheticImages must be >= 2");
  if (outDir.empty()) throw ConfigError("outDir is empty");
}

fs::path PipelineConfig::corpus_manifest() const {
  return corpusManifest.empty() ? outDir / "corpus" / "manifest.json" : corpusManifest;
}

void to_json(json& j, const PipelineConfig& c) {
  j = {{"backbone", c.backbone},
       {"corpusManifest", c.corpusManifest.string()},
       {"ica", c.ica},
       {"staircase", c.staircase},
       {"observer", c.observer},
       {"optim", c.optim},
       {"referencePercentile", c.referencePercentile},
       {"syntheticImages", c.syntheticImages},
       {"outDir", c.outDir.string()},
       {"seed", c.seed}};
}

void from_json(const json& j, PipelineConfig& c) {
  static const std::set<std::string> known{"backbone", "corpusManifest",      "ica",             "staircase",
                                           "observer", "optim",               "referencePercentile",
                                           "outDir",   "syntheticImages",     "seed"};
  if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown pipeline config key \"" + k + "\"");
  }
  c = PipelineConfig::desk_default();
  if (j.contains("backbone")) {
    if (j["backbone"].is_string()) {
      c.backbone = json::parse(read_text(j["backbone"].get<std::string>())).get<BackboneConfig>();
    } else {
      c.backbone = j["backbone"].get<BackboneConfig>();
    }
  }
  if (j.contains("corpusManifest")) c.corpusManifest = j["corpusManifest"].get<std::string>();
  if (j.contains("ica")) {
    // Fields absent from the file keep the pipeline defaults (capToRank on).
    json merged = c.ica;
    merged.update(j["ica"]);
    c.ica = merged.get<IcaFitConfig>();
  }
  if (j.contains("staircase")) c.staircase = j["staircase"].get<StaircaseConfig>();
  if (j.contains("observer")) c.observer = j["observer"].get<ObserverModel>();
  if (j.contains("optim")) {
    json merged = c.optim;
    merged.update(j["optim"]);
    c.optim = merged.get<OptimConfig>();
  }
  c.referencePercentile = j.value("referencePercentile", c.referencePercentile);
  c.syntheticImages = j.value("syntheticImages", c.syntheticImages);
  if (j.contains("outDir")) c.outDir = j["outDir"].get<std::string>();
  c.seed = j.value("seed", c.seed);
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  auto resolve = [&](const char* key) {
    if (j.contains(key) && j[key].is_string()) {
      const fs::path p = j[key].get<std::string>();
      if (!p.empty() && p.is_relative()) j[key] = (base / p).string();
    }
  };
  resolve("backbone");
  resolve("corpusManifest");
  resolve("outDir");
  PipelineConfig c;
  try {
    c = j.get<PipelineConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

std::string config_hash(const PipelineConfig& c) {
  json j = c;
  j.erase("outDir");  // where results go does not change what they are
  return sha256_hex(j.dump());
}

void to_json(json& j, const RunManifest& m) {
  j = {{"schema", kRunManifestSchema}, {"command", m.command},       {"argv", m.argv},
       {"configHash", m.configHash},   {"seed", m.seed},             {"version", m.version},
       {"parameters", m.parameters},   {"inputs", m.inputs},         {"outputs", m.outputs}};
}

void from_json(const json& j, RunManifest& m) {
  if (j.value("schema", "") != kRunManifestSchema) throw LoadError("not a run manifest");
  m.command = j.at("command").get<std::string>();
  m.argv = j.at("argv").get<std::vector<std::string>>();
  m.configHash = j.at("configHash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.version = j.at("version").get<std::string>();
  m.parameters = j.value("parameters", json::object());
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
}

std::map<std::string, RunManifest> read_manifests(const fs::path& outDir) {
  std::map<std::string, RunManifest> out;
  const fs::path dir = outDir / "manifests";
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    RunManifest m = json::parse(read_text(e.path())).get<RunManifest>();
    out[m.command] = std::move(m);
  }
  return out;
}

Step::Step(std::string command, PipelineConfig config, std::vector<std::string> argv) : config_(std::move(config)) {
  config_.validate();
  manifest_.command = std::move(command);
  manifest_.argv = std::move(argv);
  manifest_.configHash = config_hash(config_);
  manifest_.seed = config_.seed;
  fs::create_directories(config_.outDir);
}

json Step::provenance() const {
  return {{"command", manifest_.command}, {"configHash", manifest_.configHash}, {"seed", manifest_.seed},
          {"version", manifest_.version}};
}

std::string Step::key(const fs::path& path) const {
  const fs::path abs = fs::weakly_canonical(path);
  const fs::path root = fs::weakly_canonical(config_.outDir);
  const fs::path rel = abs.lexically_relative(root);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return abs.generic_string();
}

void Step::input(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing input " + path.string());
  const std::string k = key(path);
  const std::string h = sha256_file(path);
  for (const auto& [cmd, m] : read_manifests(config_.outDir)) {
    if (cmd == manifest_.command) continue;
    const auto it = m.outputs.find(k);
    if (it != m.outputs.end() && it->second != h) {
      throw IntegrityError("hash mismatch for " + k + ": " + cmd + " recorded " + it->second.substr(0, 12) +
                           ", found " + h.substr(0, 12));
    }
  }
  manifest_.inputs[k] = h;
}

void Step::output(const fs::path& path) { manifest_.outputs[key(path)] = sha256_file(path); }

fs::path Step::finish() {
  const fs::path p = config_.outDir / "manifests" / (manifest_.command + ".json");
  fs::create_directories(p.parent_path());
  write_text_atomic(p, json(manifest_).dump(2) + "\n");
  return p;
}

json provenance_chain(const fs::path& outDir, const fs::path& file) {
  const auto manifests = read_manifests(outDir);
  const fs::path root = fs::weakly_canonical(outDir);
  auto key_of = [&](const fs::path& p) {
    const fs::path abs = fs::weakly_canonical(p);
    const fs::path rel = abs.lexically_relative(root);
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return abs.generic_string();
  };
  json chain = json::array();
  std::set<std::string> seen;
  std::vector<std::string> pending{key_of(file)};
  while (!pending.empty()) {
    const std::string k = pending.back();
    pending.pop_back();
    if (!seen.insert(k).second) continue;
    const RunManifest* producer = nullptr;
    for (const auto& [cmd, m] : manifests) {
      if (m.outputs.count(k)) producer = &m;
    }
    const fs::path onDisk = fs::path(k).is_absolute() ? fs::path(k) : outDir / k;
    json node = {{"path", k}};
    if (fs::exists(onDisk)) node["sha256"] = sha256_file(onDisk);
    if (!producer) {
      node["producer"] = nullptr;
      chain.push_back(node);
      continue;
    }
    node["producer"] = json(*producer);
    node["recordedSha256"] = producer->outputs.at(k);
    chain.push_back(node);
    for (const auto& [in, h] : producer->inputs) pending.push_back(in);
  }
  return chain;
}

namespace {

fs::path feature_path(const fs::path& out, Tap tap) { return out / "features" / (std::string(to_string(tap)) + ".fm"); }
fs::path model_path(const fs::path& out, Tap tap) { return out / "models" / (std::string(to_string(tap)) + ".ica"); }
fs::path references_path(const fs::path& out) { return out / "references.json"; }

}  // namespace

CorpusExtractResult corpus_extract(Step& step, std::optional<int> synthetic) {
  const PipelineConfig& cfg = step.config();
  CorpusExtractResult r;
  if (synthetic) {
    if (*synthetic < 2) throw ConfigError("--synthetic needs at least 2 images");
    const auto images = synthetic_corpus(*synthetic, cfg.backbone.input, cfg.seed);
    r.manifest = write_corpus(cfg.outDir / "corpus", images);
    step.parameter("synthetic", *synthetic);
    for (const auto& img : images) step.output(cfg.outDir / "corpus" / (img.id + ".png"));
    step.output(r.manifest);
  } else {
    r.manifest = cfg.corpus_manifest();
    if (!fs::exists(r.manifest)) {
      throw ConfigError("corpus manifest " + r.manifest.string() + " not found (use --synthetic N to generate one)");
    }
  }
  const auto entries = read_corpus_manifest(r.manifest);
  if (!synthetic) {
    step.input(r.manifest);
    for (const auto& e : entries) step.input(e.path);
  }
  const auto images = load_corpus(entries);
  r.images = images.size();
  const Backbone backbone(cfg.backbone);
  const auto features = extract_corpus(backbone, images, {kAllTaps.begin(), kAllTaps.end()});
  for (const auto& [tap, fm] : features) {
    const fs::path p = feature_path(cfg.outDir, tap);
    fs::create_directories(p.parent_path());
    save_feature_matrix(p, fm, {{"provenance", step.provenance()}, {"corpusManifest", r.manifest.string()}});
    step.output(p);
    step.output(p.string() + ".json");
    r.features[tap] = p;
  }
  return r;
}

std::map<Tap, IcaModel> ica_fit(Step& step) {
  const PipelineConfig& cfg = step.config();
  std::map<Tap, IcaModel> models;
  for (Tap tap : kAllTaps) {
    const fs::path fp = feature_path(cfg.outDir, tap);
    if (!fs::exists(fp)) throw ConfigError("features for tap " + std::string(to_string(tap)) + " missing; run corpus-extract first");
    step.input(fp);
    step.input(fp.string() + ".json");
    const FeatureMatrix fm = load_feature_matrix(fp);
    IcaModel m = fit_ica(fm, cfg.ica);
    const fs::path mp = model_path(cfg.outDir, tap);
    fs::create_directories(mp.parent_path());
    save_ica_model(mp, m, {{"provenance", step.provenance()}, {"imageIds", fm.imageIds}});
    step.output(mp);
    step.output(mp.string() + ".json");
    models.emplace(tap, std::move(m));
  }
  return models;
}

Eigen::MatrixXd read_matrix_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::vector<std::vector<double>> rows;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ls(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ls, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (rows.empty() && lineNo == 1) continue;  // header
      throw IoError(path.string() + ":" + std::to_string(lineNo) + ": non-numeric cell");
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw IoError(path.string() + ":" + std::to_string(lineNo) + ": expected " +
                    std::to_string(rows.front().size()) + " columns");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError(path.string() + ": no data rows");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

CsvIcaResult ica_fit_csv(Step& step, const fs::path& csv, std::optional<int> components) {
  step.input(csv);
  FeatureMatrix fm;
  fm.values = read_matrix_csv(csv);
  for (Eigen::Index i = 0; i < fm.rows(); ++i) fm.imageIds.push_back("row" + std::to_string(i));
  IcaFitConfig ic = step.config().ica;
  ic.nComponents = components.value_or(static_cast<int>(fm.cols()));
  ic.selectCount = std::min(ic.selectCount, ic.nComponents);
  step.parameter("csv", csv.string());
  step.parameter("components", ic.nComponents);
  CsvIcaResult r{fit_ica(fm, ic), {}};
  r.sources = transform_rows(r.model, fm.values);
  const fs::path mp = step.out() / "models" / "csv.ica";
  fs::create_directories(mp.parent_path());
  save_ica_model(mp, r.model, {{"provenance", step.provenance()}});
  step.output(mp);
  step.output(mp.string() + ".json");
  std::string text;
  char buf[40];
  for (Eigen::Index i = 0; i < r.sources.rows(); ++i) {
    for (Eigen::Index c = 0; c < r.sources.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", r.sources(i, c));
      text += (c ? "," : "") + std::string(buf);
    }
    text += "\n";
  }
  write_text_atomic(step.out() / "csv_sources.csv", text);
  step.output(step.out() / "csv_sources.csv");
  return r;
}

ReferenceSelection select_refs(Step& step) {
  const PipelineConfig& cfg = step.config();
  std::map<Tap, IcaModel> models;
  std::map<Tap, FeatureMatrix> features;
  for (Tap tap : kAllTaps) {
    const fs::path mp = model_path(cfg.outDir, tap);
    const fs::path fp = feature_path(cfg.outDir, tap);
    if (!fs::exists(mp)) throw ConfigError("model for tap " + std::string(to_string(tap)) + " missing; run ica-fit first");
    for (const fs::path& p : {mp, fs::path(mp.string() + ".json"), fp, fs::path(fp.string() + ".json")}) step.input(p);
    models.emplace(tap, load_ica_model(mp));
    features.emplace(tap, load_feature_matrix(fp));
  }
  ReferenceSelection sel = select_reference_images(models, features, cfg.referencePercentile);
  json thresholds = json::object();
  for (const auto& [tap, t] : sel.threshold) thresholds[std::string(to_string(tap))] = t;
  const json out = {{"provenance", step.provenance()},
                    {"percentile", sel.percentile},
                    {"thresholds", thresholds},
                    {"corpusImages", sel.candidateIds.size()},
                    {"imageIds", sel.imageIds},
                    {"corpusManifest", fs::weakly_canonical(cfg.corpus_manifest()).string()}};
  write_text_atomic(references_path(cfg.outDir), out.dump(2) + "\n");
  step.output(references_path(cfg.outDir));
  return sel;
}

std::shared_ptr<const ExperimentAssets> load_assets(const PipelineConfig& cfg, Step* step) {
  auto use = [&](const fs::path& p) {
    if (!fs::exists(p)) throw ConfigError("missing artifact " + p.string() + "; run the earlier pipeline steps first");
    if (step) step->input(p);
  };
  std::map<Tap, IcaModel> models;
  for (Tap tap : kAllTaps) {
    const fs::path mp = model_path(cfg.outDir, tap);
    use(mp);
    use(mp.string() + ".json");
    models.emplace(tap, load_ica_model(mp));
  }
  const fs::path rp = references_path(cfg.outDir);
  use(rp);
  const json refs = json::parse(read_text(rp));
  const auto ids = refs.at("imageIds").get<std::vector<std::string>>();
  const std::set<std::string> wanted(ids.begin(), ids.end());
  std::vector<CorpusEntry> entries;
  for (const auto& e : read_corpus_manifest(cfg.corpus_manifest())) {
    if (wanted.count(e.id)) entries.push_back(e);
  }
  if (entries.size() != wanted.size()) throw ConfigError("corpus manifest lacks some selected reference images");
  for (const auto& e : entries) use(e.path);
  std::map<std::string, ImageTensor> images;
  for (auto& li : load_corpus(entries)) images.emplace(li.id, std::move(li.image));
  return std::make_shared<const ExperimentAssets>(Backbone(cfg.backbone), std::move(models), std::move(images),
                                                  cfg.staircase, cfg.optim);
}

SynthesisResult synth(Step& step, const SynthRequest& req) {
  auto assets = load_assets(step.config(), &step);
  const auto ref = assets->references.find(req.spec.referenceImageId);
  if (ref == assets->references.end()) {
    throw ConfigError("reference \"" + req.spec.referenceImageId + "\" is not among the selected references");
  }
  const IcaModel& model = assets->models.at(req.spec.tap);
  const SynthesisResult r = synthesize(assets->backbone, model, ref->second, req.spec, step.config().optim);
  step.parameter("spec", {{"tap", std::string(to_string(req.spec.tap))},
                          {"component", req.spec.component},
                          {"direction", req.spec.direction},
                          {"target", req.spec.target},
                          {"referenceImageId", req.spec.referenceImageId}});
  const fs::path png = step.out() / "synth" / (req.name + ".png");
  fs::create_directories(png.parent_path());
  write_png(png, r.image);
  json record = summary_json(r, model.selected);
  record["provenance"] = step.provenance();
  record["spec"] = {{"tap", std::string(to_string(req.spec.tap))},
                    {"component", req.spec.component},
                    {"direction", req.spec.direction},
                    {"target", req.spec.target},
                    {"referenceImageId", req.spec.referenceImageId}};
  const fs::path js = step.out() / "synth" / (req.name + ".json");
  write_text_atomic(js, record.dump(2) + "\n");
  step.output(png);
  step.output(js);
  return r;
}

SimulateResult simulate(Step& step, int sessions) {
  if (sessions < 1) throw ConfigError("--sessions must be >= 1");
  const PipelineConfig& cfg = step.config();
  auto assets = load_assets(cfg, &step);
  StimulusCache cache(assets, cfg.outDir / "stimuli", 1);
  SimulateResult out;
  out.sessions = sessions;
  json perSession = json::array();
  for (int s = 0; s < sessions; ++s) {
    const std::uint64_t seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(s));
    ObserverModel obs = cfg.observer;
    obs.seed = mix_seed(cfg.observer.seed ^ cfg.seed, static_cast<std::uint64_t>(s));
    char subject[16];
    std::snprintf(subject, sizeof subject, "sim%02d", s + 1);
    const SimulationResult r = simulate_session(cache, seed, subject, obs);
    out.convergedConditions += static_cast<int>(r.thresholds.size());
    out.records.insert(out.records.end(), r.thresholds.begin(), r.thresholds.end());
    perSession.push_back({{"subjectId", subject},
                          {"sessionSeed", seed},
                          {"observerSeed", obs.seed},
                          {"convergedConditions", r.thresholds.size()}});
  }
  out.table = aggregate_thresholds(out.records, true);
  step.parameter("sessions", sessions);
  const fs::path dir = cfg.outDir / "simulate";
  fs::create_directories(dir);
  write_text_atomic(dir / "thresholds.csv", threshold_csv(out.records));
  write_text_atomic(dir / "aggregate.csv", out.table.to_csv());
  json agg = out.table.to_json();
  write_text_atomic(dir / "aggregate.json", json({{"provenance", step.provenance()}, {"table", agg}}).dump(2) + "\n");
  write_text_atomic(dir / "sessions.json",
                    json({{"provenance", step.provenance()},
                          {"sessions", perSession},
                          {"convergedConditions", out.convergedConditions},
                          {"possibleConditions", sessions * kConditionCount}})
                            .dump(2) +
                        "\n");
  for (const char* f : {"thresholds.csv", "aggregate.csv", "aggregate.json", "sessions.json"}) step.output(dir / f);
  return out;
}

std::vector<AggregateRow> read_expected_table(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  if (line != "tap,eccentricityDeg,mean,std") throw IoError(path.string() + ": unexpected header '" + line + "'");
  std::vector<AggregateRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string tap, ecc, mean, sd;
    if (!std::getline(ls, tap, ',') || !std::getline(ls, ecc, ',') || !std::getline(ls, mean, ',') ||
        !std::getline(ls, sd, ',')) {
      throw IoError(path.string() + ": malformed row '" + line + "'");
    }
    rows.push_back({parse_tap(tap), std::stoi(ecc), std::stod(mean), std::stod(sd), 0});
  }
  return rows;
}

AnalyzeResult analyze(Step& step, const fs::path& records, const std::optional<fs::path>& expected, bool profile) {
  step.input(records);
  AnalyzeResult out;
  out.table = aggregate_thresholds(read_threshold_csv(records), false);
  const fs::path dir = step.out() / "analyze";
  fs::create_directories(dir);
  json report = {{"provenance", step.provenance()}, {"records", records.string()}, {"table", out.table.to_json()}};
  if (expected) {
    step.input(*expected);
    double worst = 0.0;
    json cmp = json::array();
    for (const auto& e : read_expected_table(*expected)) {
      const AggregateRow& got = out.table.at(e.tap, e.eccentricityDeg);
      const double dm = std::abs(got.mean - e.mean);
      const double ds = std::abs(got.std - e.std);
      worst = std::max({worst, dm, ds});
      cmp.push_back({{"tap", std::string(to_string(e.tap))},
                     {"eccentricityDeg", e.eccentricityDeg},
                     {"expectedMean", e.mean},
                     {"expectedStd", e.std},
                     {"mean", got.mean},
                     {"std", got.std}});
    }
    out.maxAbsDeviation = worst;
    report["comparison"] = {{"rows", cmp}, {"maxAbsDeviation", worst}};
  }
  if (profile) {
    auto assets = load_assets(step.config(), &step);
    std::map<std::pair<Tap, int>, double> thresholds;
    for (const auto& row : out.table.rows) thresholds[{row.tap, row.eccentricityDeg}] = row.mean;
    std::vector<ImageTensor> refs;
    for (const auto& [id, img] : assets->references) refs.push_back(img);
    const auto cells = boundary_profile(assets->backbone, assets->models, refs, thresholds, step.config().optim);
    std::string csv = "tap,eccentricityDeg,threshold,meanRms,stdRms,meanSsim,stdSsim,samples,failures\n";
    char buf[256];
    for (const auto& [k, c] : cells) {
      std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d\n", to_string(k.first).data(), k.second,
                    c.threshold, c.meanRms, c.stdRms, c.meanSsim, c.stdSsim, c.samples, c.failures);
      csv += buf;
    }
    write_text_atomic(dir / "profile.csv", csv);
    step.output(dir / "profile.csv");
  }
  write_text_atomic(dir / "aggregate.csv", out.table.to_csv());
  write_text_atomic(dir / "report.json", report.dump(2) + "\n");
  step.output(dir / "aggregate.csv");
  step.output(dir / "report.json");
  return out;
}

}  // namespace mame
