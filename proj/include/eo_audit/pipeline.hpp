#pragma once

#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "eo_audit/anomaly_detector.hpp"
#include "eo_audit/common.hpp"
#include "eo_audit/csv.hpp"
#include "eo_audit/explanation.hpp"
#include "eo_audit/hash.hpp"
#include "eo_audit/llm_gateway.hpp"
#include "eo_audit/mock_llm.hpp"
#include "eo_audit/paired_analysis.hpp"
#include "eo_audit/prompt_engine.hpp"
#include "eo_audit/report.hpp"
#include "eo_audit/rubric_judging.hpp"
#include "eo_audit/scenario_builder.hpp"
#include "eo_audit/sensing_ingest.hpp"

namespace eo::pipeline {

// ---------------------------------------------------------------------------
// Configuration

struct DatasetSource {
  std::string profile_ref;  // as written in the config
  std::string data_ref;
  fs::path profile_path;  // resolved
  fs::path data_path;
};

struct AuditConfig {
  std::uint64_t seed = 42;
  std::vector<DatasetSource> datasets;
  detect::DetectionParams detection;
  std::size_t per_type_cap = 100;
  int lookback_days = 3;
  std::vector<std::string> tiers{"E1", "E2", "E3"};
  std::vector<PromptPolicy> policies{kPolicies.begin(), kPolicies.end()};
  std::vector<llm::ModelEndpointConfig> generation_models;
  llm::ModelEndpointConfig judge_model;
  std::size_t judge_batch_size = 10;
  int max_rejudge = 2;
  rubric::MismatchPolicy on_mismatch = rubric::MismatchPolicy::exclude;
  double tolerance = 1e-4;
  bool allow_partial = false;
  std::vector<analysis::GroupKey> cell_group_by{analysis::kGroupOrder.begin(), analysis::kGroupOrder.end()};
  std::vector<std::vector<analysis::GroupKey>> comparison_groupings{
      {analysis::GroupKey::dataset},
      {analysis::GroupKey::dataset, analysis::GroupKey::generation_model},
      {analysis::GroupKey::dataset, analysis::GroupKey::generation_model, analysis::GroupKey::evidence_tier},
      {analysis::GroupKey::dataset, analysis::GroupKey::generation_model, analysis::GroupKey::evidence_tier,
       analysis::GroupKey::anomaly_type},
      {analysis::GroupKey::anomaly_type}};
  std::size_t parallelism = 4;
  std::optional<fs::path> templates_dir;
  std::string templates_ref;

  static std::vector<analysis::GroupKey> group_keys_from(const Json& j) {
    return analysis::parse_group_keys(j.get<std::vector<std::string>>());
  }

  static AuditConfig from_json(const Json& j, const fs::path& base_dir) {
    static const std::set<std::string> known{"seed",         "datasets",         "detection",   "per_type_cap",
                                             "lookback_days", "tiers",           "policies",    "generation_models",
                                             "judge_model",  "judge",            "scoring",     "analysis",
                                             "parallelism",  "templates_dir"};
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    std::vector<std::string> unknown;
    for (const auto& [k, _] : j.items())
      if (!known.count(k)) unknown.push_back(k);
    if (!unknown.empty()) throw ConfigError(fmt::format("config: unknown keys {}", fmt::join(unknown, ", ")));

    AuditConfig c;
    try {
      c.seed = j.value("seed", c.seed);
      for (const auto& d : j.at("datasets")) {
        DatasetSource s{d.at("profile").get<std::string>(), d.at("data").get<std::string>(), {}, {}};
        s.profile_path = fs::absolute(base_dir / s.profile_ref).lexically_normal();
        s.data_path = fs::absolute(base_dir / s.data_ref).lexically_normal();
        c.datasets.push_back(std::move(s));
      }
      if (j.contains("detection")) {
        const auto& d = j["detection"];
        c.detection.threshold = d.value("threshold", c.detection.threshold);
        c.detection.window_days = d.value("window_days", c.detection.window_days);
        c.detection.min_obs = d.value("min_obs", c.detection.min_obs);
      }
      c.per_type_cap = j.value("per_type_cap", c.per_type_cap);
      c.lookback_days = j.value("lookback_days", c.lookback_days);
      if (j.contains("tiers")) c.tiers = j["tiers"].get<std::vector<std::string>>();
      if (j.contains("policies")) {
        c.policies.clear();
        for (const auto& p : j["policies"]) c.policies.push_back(parse_policy(p.get<std::string>()));
      }
      for (const auto& m : j.at("generation_models")) c.generation_models.push_back(llm::ModelEndpointConfig::from_json(m));
      c.judge_model = llm::ModelEndpointConfig::from_json(j.at("judge_model"));
      if (j.contains("judge")) {
        c.judge_batch_size = j["judge"].value("batch_size", c.judge_batch_size);
        c.max_rejudge = j["judge"].value("max_rejudge", c.max_rejudge);
      }
      if (j.contains("scoring")) {
        const auto& s = j["scoring"];
        if (s.contains("on_mismatch")) c.on_mismatch = rubric::parse_mismatch_policy(s["on_mismatch"].get<std::string>());
        c.tolerance = s.value("tolerance", c.tolerance);
        c.allow_partial = s.value("allow_partial", c.allow_partial);
      }
      if (j.contains("analysis")) {
        const auto& a = j["analysis"];
        if (a.contains("cell_group_by")) c.cell_group_by = group_keys_from(a["cell_group_by"]);
        if (a.contains("comparison_groupings")) {
          c.comparison_groupings.clear();
          for (const auto& g : a["comparison_groupings"]) c.comparison_groupings.push_back(group_keys_from(g));
        }
      }
      c.parallelism = j.value("parallelism", c.parallelism);
      if (j.contains("templates_dir")) {
        c.templates_ref = j["templates_dir"].get<std::string>();
        c.templates_dir = fs::absolute(base_dir / c.templates_ref).lexically_normal();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("config: {}", e.what()));
    }
    c.validate();
    return c;
  }

  static AuditConfig load(const fs::path& path) {
    Json j;
    try {
      j = Json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("config {}: {}", path.string(), e.what()));
    }
    return from_json(j, path.parent_path());
  }

  void validate() const {
    std::vector<std::string> problems;
    if (datasets.empty()) problems.push_back("no datasets");
    if (generation_models.empty()) problems.push_back("no generation models");
    if (tiers.empty()) problems.push_back("no tiers");
    if (policies.empty()) problems.push_back("no policies");
    for (const auto& t : tiers)
      if (std::find(ingest::kTierLabels.begin(), ingest::kTierLabels.end(), t) == ingest::kTierLabels.end())
        problems.push_back(fmt::format("unknown tier '{}'", t));
    std::set<std::string> ids;
    for (const auto& m : generation_models)
      if (!ids.insert(m.model_id).second) problems.push_back(fmt::format("duplicate generation model '{}'", m.model_id));
    if (per_type_cap == 0) problems.push_back("per_type_cap must be positive");
    if (lookback_days < 1) problems.push_back("lookback_days must be >= 1");
    if (detection.window_days < 1) problems.push_back("detection.window_days must be >= 1");
    if (judge_batch_size == 0) problems.push_back("judge.batch_size must be positive");
    if (max_rejudge < 0) problems.push_back("judge.max_rejudge must be >= 0");
    if (parallelism == 0) problems.push_back("parallelism must be positive");
    if (!(tolerance >= 0)) problems.push_back("scoring.tolerance must be >= 0");
    if (!problems.empty()) throw ConfigError(fmt::format("config invalid: {}", fmt::join(problems, "; ")));
  }

  // Serializable form. `absolute` writes resolved paths so the file can be
  // read back from any directory.
  Json to_json(bool absolute = false) const {
    Json j;
    j["seed"] = seed;
    j["datasets"] = Json::array();
    for (const auto& d : datasets)
      j["datasets"].push_back({{"profile", absolute ? d.profile_path.string() : d.profile_ref},
                               {"data", absolute ? d.data_path.string() : d.data_ref}});
    j["detection"] = {{"threshold", detection.threshold},
                      {"window_days", detection.window_days},
                      {"min_obs", detection.min_obs}};
    j["per_type_cap"] = per_type_cap;
    j["lookback_days"] = lookback_days;
    j["tiers"] = tiers;
    j["policies"] = Json::array();
    for (auto p : policies) j["policies"].push_back(to_string(p));
    j["generation_models"] = Json::array();
    for (const auto& m : generation_models) j["generation_models"].push_back(m.to_json());
    j["judge_model"] = judge_model.to_json();
    j["judge"] = {{"batch_size", judge_batch_size}, {"max_rejudge", max_rejudge}};
    j["scoring"] = {{"on_mismatch", on_mismatch == rubric::MismatchPolicy::exclude ? "exclude" : "repair"},
                    {"tolerance", tolerance},
                    {"allow_partial", allow_partial}};
    auto keys_json = [](const std::vector<analysis::GroupKey>& keys) {
      Json a = Json::array();
      for (auto k : keys) a.push_back(analysis::to_string(k));
      return a;
    };
    j["analysis"]["cell_group_by"] = keys_json(cell_group_by);
    j["analysis"]["comparison_groupings"] = Json::array();
    for (const auto& g : comparison_groupings) j["analysis"]["comparison_groupings"].push_back(keys_json(g));
    j["parallelism"] = parallelism;
    if (templates_dir) j["templates_dir"] = absolute ? templates_dir->string() : templates_ref;
    return j;
  }

  // Identity of the run: file contents instead of paths, parallelism left out.
  std::string hash() const {
    Json j = to_json();
    j.erase("parallelism");
    j.erase("templates_dir");
    j["datasets"] = Json::array();
    for (const auto& d : datasets)
      j["datasets"].push_back({{"profile_sha256", sha256_file(d.profile_path)}, {"data_sha256", sha256_file(d.data_path)}});
    const auto& t = templates();
    j["templates"] = sha256_hex(t.version + t.system + t.open_user + t.bounded_user + t.judge);
    return sha256_hex(j.dump());
  }

  const prompt::TemplateSet& templates() const {
    if (!templates_dir) return prompt::TemplateSet::builtin();
    if (!loaded_templates_) loaded_templates_ = std::make_shared<prompt::TemplateSet>(prompt::TemplateSet::load(*templates_dir));
    return *loaded_templates_;
  }

  void use_mock_endpoints() {
    for (auto& m : generation_models) m.provider = llm::Provider::mock;
    judge_model.provider = llm::Provider::mock;
  }

  bool all_mock() const {
    return judge_model.provider == llm::Provider::mock &&
           std::all_of(generation_models.begin(), generation_models.end(),
                       [](const auto& m) { return m.provider == llm::Provider::mock; });
  }

 private:
  mutable std::shared_ptr<prompt::TemplateSet> loaded_templates_;
};

// ---------------------------------------------------------------------------
// Manifest

enum class Stage { detect, scenarios, generate, judge, score, analyze, report };
inline constexpr std::array<Stage, 7> kStages{Stage::detect, Stage::scenarios, Stage::generate, Stage::judge,
                                              Stage::score,  Stage::analyze,   Stage::report};

inline std::string_view to_string(Stage s) {
  static constexpr std::array<std::string_view, 7> names{"detect", "scenarios", "generate", "judge",
                                                         "score",  "analyze",   "report"};
  return names[static_cast<std::size_t>(s)];
}

inline Stage parse_stage(std::string_view s) {
  for (Stage st : kStages)
    if (to_string(st) == s) return st;
  throw ConfigError(fmt::format("unknown stage '{}'", s));
}

class MissingStageOutput : public InputError {
 public:
  explicit MissingStageOutput(std::string stage)
      : InputError(fmt::format("missing stage output: {}", stage)), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct StageRecord {
  std::string input_fingerprint;
  std::map<std::string, std::string> outputs;  // run-dir relative path -> sha256
  bool complete = false;
  std::string completed_at;
  Json summary = Json::object();
};

struct RunManifest {
  std::string run_id;
  std::string config_hash;
  std::pair<std::string, std::string> config_file;  // run-dir relative path, sha256
  std::vector<std::string> dataset_profiles;
  std::uint64_t seed = 0;
  std::string template_version;
  std::string rubric_version;
  Json model_configs = Json::object();
  std::map<std::string, StageRecord> stages;

  Json to_json() const {
    Json j;
    j["run_id"] = run_id;
    j["config_hash"] = config_hash;
    j["config_file"] = {{"path", config_file.first}, {"sha256", config_file.second}};
    j["dataset_profiles"] = dataset_profiles;
    j["seed"] = seed;
    j["template_version"] = template_version;
    j["rubric_version"] = rubric_version;
    j["model_configs"] = model_configs;
    j["stages"] = Json::object();
    for (Stage s : kStages) {
      auto it = stages.find(std::string(to_string(s)));
      if (it == stages.end()) continue;
      const auto& r = it->second;
      Json outs = Json::object();
      for (const auto& [p, h] : r.outputs) outs[p] = h;
      j["stages"][it->first] = {{"input_fingerprint", r.input_fingerprint},
                                {"complete", r.complete},
                                {"completed_at", r.completed_at},
                                {"outputs", outs},
                                {"summary", r.summary}};
    }
    return j;
  }

  static RunManifest from_json(const Json& j) {
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config_file = {j.at("config_file").at("path").get<std::string>(), j.at("config_file").at("sha256").get<std::string>()};
    m.dataset_profiles = j.at("dataset_profiles").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.template_version = j.at("template_version").get<std::string>();
    m.rubric_version = j.at("rubric_version").get<std::string>();
    m.model_configs = j.at("model_configs");
    for (const auto& [name, r] : j.at("stages").items()) {
      StageRecord rec;
      rec.input_fingerprint = r.at("input_fingerprint").get<std::string>();
      rec.complete = r.at("complete").get<bool>();
      rec.completed_at = r.value("completed_at", std::string{});
      for (const auto& [p, h] : r.at("outputs").items()) rec.outputs[p] = h.get<std::string>();
      rec.summary = r.value("summary", Json::object());
      m.stages[name] = std::move(rec);
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// Artifact helpers

inline const std::vector<std::string>& failure_columns() {
  static const std::vector<std::string> cols{"scenario_id", "evidence_tier", "prompt_policy", "generation_model",
                                             "reason",      "detail",        "attempts"};
  return cols;
}

inline const std::vector<std::string>& consistency_columns() {
  static const std::vector<std::string> cols{"scenario_id",  "evidence_tier", "prompt_policy", "generation_model",
                                             "consistent",   "stored_eo",     "recomputed_eo", "action",
                                             "mismatches"};
  return cols;
}

inline Json explanation_to_json(const GeneratedExplanation& e) {
  Json j;
  auto row = explanation_row(e);
  for (std::size_t i = 0; i < row.size(); ++i) j[explanation_columns()[i]] = row[i];
  return j;
}

inline GeneratedExplanation explanation_from_json(const Json& j) {
  std::vector<std::string> row;
  for (const auto& c : explanation_columns()) row.push_back(j.at(c).get<std::string>());
  return explanation_from_row(row);
}

inline Json comparison_to_json(const analysis::PairedComparison& c) { return report::comparison_json(c); }

inline analysis::PairedComparison comparison_from_json(const Json& j) {
  analysis::PairedComparison c;
  for (auto k : analysis::kGroupOrder) {
    std::string name(analysis::to_string(k));
    if (j.contains(name)) c.group.fields.emplace_back(k, j[name].get<std::string>());
  }
  auto opt = [&](const char* key) -> std::optional<double> {
    return j.at(key).is_null() ? std::nullopt : std::optional<double>(j.at(key).get<double>());
  };
  c.n_pairs = j.at("n_pairs").get<std::size_t>();
  c.mean_open = j.at("eo_open").get<double>();
  c.mean_bounded = j.at("eo_bounded").get<double>();
  c.delta = j.at("delta").get<double>();
  c.diff_pct = opt("diff_pct");
  c.test.n = c.n_pairs;
  c.test.mean_diff = c.delta;
  c.test.t = opt("t");
  c.test.df = j.at("df").get<std::size_t>();
  c.test.p = opt("p_two_sided");
  c.stars = j.at("stars").get<std::string>();
  const auto status = j.at("status").get<std::string>();
  for (auto s : {analysis::TestStatus::ok, analysis::TestStatus::zero_variance, analysis::TestStatus::insufficient_pairs})
    if (analysis::to_string(s) == status) c.test.status = s;
  return c;
}

inline Json cell_to_json(const analysis::CellSummary& c, const rubric::RubricDefinition& rubric) {
  Json j;
  for (const auto& [k, v] : c.group.fields) j[std::string(analysis::to_string(k))] = v;
  j["n"] = c.n;
  j["mean_eo"] = c.mean_eo;
  for (std::size_t d = 0; d < c.dimension_means.size(); ++d) j["dimensions"][rubric.dimensions()[d].name] = c.dimension_means[d];
  return j;
}

inline analysis::CellSummary cell_from_json(const Json& j, const rubric::RubricDefinition& rubric) {
  analysis::CellSummary c;
  for (auto k : analysis::kGroupOrder) {
    std::string name(analysis::to_string(k));
    if (j.contains(name)) c.group.fields.emplace_back(k, j[name].get<std::string>());
  }
  c.n = j.at("n").get<std::size_t>();
  c.mean_eo = j.at("mean_eo").get<double>();
  for (const auto& d : rubric.dimensions()) c.dimension_means.push_back(j.at("dimensions").at(d.name).get<double>());
  return c;
}

inline std::string grouping_name(std::span<const analysis::GroupKey> keys) {
  std::vector<std::string_view> names;
  for (auto k : analysis::kGroupOrder)
    if (std::find(keys.begin(), keys.end(), k) != keys.end()) names.push_back(analysis::to_string(k));
  return fmt::format("{}", fmt::join(names, "+"));
}

// Routes each request to the mock or HTTP client by endpoint provider.
class RoutingClient : public llm::ChatClient {
 public:
  std::string chat(const prompt::RenderedPrompt& p, const llm::ModelEndpointConfig& c) override {
    if (c.provider == llm::Provider::mock) return mock_.chat(p, c);
    return http_.chat(p, c);
  }

 private:
  mock::MockChatClient mock_;
  llm::HttpChatClient http_;
};

inline constexpr std::string_view kFixedClock = "1970-01-01T00:00:00Z";

struct PipelineOptions {
  std::optional<std::size_t> parallelism;
  std::shared_ptr<llm::ChatClient> client;  // defaults to RoutingClient
  llm::Sleeper sleep = llm::real_sleep;
  std::function<std::string()> clock;  // defaults to fixed time when every endpoint is a mock
  bool force = false;
};

enum class StageStatus { ran, up_to_date };

struct StageOutcome {
  Stage stage;
  StageStatus status;
  Json summary;
};

// ---------------------------------------------------------------------------
// Pipeline

class Pipeline {
 public:
  Pipeline(AuditConfig config, fs::path run_dir, PipelineOptions opts = {})
      : config_(std::move(config)), run_dir_(std::move(run_dir)), opts_(std::move(opts)) {
    config_.validate();
    const std::string snapshot = config_.to_json(true).dump(2) + "\n";
    write_file(run_dir_ / "config.json", snapshot);
    config_file_sha_ = sha256_hex(snapshot);
    if (opts_.parallelism) config_.parallelism = *opts_.parallelism;
    if (!opts_.client) opts_.client = std::make_shared<RoutingClient>();
    if (!opts_.clock) {
      if (config_.all_mock())
        opts_.clock = [] { return std::string(kFixedClock); };
      else
        opts_.clock = llm::utc_now_iso;
    }
    init_manifest();
  }

  const RunManifest& manifest() const { return manifest_; }
  const AuditConfig& config() const { return config_; }
  const fs::path& run_dir() const { return run_dir_; }

  StageOutcome run(Stage stage) {
    switch (stage) {
      case Stage::detect: return run_detect();
      case Stage::scenarios: return run_scenarios();
      case Stage::generate: return run_generate();
      case Stage::judge: return run_judge();
      case Stage::score: return run_score();
      case Stage::analyze: return run_analyze();
      case Stage::report: return run_report();
    }
    throw ConfigError("unknown stage");
  }

  std::vector<StageOutcome> run_all() {
    std::vector<StageOutcome> out;
    for (Stage s : kStages) out.push_back(run(s));
    return out;
  }

 private:
  AuditConfig config_;
  fs::path run_dir_;
  PipelineOptions opts_;
  RunManifest manifest_;
  std::string config_file_sha_;
  std::vector<ingest::DatasetProfile> profiles_;

  fs::path manifest_path() const { return run_dir_ / "manifest.json"; }

  void init_manifest() {
    for (const auto& d : config_.datasets) profiles_.push_back(ingest::DatasetProfile::load(d.profile_path));
    RunManifest fresh;
    fresh.config_hash = config_.hash();
    fresh.config_file = {"config.json", config_file_sha_};
    fresh.run_id = "run-" + fresh.config_hash.substr(0, 12);
    for (const auto& p : profiles_) fresh.dataset_profiles.push_back(p.profile_id());
    fresh.seed = config_.seed;
    fresh.template_version = config_.templates().version;
    fresh.rubric_version = rubric::RubricDefinition::builtin().version();
    fresh.model_configs["generation"] = Json::array();
    for (const auto& m : config_.generation_models) fresh.model_configs["generation"].push_back(m.to_json());
    fresh.model_configs["judge"] = config_.judge_model.to_json();
    if (fs::exists(manifest_path())) {
      try {
        auto old = RunManifest::from_json(Json::parse(read_file(manifest_path())));
        fresh.stages = std::move(old.stages);
      } catch (const std::exception& e) {
        throw InputError(fmt::format("unreadable manifest {}: {}", manifest_path().string(), e.what()));
      }
    }
    manifest_ = std::move(fresh);
  }

  void save_manifest() const { write_file(manifest_path(), manifest_.to_json().dump(2) + "\n"); }

  std::string read_input(const std::string& rel) const {
    fs::path p = run_dir_ / rel;
    if (!fs::exists(p)) throw MissingStageOutput(fs::path(rel).begin()->string());
    return read_file(p);
  }

  std::string fingerprint(Stage stage, const Json& settings, const std::vector<std::string>& inputs) const {
    std::string material = fmt::format("{}\x1f{}", to_string(stage), settings.dump());
    for (const auto& rel : inputs) {
      fs::path p = run_dir_ / rel;
      if (!fs::exists(p)) throw MissingStageOutput(fs::path(rel).begin()->string());
      material += fmt::format("\x1f{}={}", rel, sha256_file(p));
    }
    return sha256_hex(material);
  }

  std::optional<StageOutcome> up_to_date(Stage stage, const std::string& fp) const {
    if (opts_.force) return std::nullopt;
    auto it = manifest_.stages.find(std::string(to_string(stage)));
    if (it == manifest_.stages.end() || !it->second.complete || it->second.input_fingerprint != fp) return std::nullopt;
    for (const auto& [rel, hash] : it->second.outputs) {
      fs::path p = run_dir_ / rel;
      if (!fs::exists(p) || sha256_file(p) != hash) return std::nullopt;
    }
    return StageOutcome{stage, StageStatus::up_to_date, it->second.summary};
  }

  // Writes stage outputs, then records them in the manifest.
  StageOutcome finish(Stage stage, const std::string& fp, const std::vector<std::pair<std::string, std::string>>& files,
                      Json summary, bool complete = true) {
    StageRecord rec;
    rec.input_fingerprint = fp;
    rec.complete = complete;
    rec.completed_at = opts_.clock();
    rec.summary = summary;
    for (const auto& [rel, text] : files) {
      write_file(run_dir_ / rel, text);
      rec.outputs[rel] = sha256_hex(text);
    }
    manifest_.stages[std::string(to_string(stage))] = std::move(rec);
    save_manifest();
    return {stage, StageStatus::ran, std::move(summary)};
  }

  const ingest::DatasetProfile& profile_for(const std::string& dataset) const {
    for (const auto& p : profiles_)
      if (p.dataset_name == dataset) return p;
    throw InputError(fmt::format("no dataset profile named '{}'", dataset));
  }

  void require_secrets(std::span<const llm::ModelEndpointConfig> configs) const {
    for (const auto& c : configs)
      if (c.provider == llm::Provider::http && !c.api_key_env.empty() && !llm::read_secret(c))
        throw ConfigError(fmt::format("environment variable {} for model '{}' is not set", c.api_key_env, c.model_id));
  }

  // -- detect -------------------------------------------------------------

  StageOutcome run_detect() {
    Json settings;
    settings["detection"] = config_.to_json()["detection"];
    settings["per_type_cap"] = config_.per_type_cap;
    settings["seed"] = config_.seed;
    settings["datasets"] = Json::array();
    for (const auto& d : config_.datasets)
      settings["datasets"].push_back({sha256_file(d.profile_path), sha256_file(d.data_path)});
    const auto fp = fingerprint(Stage::detect, settings, {});
    if (auto done = up_to_date(Stage::detect, fp)) return *done;

    std::vector<detect::AnomalyFlag> flags;
    Json warnings = Json::array();
    for (std::size_t i = 0; i < config_.datasets.size(); ++i) {
      const auto& profile = profiles_[i];
      auto loaded = ingest::load_dataset(profile, config_.datasets[i].data_path);
      for (auto& w : loaded.warnings) warnings.push_back(w);
      for (const auto& m : profile.anomaly_metrics) {
        auto found = detect::detect_anomalies(loaded.records, profile, m.metric_name, config_.detection);
        flags.insert(flags.end(), found.begin(), found.end());
      }
    }
    std::sort(flags.begin(), flags.end(), detect::canonical_less);
    auto sampled = detect::stratified_sample(flags, config_.per_type_cap, config_.seed);

    Json summary;
    summary["n_flags"] = flags.size();
    summary["n_sampled"] = sampled.size();
    std::map<std::string, std::map<std::string, std::size_t>> by_type;
    for (const auto& f : sampled) ++by_type[f.dataset][f.metric];
    summary["sampled_by_type"] = by_type;
    summary["warnings"] = warnings;
    return finish(Stage::detect, fp,
                  {{"detect/flags.csv", detect::write_flags(flags)},
                   {"detect/sampled_flags.csv", detect::write_flags(sampled)}},
                  summary);
  }

  // -- scenarios ----------------------------------------------------------

  StageOutcome run_scenarios() {
    Json settings;
    settings["lookback_days"] = config_.lookback_days;
    settings["detection"] = config_.to_json()["detection"];
    settings["tiers"] = config_.tiers;
    settings["policies"] = config_.to_json()["policies"];
    settings["models"] = Json::array();
    for (const auto& m : config_.generation_models) settings["models"].push_back(m.model_id);
    settings["datasets"] = Json::array();
    for (const auto& d : config_.datasets)
      settings["datasets"].push_back({sha256_file(d.profile_path), sha256_file(d.data_path)});
    const auto fp = fingerprint(Stage::scenarios, settings, {"detect/sampled_flags.csv"});
    if (auto done = up_to_date(Stage::scenarios, fp)) return *done;

    auto flags = detect::read_flags(read_input("detect/sampled_flags.csv"));
    std::map<std::string, std::vector<ingest::DayRecord>> records;
    for (std::size_t i = 0; i < config_.datasets.size(); ++i)
      records[profiles_[i].dataset_name] = ingest::load_dataset(profiles_[i], config_.datasets[i].data_path).records;
    std::map<std::string, ingest::RecordIndex> indexes;
    for (const auto& [name, recs] : records) indexes.emplace(name, ingest::RecordIndex(recs));

    scenario::ScenarioParams params{config_.lookback_days, config_.detection};
    scenario::ScenarioStore store;
    for (const auto& f : flags) {
      const auto& profile = profile_for(f.dataset);
      for (const auto& tier : config_.tiers) store.add(scenario::build_scenario(f, indexes.at(f.dataset), profile, tier, params));
    }
    std::vector<std::string> models;
    for (const auto& m : config_.generation_models) models.push_back(m.model_id);
    auto ids = store.scenario_ids();
    auto tasks = scenario::expand_conditions(ids, config_.tiers, config_.policies, models);

    Json summary{{"n_scenarios", ids.size()}, {"n_bundles", store.size()}, {"n_tasks", tasks.size()}};
    return finish(Stage::scenarios, fp,
                  {{"scenarios/scenarios.jsonl", store.to_jsonl()}, {"scenarios/tasks.csv", scenario::write_tasks(tasks)}},
                  summary);
  }

  // -- generate -----------------------------------------------------------

  StageOutcome run_generate() {
    Json settings;
    settings["models"] = Json::array();
    for (const auto& m : config_.generation_models) settings["models"].push_back(m.output_affecting_json());
    settings["template_version"] = config_.templates().version;
    const auto fp = fingerprint(Stage::generate, settings, {"scenarios/scenarios.jsonl", "scenarios/tasks.csv"});
    if (auto done = up_to_date(Stage::generate, fp)) return *done;
    require_secrets(config_.generation_models);

    auto store = scenario::ScenarioStore::from_jsonl(read_input("scenarios/scenarios.jsonl"));
    auto tasks = scenario::read_tasks(read_input("scenarios/tasks.csv"));
    std::map<std::string, llm::ModelEndpointConfig> configs;
    for (const auto& m : config_.generation_models) configs.emplace(m.model_id, m);

    llm::GenerationOptions gopts;
    gopts.parallelism = config_.parallelism;
    gopts.clock = opts_.clock;
    gopts.sleep = opts_.sleep;
    gopts.templates = &config_.templates();
    const fs::path out_path = run_dir_ / "generate/generations.csv";
    const fs::path journal_path = run_dir_ / "generate/journal.jsonl";
    if (fs::exists(out_path)) gopts.existing = read_explanations(read_file(out_path));
    if (fs::exists(journal_path)) {
      std::ifstream in(journal_path);
      std::string line;
      while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        try {
          gopts.existing.push_back(explanation_from_json(Json::parse(line)));
        } catch (const std::exception&) {
          break;  // torn final line from an interrupted write
        }
      }
    }
    fs::create_directories(journal_path.parent_path());
    std::ofstream journal(journal_path, std::ios::app);
    gopts.on_result = [&](const GeneratedExplanation& e) {
      journal << explanation_to_json(e).dump() << '\n';
      journal.flush();
    };

    auto run = llm::run_generation(tasks, store, configs, *opts_.client, gopts);
    journal.close();

    std::vector<std::vector<std::string>> failure_rows;
    for (const auto& f : run.failures)
      failure_rows.push_back({f.task.scenario_id, f.task.tier, std::string(eo::to_string(f.task.policy)),
                              f.task.generation_model, f.reason, f.detail, std::to_string(f.attempts)});
    Json summary{{"n_tasks", tasks.size()},
                 {"n_generated", run.outputs.size()},
                 {"n_failed", run.failures.size()},
                 {"n_reused", run.reused}};
    auto outcome = finish(Stage::generate, fp,
                          {{"generate/generations.csv", write_explanations(run.outputs)},
                           {"generate/failures.csv", csv::format(failure_columns(), failure_rows)}},
                          summary, run.failures.empty());
    fs::remove(journal_path);
    return outcome;
  }

  // -- judge --------------------------------------------------------------

  StageOutcome run_judge() {
    Json settings;
    settings["judge"] = config_.judge_model.output_affecting_json();
    settings["batch_size"] = config_.judge_batch_size;
    settings["max_rejudge"] = config_.max_rejudge;
    settings["template_version"] = config_.templates().version;
    settings["rubric_version"] = rubric::RubricDefinition::builtin().version();
    const auto fp = fingerprint(Stage::judge, settings, {"scenarios/scenarios.jsonl", "generate/generations.csv"});
    if (auto done = up_to_date(Stage::judge, fp)) return *done;
    require_secrets(std::span(&config_.judge_model, 1));

    auto store = scenario::ScenarioStore::from_jsonl(read_input("scenarios/scenarios.jsonl"));
    auto explanations = read_explanations(read_input("generate/generations.csv"));
    std::sort(explanations.begin(), explanations.end(),
              [](const auto& a, const auto& b) { return eo::canonical_less(a, b); });

    llm::JudgeOptions jopts;
    jopts.batch_size = config_.judge_batch_size;
    jopts.max_rejudge = config_.max_rejudge;
    jopts.parallelism = config_.parallelism;
    jopts.sleep = opts_.sleep;
    jopts.templates = &config_.templates();
    auto run = llm::run_judging(explanations, store, config_.judge_model, *opts_.client,
                                rubric::RubricDefinition::builtin(), jopts);

    std::vector<std::vector<std::string>> failure_rows;
    std::size_t failed_rows = 0;
    for (const auto& f : run.failures) {
      for (const auto& k : f.keys) {
        ++failed_rows;
        failure_rows.push_back({k.scenario_id, k.evidence_tier, std::string(eo::to_string(k.prompt_policy)),
                                k.generation_model, f.reason, fmt::format("{}", fmt::join(f.defects, " | ")),
                                std::to_string(f.attempts)});
      }
    }
    Json summary{{"n_explanations", explanations.size()},
                 {"n_batches", run.batches},
                 {"n_judged", run.judgments.size()},
                 {"n_failed", failed_rows}};
    return finish(Stage::judge, fp,
                  {{"judge/judgments.csv", rubric::write_judgments(run.judgments)},
                   {"judge/failures.csv", csv::format(failure_columns(), failure_rows)}},
                  summary, run.failures.empty());
  }

  // -- score --------------------------------------------------------------

  StageOutcome run_score() {
    Json settings = config_.to_json()["scoring"];
    const auto fp = fingerprint(Stage::score, settings, {"judge/judgments.csv"});
    if (auto done = up_to_date(Stage::score, fp)) return *done;

    const auto& rubric = rubric::RubricDefinition::builtin();
    auto judgments = rubric::read_judgments(read_input("judge/judgments.csv"), rubric);
    auto gate = rubric::apply_consistency_gate(judgments, config_.on_mismatch, rubric, config_.tolerance);

    std::set<rubric::JudgmentKey> kept_keys;
    for (const auto& j : gate.kept) kept_keys.insert(j.key);
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : gate.report) {
      std::string action = r.consistent ? "kept" : (kept_keys.count(r.key) ? "repaired" : "excluded");
      rows.push_back({r.key.scenario_id, r.key.evidence_tier, std::string(eo::to_string(r.key.prompt_policy)),
                      r.key.generation_model, r.consistent ? "true" : "false",
                      r.stored_eo ? format_double(*r.stored_eo) : "", format_fixed(r.recomputed_eo, 4), action,
                      fmt::format("{}", fmt::join(r.mismatches, "; "))});
    }
    Json summary{{"n_input", judgments.size()},
                 {"n_scored", gate.kept.size()},
                 {"n_flagged", gate.flagged},
                 {"n_repaired", gate.repaired}};
    return finish(Stage::score, fp,
                  {{"score/scored.csv", rubric::write_judgments(gate.kept, rubric)},
                   {"score/consistency.csv", csv::format(consistency_columns(), rows)}},
                  summary);
  }

  // -- analyze ------------------------------------------------------------

  StageOutcome run_analyze() {
    Json settings = config_.to_json()["analysis"];
    const auto fp = fingerprint(Stage::analyze, settings, {"score/scored.csv"});
    if (auto done = up_to_date(Stage::analyze, fp)) return *done;

    using analysis::GroupKey;
    const auto& rubric = rubric::RubricDefinition::builtin();
    auto judgments = rubric::read_judgments(read_input("score/scored.csv"), rubric);
    auto pairing = analysis::pair_judgments(judgments, rubric);

    auto groupings = config_.comparison_groupings;
    for (std::vector<GroupKey> needed : {std::vector{GroupKey::dataset, GroupKey::generation_model},
                                         std::vector{GroupKey::dataset, GroupKey::generation_model, GroupKey::evidence_tier}}) {
      bool present = std::any_of(groupings.begin(), groupings.end(),
                                 [&](const auto& g) { return grouping_name(g) == grouping_name(needed); });
      if (!present) groupings.push_back(needed);
    }

    Json doc;
    doc["comparisons"] = Json::array();
    std::vector<std::vector<std::string>> cmp_rows;
    for (const auto& g : groupings) {
      auto comparisons = analysis::compare_policies(pairing.pairs, g);
      Json rows = Json::array();
      for (const auto& c : comparisons) {
        rows.push_back(comparison_to_json(c));
        cmp_rows.push_back({grouping_name(g), c.group.get(GroupKey::dataset).value_or(""),
                            c.group.get(GroupKey::generation_model).value_or(""),
                            c.group.get(GroupKey::evidence_tier).value_or(""),
                            c.group.get(GroupKey::anomaly_type).value_or(""), std::to_string(c.n_pairs),
                            format_double(c.mean_open), format_double(c.mean_bounded), format_double(c.delta),
                            report::opt_num(c.diff_pct), report::opt_num(c.test.t), std::to_string(c.test.df),
                            report::opt_num(c.test.p), c.stars, std::string(analysis::to_string(c.test.status))});
      }
      doc["comparisons"].push_back({{"grouping", grouping_name(g)}, {"rows", rows}});
    }
    auto cells = analysis::aggregate_cells(judgments, config_.cell_group_by, rubric);
    doc["cells"] = {{"grouping", grouping_name(config_.cell_group_by)}, {"rows", Json::array()}};
    for (const auto& c : cells) doc["cells"]["rows"].push_back(cell_to_json(c, rubric));

    std::vector<std::vector<std::string>> pair_rows, excluded_rows;
    for (const auto& p : pairing.pairs)
      pair_rows.push_back({p.open.key.scenario_id, p.open.key.dataset, p.open.key.evidence_tier, p.open.key.anomaly_type,
                           p.open.key.generation_model, format_double(p.open_eo), format_double(p.bounded_eo),
                           format_double(p.diff())});
    for (const auto& x : pairing.excluded)
      excluded_rows.push_back({x.key.scenario_id, x.key.evidence_tier, std::string(eo::to_string(x.key.prompt_policy)),
                               x.key.generation_model, x.reason});

    Json summary{{"n_judgments", judgments.size()}, {"n_pairs", pairing.pairs.size()},
                 {"n_pairs_excluded", pairing.excluded.size()}, {"n_cells", cells.size()}};
    return finish(
        Stage::analyze, fp,
        {{"analyze/analysis.json", doc.dump(2) + "\n"},
         {"analyze/comparisons.csv",
          csv::format(std::vector<std::string>{"grouping", "dataset", "generation_model", "evidence_tier", "anomaly_type", "n_pairs", "eo_open",
                       "eo_bounded", "delta", "diff_pct", "t", "df", "p_two_sided", "stars", "status"},
                      cmp_rows)},
         {"analyze/cells.csv", report::cells_csv(cells, rubric, config_.cell_group_by)},
         {"analyze/pairs.csv", csv::format(std::vector<std::string>{"scenario_id", "dataset", "evidence_tier", "anomaly_type", "generation_model",
                                            "eo_open", "eo_bounded", "diff"},
                                           pair_rows)},
         {"analyze/pairs_excluded.csv",
          csv::format(std::vector<std::string>{"scenario_id", "evidence_tier", "prompt_policy", "generation_model", "reason"}, excluded_rows)}},
        summary);
  }

  // -- report -------------------------------------------------------------

  Json run_summary() const {
    Json s;
    s["run_id"] = manifest_.run_id;
    s["config_hash"] = manifest_.config_hash;
    s["seed"] = manifest_.seed;
    s["template_version"] = manifest_.template_version;
    s["rubric_version"] = manifest_.rubric_version;
    s["dataset_profiles"] = manifest_.dataset_profiles;
    s["generation_models"] = Json::array();
    for (const auto& m : config_.generation_models) s["generation_models"].push_back(m.model_id);
    s["judge_model"] = config_.judge_model.model_id;
    s["stages"] = Json::object();
    for (Stage st : kStages) {
      if (st == Stage::report) continue;
      auto it = manifest_.stages.find(std::string(to_string(st)));
      if (it != manifest_.stages.end()) s["stages"][it->first] = it->second.summary;
    }
    return s;
  }

  StageOutcome run_report() {
    Json summary = run_summary();
    const auto fp = fingerprint(Stage::report, summary, {"analyze/analysis.json"});
    if (auto done = up_to_date(Stage::report, fp)) return *done;

    const auto& rubric = rubric::RubricDefinition::builtin();
    Json doc = Json::parse(read_input("analyze/analysis.json"));
    report::ReportInputs in;
    in.run_summary = summary;
    const std::string by_tier_name = grouping_name(std::vector{analysis::GroupKey::dataset, analysis::GroupKey::generation_model,
                                                               analysis::GroupKey::evidence_tier});
    const std::string overall_name =
        grouping_name(std::vector{analysis::GroupKey::dataset, analysis::GroupKey::generation_model});
    for (const auto& g : doc.at("comparisons")) {
      const auto name = g.at("grouping").get<std::string>();
      auto* target = name == by_tier_name ? &in.by_tier : name == overall_name ? &in.overall : nullptr;
      if (!target) continue;
      for (const auto& r : g.at("rows")) target->push_back(comparison_from_json(r));
    }
    for (const auto& r : doc.at("cells").at("rows")) in.cells.push_back(cell_from_json(r, rubric));
    in.cell_group_by = config_.cell_group_by;

    const fs::path tmp = run_dir_ / "report";
    auto written = report::emit_report(in, tmp, rubric);
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& p : written) files.emplace_back(fs::relative(p, run_dir_).generic_string(), read_file(p));
    return finish(Stage::report, fp, files, Json{{"files", written.size()}});
  }
};

}  // namespace eo::pipeline
