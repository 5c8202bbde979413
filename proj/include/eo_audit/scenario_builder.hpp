#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "eo_audit/anomaly_detector.hpp"
#include "eo_audit/common.hpp"
#include "eo_audit/csv.hpp"
#include "eo_audit/policy.hpp"
#include "eo_audit/sensing_ingest.hpp"

namespace eo::scenario {

using ingest::EvidenceTier;
using ingest::MaybeValue;

struct DayEvidence {
  Date date;
  // Tier channels in tier order.
  std::vector<std::pair<std::string, MaybeValue>> values;

  bool operator==(const DayEvidence&) const = default;
};

struct TargetMetric {
  std::string metric;
  std::optional<double> value;
  std::optional<double> z;

  bool operator==(const TargetMetric&) const = default;
};

struct MissingnessSummary {
  struct Entry {
    std::string channel;
    std::vector<Date> missing_dates;
    bool operator==(const Entry&) const = default;
  };
  // One entry per tier channel, including fully observed ones.
  std::vector<Entry> channels;

  std::size_t missing_count(std::string_view channel) const {
    for (const auto& e : channels)
      if (e.channel == channel) return e.missing_dates.size();
    return 0;
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& e : channels) n += e.missing_dates.size();
    return n;
  }

  bool operator==(const MissingnessSummary&) const = default;
};

struct AnomalyScenario {
  std::string scenario_id;
  std::string dataset_name;
  std::string participant_id;
  Date target_date;
  std::string anomaly_type;
  std::string target_rule;
  EvidenceTier tier;
  detect::BaselineStats baseline;
  int baseline_window_days = 14;
  std::vector<TargetMetric> target_metrics;
  // Consecutive days, target day last.
  std::vector<DayEvidence> window;
  MissingnessSummary missingness;

  bool operator==(const AnomalyScenario&) const = default;
};

struct ScenarioParams {
  int lookback_days = 3;
  detect::DetectionParams detection;
};

inline std::string format_threshold(double t) {
  return t == std::floor(t) ? format_fixed(t, 1) : format_double(t);
}

inline std::string render_target_rule(std::string_view metric, double threshold) {
  return fmt::format("{} z <= {} vs rolling baseline", metric, format_threshold(threshold));
}

inline MissingnessSummary summarize_missingness(const EvidenceTier& tier, std::span<const DayEvidence> window) {
  MissingnessSummary s;
  for (const auto& ch : tier.channels) {
    MissingnessSummary::Entry e{ch, {}};
    for (const auto& day : window)
      for (const auto& [name, v] : day.values)
        if (name == ch && !v) e.missing_dates.push_back(day.date);
    s.channels.push_back(std::move(e));
  }
  return s;
}

inline AnomalyScenario build_scenario(const detect::AnomalyFlag& flag, const ingest::RecordIndex& index,
                                      const ingest::DatasetProfile& profile, std::string_view tier_label,
                                      const ScenarioParams& params = {}) {
  const EvidenceTier* tier = profile.tier(tier_label);
  if (!tier)
    throw ConfigError(fmt::format("tier '{}' not defined in profile '{}'", tier_label, profile.dataset_name));
  if (params.lookback_days < 1) throw ConfigError("lookback_days must be >= 1");

  AnomalyScenario s;
  s.scenario_id = flag.scenario_id;
  s.dataset_name = flag.dataset;
  s.participant_id = flag.participant_id;
  s.target_date = flag.date;
  s.anomaly_type = flag.metric;
  s.target_rule = render_target_rule(flag.metric, params.detection.threshold);
  s.tier = *tier;
  s.baseline = flag.baseline;
  s.baseline_window_days = params.detection.window_days;

  for (const auto& m : profile.anomaly_metrics) {
    if (m.metric_name == flag.metric) {
      s.target_metrics.push_back({m.metric_name, flag.value, flag.z});
      continue;
    }
    auto score = detect::score_point(index, flag.participant_id, flag.date, m.source_channel, params.detection);
    s.target_metrics.push_back({m.metric_name, score.value, score.z});
  }

  for (int offset = params.lookback_days - 1; offset >= 0; --offset) {
    DayEvidence day{flag.date - offset, {}};
    const ingest::DayRecord* rec = index.find(flag.participant_id, day.date);
    for (const auto& ch : tier->channels)
      day.values.emplace_back(ch, rec ? rec->get(ch) : MaybeValue{});
    s.window.push_back(std::move(day));
  }
  s.missingness = summarize_missingness(s.tier, s.window);
  return s;
}

inline constexpr std::string_view kWindowRecordsNote =
    "Consecutive calendar days (lookback window). The TARGET (anomalous) day is the LAST entry in "
    "channel_evidence. All prior entries are context days leading up to the anomaly.";

inline Json interpretation_rules(PromptPolicy policy) {
  Json rules;
  rules["policy"] = std::string(to_string(policy));
  if (policy == PromptPolicy::open_explanation) {
    rules["description"] =
        "Minimal constraints. Explain what may have contributed to the anomalous day. Separate "
        "observations from interpretations where possible, and flag weak or missing evidence where "
        "relevant. No hard restrictions on causal language.";
    rules["soft_reminders"] = Json{{"separate_observation_from_interpretation", true},
                                   {"missing_data_is_not_negative_evidence", true},
                                   {"flag_weak_or_sparse_evidence", true},
                                   {"avoid_unwarranted_causal_certainty", true}};
  } else {
    rules["description"] = "Evidence-bounded explanation. You MUST follow all constraints below exactly.";
    rules["hard_constraints"] = Json{
        {"use_only_listed_evidence",
         "Only use evidence explicitly present in channel_evidence and the core metrics."},
        {"no_unsupported_causal_claims",
         "Do not assert that X caused Y unless both X and Y are observed in the data."},
        {"treat_missing_as_missing",
         "If a channel value is null or absent, treat it as missing data. Acknowledge when a key "
         "channel is unavailable."},
        {"state_uncertainty_when_evidence_is_weak",
         "Use hedged language when the evidence is sparse, indirect, or based on a single channel."},
        {"distinguish_observation_from_interpretation",
         "Clearly separate what the data shows from what it might mean."},
        {"preserve_temporal_order",
         "The target day is the LAST record in channel_evidence. Do not attribute causes that occur "
         "after the target day."}};
  }
  return rules;
}

inline Json optional_number(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

/// The observed-case document embedded in generation prompts and handed to
/// the judge. Keys and their order are fixed.
inline Json scenario_to_observed_case(const AnomalyScenario& s, PromptPolicy policy) {
  Json doc;
  doc["dataset_name"] = s.dataset_name;
  doc["anomaly_type"] = s.anomaly_type;
  doc["evidence_level"] = s.tier.label;
  doc["target_rule"] = s.target_rule;
  doc["allowed_channels"] = s.tier.channels;
  doc["participant_baseline"] = Json{{"metric", s.anomaly_type},
                                     {"mean", s.baseline.mean},
                                     {"sd", s.baseline.sd},
                                     {"n_obs", s.baseline.n_obs},
                                     {"window_days", s.baseline_window_days}};
  Json targets = Json::object();
  for (const auto& t : s.target_metrics)
    targets[t.metric] = Json{{"value", optional_number(t.value)}, {"z", optional_number(t.z)}};
  doc["target_metrics"] = targets;
  doc["window_records_note"] = std::string(kWindowRecordsNote);
  Json evidence = Json::array();
  for (const auto& day : s.window) {
    Json row;
    row["date"] = day.date.str();
    for (const auto& [ch, v] : day.values) row[ch] = ingest::value_to_json(v);
    evidence.push_back(std::move(row));
  }
  doc["channel_evidence"] = evidence;
  Json missing = Json::object();
  for (const auto& e : s.missingness.channels) {
    Json dates = Json::array();
    for (const auto& d : e.missing_dates) dates.push_back(d.str());
    missing[e.channel] = Json{{"missing_dates", dates}, {"n_missing", e.missing_dates.size()}};
  }
  doc["missingness_summary"] = missing;
  doc["interpretation_rules"] = interpretation_rules(policy);
  return doc;
}

// Canonical text form: insertion key order, two-space indent.
inline std::string observed_case_text(const AnomalyScenario& s, PromptPolicy policy) {
  return scenario_to_observed_case(s, policy).dump(2);
}

inline Json scenario_to_json(const AnomalyScenario& s) {
  Json j;
  j["scenario_id"] = s.scenario_id;
  j["tier"] = s.tier.label;
  j["dataset_name"] = s.dataset_name;
  j["participant_id"] = s.participant_id;
  j["target_date"] = s.target_date.str();
  j["anomaly_type"] = s.anomaly_type;
  j["target_rule"] = s.target_rule;
  j["channels"] = s.tier.channels;
  j["baseline"] = Json{{"mean", s.baseline.mean}, {"sd", s.baseline.sd}, {"n_obs", s.baseline.n_obs}};
  j["baseline_window_days"] = s.baseline_window_days;
  Json targets = Json::array();
  for (const auto& t : s.target_metrics)
    targets.push_back({{"metric", t.metric}, {"value", optional_number(t.value)}, {"z", optional_number(t.z)}});
  j["target_metrics"] = targets;
  Json window = Json::array();
  for (const auto& day : s.window) {
    Json vals = Json::object();
    for (const auto& [ch, v] : day.values) vals[ch] = ingest::value_to_json(v);
    window.push_back({{"date", day.date.str()}, {"values", vals}});
  }
  j["window"] = window;
  return j;
}

inline AnomalyScenario scenario_from_json(const Json& j) {
  try {
    AnomalyScenario s;
    s.scenario_id = j.at("scenario_id").get<std::string>();
    s.tier.label = j.at("tier").get<std::string>();
    s.dataset_name = j.at("dataset_name").get<std::string>();
    s.participant_id = j.at("participant_id").get<std::string>();
    s.target_date = Date::parse(j.at("target_date").get<std::string>());
    s.anomaly_type = j.at("anomaly_type").get<std::string>();
    s.target_rule = j.at("target_rule").get<std::string>();
    s.tier.channels = j.at("channels").get<std::vector<std::string>>();
    const auto& b = j.at("baseline");
    s.baseline = {b.at("mean").get<double>(), b.at("sd").get<double>(), b.at("n_obs").get<std::size_t>()};
    s.baseline_window_days = j.at("baseline_window_days").get<int>();
    for (const auto& t : j.at("target_metrics")) {
      TargetMetric tm{t.at("metric").get<std::string>(), std::nullopt, std::nullopt};
      if (!t.at("value").is_null()) tm.value = t["value"].get<double>();
      if (!t.at("z").is_null()) tm.z = t["z"].get<double>();
      s.target_metrics.push_back(std::move(tm));
    }
    for (const auto& day : j.at("window")) {
      DayEvidence d{Date::parse(day.at("date").get<std::string>()), {}};
      for (const auto& [ch, v] : day.at("values").items()) d.values.emplace_back(ch, ingest::value_from_json(v));
      s.window.push_back(std::move(d));
    }
    s.missingness = summarize_missingness(s.tier, s.window);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(fmt::format("scenario document: {}", e.what()));
  }
}

/// Scenario bundles addressable by (scenario_id, tier).
class ScenarioStore {
 public:
  void add(AnomalyScenario s) {
    auto key = std::make_pair(s.scenario_id, s.tier.label);
    if (!items_.emplace(std::move(key), std::move(s)).second)
      throw ConfigError("duplicate scenario bundle");
  }

  const AnomalyScenario* find(const std::string& id, const std::string& tier) const {
    auto it = items_.find({id, tier});
    return it == items_.end() ? nullptr : &it->second;
  }

  const AnomalyScenario& at(const std::string& id, const std::string& tier) const {
    if (const auto* s = find(id, tier)) return *s;
    throw InputError(fmt::format("unknown scenario bundle {} / {}", id, tier));
  }

  std::size_t size() const { return items_.size(); }

  // Distinct scenario ids, sorted.
  std::vector<std::string> scenario_ids() const {
    std::vector<std::string> ids;
    for (const auto& [key, _] : items_)
      if (ids.empty() || ids.back() != key.first) ids.push_back(key.first);
    return ids;
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [_, s] : items_) fn(s);
  }

  // One JSON document per line, ordered by (scenario_id, tier).
  std::string to_jsonl() const {
    std::string out;
    for (const auto& [_, s] : items_) out += scenario_to_json(s).dump() + "\n";
    return out;
  }

  static ScenarioStore from_jsonl(std::string_view text) {
    ScenarioStore store;
    std::size_t pos = 0, line = 0;
    while (pos < text.size()) {
      auto nl = text.find('\n', pos);
      if (nl == std::string_view::npos) nl = text.size();
      ++line;
      std::string_view chunk = text.substr(pos, nl - pos);
      pos = nl + 1;
      if (trim(chunk).empty()) continue;
      try {
        store.add(scenario_from_json(Json::parse(chunk)));
      } catch (const nlohmann::json::exception& e) {
        throw InputError(fmt::format("scenario artifact line {}: {}", line, e.what()));
      }
    }
    return store;
  }

 private:
  std::map<std::pair<std::string, std::string>, AnomalyScenario> items_;
};

struct GenerationTask {
  std::string scenario_id;
  std::string tier;
  PromptPolicy policy = PromptPolicy::open_explanation;
  std::string generation_model;

  auto operator<=>(const GenerationTask&) const = default;
};

/// Full factorial of scenarios x tiers x policies x models, in that nesting
/// order (scenario outermost).
inline std::vector<GenerationTask> expand_conditions(std::span<const std::string> scenario_ids,
                                                     std::span<const std::string> tiers,
                                                     std::span<const PromptPolicy> policies,
                                                     std::span<const std::string> models) {
  if (models.empty()) throw ConfigError("expand_conditions: empty model list");
  auto has_dupes = [](auto range) {
    std::vector<std::decay_t<decltype(range[0])>> v(range.begin(), range.end());
    std::sort(v.begin(), v.end());
    return std::adjacent_find(v.begin(), v.end()) != v.end();
  };
  if (has_dupes(scenario_ids) || has_dupes(tiers) || has_dupes(policies) || has_dupes(models))
    throw ConfigError("expand_conditions: duplicate factor level");
  std::vector<GenerationTask> tasks;
  tasks.reserve(scenario_ids.size() * tiers.size() * policies.size() * models.size());
  for (const auto& id : scenario_ids)
    for (const auto& tier : tiers)
      for (auto policy : policies)
        for (const auto& model : models) tasks.push_back({id, tier, policy, model});
  return tasks;
}

inline const std::vector<std::string>& task_columns() {
  static const std::vector<std::string> cols{"scenario_id", "evidence_tier", "prompt_policy", "generation_model"};
  return cols;
}

inline std::string write_tasks(std::span<const GenerationTask> tasks) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& t : tasks)
    rows.push_back({t.scenario_id, t.tier, std::string(to_string(t.policy)), t.generation_model});
  return csv::format(task_columns(), rows);
}

inline std::vector<GenerationTask> read_tasks(std::string_view text) {
  csv::Table t = csv::parse(text);
  if (t.header != task_columns()) throw InputError("tasks artifact: unexpected header");
  std::vector<GenerationTask> tasks;
  for (const auto& row : t.rows) {
    if (row.size() != 4) throw InputError("tasks artifact: wrong field count");
    tasks.push_back({row[0], row[1], parse_policy(row[2]), row[3]});
  }
  return tasks;
}

}  // namespace eo::scenario
