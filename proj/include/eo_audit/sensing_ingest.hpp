#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "eo_audit/common.hpp"
#include "eo_audit/csv.hpp"
#include "eo_audit/hash.hpp"

// Day-level sensing records and the declarative dataset profiles that map a
// tabular export onto them.
namespace eo::ingest {

inline constexpr std::array<std::string_view, 3> kMetricNames{"activity", "sleep", "affect"};

inline bool is_metric_name(std::string_view name) {
  return std::find(kMetricNames.begin(), kMetricNames.end(), name) != kMetricNames.end();
}

// Position in the canonical activity, sleep, affect order.
inline std::size_t metric_rank(std::string_view name) {
  auto it = std::find(kMetricNames.begin(), kMetricNames.end(), name);
  return static_cast<std::size_t>(it - kMetricNames.begin());
}

enum class ValueKind { numeric, categorical, text };
enum class Sampling { daily, intermittent };
enum class ContextKind { participant_linked, cohort_level };

NLOHMANN_JSON_SERIALIZE_ENUM(ValueKind, {{ValueKind::numeric, "numeric"},
                                         {ValueKind::categorical, "categorical"},
                                         {ValueKind::text, "text"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Sampling, {{Sampling::daily, "daily"},
                                        {Sampling::intermittent, "intermittent"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ContextKind, {{ContextKind::participant_linked, "participant_linked"},
                                           {ContextKind::cohort_level, "cohort_level"}})

struct ChannelSpec {
  std::string name;
  ValueKind value_kind = ValueKind::numeric;
  std::string units;
  Sampling sampling = Sampling::daily;
};

struct AnomalyMetric {
  std::string metric_name;
  std::string source_channel;
};

struct EvidenceTier {
  std::string label;
  std::vector<std::string> channels;

  bool operator==(const EvidenceTier&) const = default;
};

inline constexpr std::array<std::string_view, 3> kTierLabels{"E1", "E2", "E3"};

struct DatasetProfile {
  std::string dataset_name;
  std::string participant_column = "participant_id";
  std::string date_column = "date";
  std::vector<ChannelSpec> channel_specs;
  // Ordered E1, E2, E3; each tier lists its full channel set.
  std::vector<EvidenceTier> tiers;
  std::vector<AnomalyMetric> anomaly_metrics;
  ContextKind context_kind = ContextKind::participant_linked;
  // Cell contents that mean "missing", compared after trimming, case-insensitive.
  std::vector<std::string> missing_tokens{"", "na", "n/a", "nan", "null", "none"};
  // Numeric values that encode missingness in some exports (e.g. -1).
  std::vector<double> missing_sentinels;

  const ChannelSpec* channel(std::string_view name) const {
    for (const auto& c : channel_specs)
      if (c.name == name) return &c;
    return nullptr;
  }

  const EvidenceTier* tier(std::string_view label) const {
    for (const auto& t : tiers)
      if (t.label == label) return &t;
    return nullptr;
  }

  const AnomalyMetric* metric(std::string_view name) const {
    for (const auto& m : anomaly_metrics)
      if (m.metric_name == name) return &m;
    return nullptr;
  }

  Json to_json() const {
    Json j;
    j["dataset_name"] = dataset_name;
    j["participant_column"] = participant_column;
    j["date_column"] = date_column;
    Json chans = Json::array();
    for (const auto& c : channel_specs)
      chans.push_back({{"name", c.name}, {"value_kind", c.value_kind}, {"units", c.units},
                       {"sampling", c.sampling}});
    j["channel_specs"] = chans;
    Json tier_map = Json::object();
    for (const auto& t : tiers) tier_map[t.label] = t.channels;
    j["tier_map"] = tier_map;
    Json metrics = Json::array();
    for (const auto& m : anomaly_metrics)
      metrics.push_back({{"metric_name", m.metric_name}, {"source_channel", m.source_channel}});
    j["anomaly_metrics"] = metrics;
    j["context_kind"] = context_kind;
    j["missing_tokens"] = missing_tokens;
    j["missing_sentinels"] = missing_sentinels;
    return j;
  }

  static DatasetProfile from_json(const Json& j) {
    try {
      DatasetProfile p;
      p.dataset_name = j.at("dataset_name").get<std::string>();
      p.participant_column = j.value("participant_column", p.participant_column);
      p.date_column = j.value("date_column", p.date_column);
      for (const auto& c : j.at("channel_specs")) {
        ChannelSpec spec;
        spec.name = c.at("name").get<std::string>();
        spec.value_kind = c.value("value_kind", ValueKind::numeric);
        spec.units = c.value("units", std::string{});
        spec.sampling = c.value("sampling", Sampling::daily);
        p.channel_specs.push_back(std::move(spec));
      }
      for (const auto& [label, chans] : j.at("tier_map").items())
        p.tiers.push_back({label, chans.get<std::vector<std::string>>()});
      for (const auto& m : j.at("anomaly_metrics"))
        p.anomaly_metrics.push_back(
            {m.at("metric_name").get<std::string>(), m.at("source_channel").get<std::string>()});
      p.context_kind = j.value("context_kind", ContextKind::participant_linked);
      if (j.contains("missing_tokens")) {
        p.missing_tokens.clear();
        for (const auto& t : j["missing_tokens"]) p.missing_tokens.push_back(to_lower(trim(t.get<std::string>())));
      }
      if (j.contains("missing_sentinels"))
        p.missing_sentinels = j["missing_sentinels"].get<std::vector<double>>();
      return p;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("dataset profile: {}", e.what()));
    }
  }

  static DatasetProfile load(const fs::path& path) {
    try {
      return from_json(Json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(fmt::format("dataset profile '{}': {}", path.string(), e.what()));
    }
  }

  // Stable identifier: dataset name plus a digest of the canonical profile JSON.
  std::string profile_id() const {
    return fmt::format("{}@{}", dataset_name, sha256_hex(to_json().dump()).substr(0, 12));
  }
};

// Every violated profile invariant, one message each. Empty means valid.
inline std::vector<std::string> validate_profile(const DatasetProfile& p) {
  std::vector<std::string> report;
  if (p.dataset_name.empty()) report.push_back("dataset_name is empty");

  std::set<std::string> names;
  for (const auto& c : p.channel_specs) {
    if (c.name.empty()) report.push_back("channel with empty name");
    if (!names.insert(c.name).second) report.push_back(fmt::format("duplicate channel name '{}'", c.name));
    if (c.name == p.participant_column || c.name == p.date_column)
      report.push_back(fmt::format("channel '{}' collides with the participant/date column", c.name));
  }

  std::vector<std::string> labels;
  for (const auto& t : p.tiers) labels.push_back(t.label);
  std::vector<std::string> expected(kTierLabels.begin(), kTierLabels.end());
  if (labels != expected)
    report.push_back(fmt::format("tier_map must list exactly E1, E2, E3 in order (got [{}])",
                                 fmt::join(labels, ", ")));

  for (const auto& t : p.tiers) {
    std::set<std::string> seen;
    for (const auto& ch : t.channels) {
      if (!names.count(ch))
        report.push_back(fmt::format("tier {} references unknown channel '{}'", t.label, ch));
      if (!seen.insert(ch).second)
        report.push_back(fmt::format("tier {} lists channel '{}' twice", t.label, ch));
    }
  }
  for (std::size_t i = 1; i < p.tiers.size(); ++i) {
    const auto& inner = p.tiers[i - 1];
    const auto& outer = p.tiers[i];
    for (const auto& ch : inner.channels)
      if (std::find(outer.channels.begin(), outer.channels.end(), ch) == outer.channels.end())
        report.push_back(fmt::format("nesting violation: {} is missing {} channel '{}'", outer.label,
                                     inner.label, ch));
  }

  const EvidenceTier* e1 = p.tier("E1");
  std::set<std::string> metric_names;
  for (const auto& m : p.anomaly_metrics) {
    if (!is_metric_name(m.metric_name))
      report.push_back(fmt::format("unknown anomaly metric '{}' (expected activity, sleep or affect)",
                                   m.metric_name));
    if (!metric_names.insert(m.metric_name).second)
      report.push_back(fmt::format("anomaly metric '{}' listed twice", m.metric_name));
    const ChannelSpec* spec = p.channel(m.source_channel);
    if (!spec) {
      report.push_back(fmt::format("anomaly metric '{}' sources unknown channel '{}'", m.metric_name,
                                   m.source_channel));
    } else if (spec->value_kind != ValueKind::numeric) {
      report.push_back(fmt::format("anomaly metric '{}' sources non-numeric channel '{}'",
                                   m.metric_name, m.source_channel));
    }
    if (e1 && std::find(e1->channels.begin(), e1->channels.end(), m.source_channel) == e1->channels.end())
      report.push_back(fmt::format("anomaly metric '{}' source channel '{}' is not in E1",
                                   m.metric_name, m.source_channel));
  }
  if (p.anomaly_metrics.empty()) report.push_back("no anomaly metrics declared");
  return report;
}

using Value = std::variant<double, std::string>;
// nullopt is the single missing marker.
using MaybeValue = std::optional<Value>;

inline Json value_to_json(const MaybeValue& v) {
  if (!v) return nullptr;
  if (const double* d = std::get_if<double>(&*v)) return *d;
  return std::get<std::string>(*v);
}

inline MaybeValue value_from_json(const Json& j) {
  if (j.is_null()) return std::nullopt;
  if (j.is_number()) return Value{j.get<double>()};
  if (j.is_string()) return Value{j.get<std::string>()};
  throw InputError(fmt::format("unsupported channel value '{}'", j.dump()));
}

struct DayRecord {
  std::string participant_id;
  Date date;
  // Holds every profile channel; missing values are nullopt.
  std::map<std::string, MaybeValue> values;

  const MaybeValue& get(const std::string& channel) const {
    static const MaybeValue kMissing;
    auto it = values.find(channel);
    return it == values.end() ? kMissing : it->second;
  }

  std::optional<double> numeric(const std::string& channel) const {
    const auto& v = get(channel);
    if (!v) return std::nullopt;
    if (const double* d = std::get_if<double>(&*v)) return *d;
    return std::nullopt;
  }

  bool operator==(const DayRecord&) const = default;
};

struct LoadResult {
  std::vector<DayRecord> records;
  std::vector<std::string> warnings;
};

namespace detail {

inline bool is_missing_token(const DatasetProfile& p, std::string_view cell) {
  std::string t = to_lower(trim(cell));
  return std::find(p.missing_tokens.begin(), p.missing_tokens.end(), t) != p.missing_tokens.end();
}

}  // namespace detail

inline LoadResult parse_dataset(const DatasetProfile& profile, std::string_view text,
                                std::string_view source_name = "<memory>") {
  if (auto problems = validate_profile(profile); !problems.empty())
    throw ConfigError(fmt::format("invalid dataset profile '{}': {}", profile.dataset_name,
                                  fmt::join(problems, "; ")));
  csv::Table table = csv::parse(text);
  LoadResult result;

  auto pid_col = table.column(profile.participant_column);
  auto date_col = table.column(profile.date_column);
  if (!pid_col || !date_col)
    throw InputError(fmt::format("{}: missing required column '{}'", source_name,
                                 !pid_col ? profile.participant_column : profile.date_column));

  std::vector<std::pair<const ChannelSpec*, std::size_t>> mapped;
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    if (i == *pid_col || i == *date_col) continue;
    if (const ChannelSpec* spec = profile.channel(table.header[i]))
      mapped.emplace_back(spec, i);
    else
      result.warnings.push_back(fmt::format("{}: ignoring unknown column '{}'", source_name, table.header[i]));
  }
  for (const auto& spec : profile.channel_specs) {
    bool present = std::any_of(mapped.begin(), mapped.end(),
                               [&](const auto& m) { return m.first->name == spec.name; });
    if (!present)
      result.warnings.push_back(
          fmt::format("{}: channel '{}' has no column; all values missing", source_name, spec.name));
  }

  std::set<std::pair<std::string, Date>> seen;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    std::size_t line = table.lines[r];
    if (row.size() > table.header.size())
      throw InputError(fmt::format("{}:{}: row has {} fields, header has {}", source_name, line,
                                   row.size(), table.header.size()));
    auto cell = [&](std::size_t i) -> std::string_view {
      return i < row.size() ? std::string_view(row[i]) : std::string_view{};
    };

    DayRecord rec;
    rec.participant_id = trim(cell(*pid_col));
    if (rec.participant_id.empty())
      throw InputError(fmt::format("{}:{}: empty participant id", source_name, line));
    auto date = Date::try_parse(trim(cell(*date_col)));
    if (!date)
      throw InputError(fmt::format("{}:{}: invalid date '{}' for participant {}", source_name, line,
                                   cell(*date_col), rec.participant_id));
    rec.date = *date;
    if (!seen.insert({rec.participant_id, rec.date}).second)
      throw InputError(fmt::format("{}:{}: duplicate participant-day {}/{}", source_name, line,
                                   rec.participant_id, rec.date.str()));

    for (const auto& spec : profile.channel_specs) rec.values[spec.name] = std::nullopt;
    for (const auto& [spec, col] : mapped) {
      std::string_view raw = cell(col);
      if (detail::is_missing_token(profile, raw)) continue;
      if (spec->value_kind == ValueKind::numeric) {
        auto v = parse_double(raw);
        if (!v)
          throw InputError(fmt::format("{}:{}: non-numeric value '{}' in channel '{}' for {}/{}",
                                       source_name, line, raw, spec->name, rec.participant_id,
                                       rec.date.str()));
        if (!std::isfinite(*v)) continue;
        if (std::find(profile.missing_sentinels.begin(), profile.missing_sentinels.end(), *v) !=
            profile.missing_sentinels.end())
          continue;
        rec.values[spec->name] = Value{*v};
      } else {
        rec.values[spec->name] = Value{std::string(raw)};
      }
    }
    result.records.push_back(std::move(rec));
  }

  std::sort(result.records.begin(), result.records.end(), [](const DayRecord& a, const DayRecord& b) {
    return std::tie(a.participant_id, a.date) < std::tie(b.participant_id, b.date);
  });
  return result;
}

inline LoadResult load_dataset(const DatasetProfile& profile, const fs::path& source) {
  return parse_dataset(profile, read_file(source), source.string());
}

// Canonical on-disk form: participant, date, then channels in profile order;
// missing cells are empty.
inline std::string write_canonical(const DatasetProfile& profile, std::span<const DayRecord> records) {
  std::vector<std::string> header{profile.participant_column, profile.date_column};
  for (const auto& c : profile.channel_specs) header.push_back(c.name);
  std::vector<std::vector<std::string>> rows;
  rows.reserve(records.size());
  for (const auto& rec : records) {
    std::vector<std::string> row{rec.participant_id, rec.date.str()};
    for (const auto& c : profile.channel_specs) {
      const auto& v = rec.get(c.name);
      if (!v)
        row.emplace_back();
      else if (const double* d = std::get_if<double>(&*v))
        row.push_back(format_double(*d));
      else
        row.push_back(std::get<std::string>(*v));
    }
    rows.push_back(std::move(row));
  }
  return csv::format(header, rows);
}

// Per-participant, date-sorted view over loaded records.
class RecordIndex {
 public:
  RecordIndex() = default;
  explicit RecordIndex(std::span<const DayRecord> records) {
    for (const auto& r : records) by_participant_[r.participant_id].push_back(&r);
    for (auto& [_, v] : by_participant_)
      std::sort(v.begin(), v.end(), [](const DayRecord* a, const DayRecord* b) { return a->date < b->date; });
  }

  std::span<const DayRecord* const> participant(const std::string& id) const {
    auto it = by_participant_.find(id);
    if (it == by_participant_.end()) return {};
    return it->second;
  }

  const DayRecord* find(const std::string& id, Date date) const {
    auto days = participant(id);
    auto it = std::lower_bound(days.begin(), days.end(), date,
                               [](const DayRecord* r, Date d) { return r->date < d; });
    if (it == days.end() || (*it)->date != date) return nullptr;
    return *it;
  }

  std::vector<std::string> participants() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : by_participant_) out.push_back(id);
    return out;
  }

 private:
  std::map<std::string, std::vector<const DayRecord*>> by_participant_;
};

}  // namespace eo::ingest
