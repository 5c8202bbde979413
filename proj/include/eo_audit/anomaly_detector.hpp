#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "eo_audit/common.hpp"
#include "eo_audit/csv.hpp"
#include "eo_audit/hash.hpp"
#include "eo_audit/sensing_ingest.hpp"

namespace eo::detect {

struct BaselineStats {
  double mean = 0;
  double sd = 0;  // sample (n-1) standard deviation
  std::size_t n_obs = 0;

  bool operator==(const BaselineStats&) const = default;
};

struct DetectionParams {
  double threshold = -1.0;
  int window_days = 14;
  std::size_t min_obs = 5;
};

struct SeriesPoint {
  Date date;
  std::optional<double> value;
};

/// Trailing-window baseline for each point of a date-sorted series.
///
/// The window for date d covers the calendar days [d - window_days, d - 1];
/// the target day itself never contributes. Entry i is empty when the window
/// holds fewer than `min_obs` observed values (never fewer than 2) or when
/// their standard deviation is zero.
inline std::vector<std::optional<BaselineStats>> rolling_baseline(std::span<const SeriesPoint> series,
                                                                  int window_days, std::size_t min_obs) {
  if (window_days < 1) throw ConfigError("window_days must be >= 1");
  const std::size_t needed = std::max<std::size_t>(min_obs, 2);
  std::vector<std::optional<BaselineStats>> out(series.size());
  std::size_t lo = 0;
  std::vector<double> window;
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (i > 0 && series[i].date <= series[i - 1].date)
      throw ConfigError("rolling_baseline: series must be strictly increasing in date");
    const Date start = series[i].date - window_days;
    while (lo < i && series[lo].date < start) ++lo;
    window.clear();
    for (std::size_t k = lo; k < i; ++k)
      if (series[k].value) window.push_back(*series[k].value);
    if (window.size() < needed) continue;
    double sum = 0;
    for (double v : window) sum += v;
    const double mean = sum / static_cast<double>(window.size());
    double ss = 0;
    for (double v : window) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(window.size() - 1));
    if (!(sd > 0)) continue;
    out[i] = BaselineStats{mean, sd, window.size()};
  }
  return out;
}

struct AnomalyFlag {
  std::string dataset;
  std::string participant_id;
  Date date;
  std::string metric;
  double value = 0;
  double z = 0;
  BaselineStats baseline;
  std::string scenario_id;

  bool operator==(const AnomalyFlag&) const = default;
};

// "sc-" + first 16 hex digits of SHA-256 over the identifying tuple.
inline std::string make_scenario_id(std::string_view dataset, std::string_view participant, Date date,
                                    std::string_view metric) {
  std::string key = fmt::format("{}\x1f{}\x1f{}\x1f{}", dataset, participant, date.str(), metric);
  return "sc-" + sha256_hex(key).substr(0, 16);
}

inline std::vector<SeriesPoint> participant_series(std::span<const ingest::DayRecord* const> days,
                                                   const std::string& channel) {
  std::vector<SeriesPoint> s;
  s.reserve(days.size());
  for (const auto* r : days) s.push_back({r->date, r->numeric(channel)});
  return s;
}

/// z-score of `channel` on `date` against the participant's trailing baseline;
/// empty when the value is missing or no usable baseline exists.
struct PointScore {
  std::optional<double> value;
  std::optional<BaselineStats> baseline;
  std::optional<double> z;
};

inline PointScore score_point(const ingest::RecordIndex& index, const std::string& participant,
                              Date date, const std::string& channel, const DetectionParams& params) {
  auto days = index.participant(participant);
  PointScore out;
  if (days.empty()) return out;
  // only days up to and including the target matter
  auto end = std::upper_bound(days.begin(), days.end(), date,
                              [](Date d, const ingest::DayRecord* r) { return d < r->date; });
  std::vector<SeriesPoint> series = participant_series({days.begin(), end}, channel);
  if (series.empty() || series.back().date != date) {
    series.push_back({date, std::nullopt});
  }
  auto stats = rolling_baseline(series, params.window_days, params.min_obs);
  out.value = series.back().value;
  out.baseline = stats.back();
  if (out.value && out.baseline) out.z = (*out.value - out.baseline->mean) / out.baseline->sd;
  return out;
}

inline std::vector<AnomalyFlag> detect_anomalies(std::span<const ingest::DayRecord> records,
                                                 const ingest::DatasetProfile& profile,
                                                 const std::string& metric,
                                                 const DetectionParams& params = {}) {
  const ingest::AnomalyMetric* m = profile.metric(metric);
  if (!m)
    throw ConfigError(fmt::format("unknown anomaly metric '{}' for dataset '{}'", metric,
                                  profile.dataset_name));
  ingest::RecordIndex index(records);
  std::vector<AnomalyFlag> flags;
  for (const auto& pid : index.participants()) {
    auto days = index.participant(pid);
    auto series = participant_series(days, m->source_channel);
    auto stats = rolling_baseline(series, params.window_days, params.min_obs);
    for (std::size_t i = 0; i < series.size(); ++i) {
      if (!series[i].value || !stats[i]) continue;
      const double z = (*series[i].value - stats[i]->mean) / stats[i]->sd;
      if (!std::isfinite(z) || !(z <= params.threshold)) continue;
      flags.push_back({profile.dataset_name, pid, series[i].date, metric, *series[i].value, z, *stats[i],
                       make_scenario_id(profile.dataset_name, pid, series[i].date, metric)});
    }
  }
  return flags;
}

// Canonical flag order: dataset, metric (activity, sleep, affect), participant, date.
inline bool canonical_less(const AnomalyFlag& a, const AnomalyFlag& b) {
  auto ra = ingest::metric_rank(a.metric), rb = ingest::metric_rank(b.metric);
  return std::tie(a.dataset, ra, a.metric, a.participant_id, a.date) <
         std::tie(b.dataset, rb, b.metric, b.participant_id, b.date);
}

/// Unbiased integer in [0, bound) from a 64-bit engine, by rejection of the
/// low residue band. Produces the same sequence on every standard library.
inline std::uint64_t bounded_draw(std::mt19937_64& gen, std::uint64_t bound) {
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = gen();
    if (r >= threshold) return r % bound;
  }
}

/// Stratified sample of at most `per_type_cap` flags per (dataset, metric).
///
/// Contract, pinned for reproducibility: flags are put in canonical order and
/// de-duplicated by scenario_id; each stratum gets a fresh std::mt19937_64
/// seeded with `seed`; the first min(cap, n) slots of a partial Fisher-Yates
/// shuffle (bounded_draw for each swap index) form the sample; the result is
/// returned in canonical order.
inline std::vector<AnomalyFlag> stratified_sample(std::vector<AnomalyFlag> flags, std::size_t per_type_cap,
                                                  std::uint64_t seed) {
  std::sort(flags.begin(), flags.end(), canonical_less);
  {
    std::set<std::string> seen;
    std::vector<AnomalyFlag> unique;
    for (auto& f : flags)
      if (seen.insert(f.scenario_id).second) unique.push_back(std::move(f));
    flags = std::move(unique);
  }
  std::vector<AnomalyFlag> sample;
  std::size_t begin = 0;
  while (begin < flags.size()) {
    std::size_t end = begin;
    while (end < flags.size() && flags[end].dataset == flags[begin].dataset &&
           flags[end].metric == flags[begin].metric)
      ++end;
    const std::size_t n = end - begin;
    const std::size_t k = std::min(per_type_cap, n);
    std::vector<std::size_t> slots(n);
    for (std::size_t i = 0; i < n; ++i) slots[i] = begin + i;
    std::mt19937_64 gen(seed);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(bounded_draw(gen, n - i));
      std::swap(slots[i], slots[j]);
    }
    for (std::size_t i = 0; i < k; ++i) sample.push_back(flags[slots[i]]);
    begin = end;
  }
  std::sort(sample.begin(), sample.end(), canonical_less);
  return sample;
}

inline const std::vector<std::string>& flag_columns() {
  static const std::vector<std::string> cols{"dataset", "participant_id", "date", "metric", "value", "z",
                                             "baseline_mean", "baseline_sd", "n_obs", "scenario_id"};
  return cols;
}

inline std::string write_flags(std::span<const AnomalyFlag> flags) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& f : flags)
    rows.push_back({f.dataset, f.participant_id, f.date.str(), f.metric, format_double(f.value),
                    format_double(f.z), format_double(f.baseline.mean), format_double(f.baseline.sd),
                    std::to_string(f.baseline.n_obs), f.scenario_id});
  return csv::format(flag_columns(), rows);
}

inline std::vector<AnomalyFlag> read_flags(std::string_view text) {
  csv::Table t = csv::parse(text);
  if (t.header != flag_columns()) throw InputError("flags artifact: unexpected header");
  std::vector<AnomalyFlag> flags;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    if (row.size() != flag_columns().size())
      throw InputError(fmt::format("flags artifact line {}: wrong field count", t.lines[r]));
    auto num = [&](std::size_t i) {
      auto v = parse_double(row[i]);
      if (!v) throw InputError(fmt::format("flags artifact line {}: bad number '{}'", t.lines[r], row[i]));
      return *v;
    };
    AnomalyFlag f;
    f.dataset = row[0];
    f.participant_id = row[1];
    f.date = Date::parse(row[2]);
    f.metric = row[3];
    f.value = num(4);
    f.z = num(5);
    f.baseline = {num(6), num(7), static_cast<std::size_t>(num(8))};
    f.scenario_id = row[9];
    flags.push_back(std::move(f));
  }
  return flags;
}

}  // namespace eo::detect
