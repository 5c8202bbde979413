#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "eo_audit/common.hpp"
#include "eo_audit/csv.hpp"
#include "eo_audit/paired_analysis.hpp"

namespace eo::report {

using analysis::CellSummary;
using analysis::GroupKey;
using analysis::PairedComparison;

inline constexpr std::string_view kOverall = "Overall";

struct GridRow {
  std::string model;
  std::string tier;  // tier label or "Overall"
  std::string dataset;
  const PairedComparison* cmp = nullptr;
};

inline std::string opt_num(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

inline std::string diff_pct_display(const std::optional<double>& v) { return v ? format_fixed(*v, 1) : "n/a"; }

/// Rows ordered by model, then tiers with the pooled row last, then dataset.
/// `by_tier` is grouped by (dataset, model, tier); `overall` by (dataset, model).
inline std::vector<GridRow> grid_rows(const std::vector<PairedComparison>& by_tier,
                                      const std::vector<PairedComparison>& overall) {
  std::vector<GridRow> rows;
  for (const auto& c : by_tier)
    rows.push_back({c.group.get(GroupKey::generation_model).value_or(""), c.group.get(GroupKey::evidence_tier).value_or(""),
                    c.group.get(GroupKey::dataset).value_or(""), &c});
  for (const auto& c : overall)
    rows.push_back({c.group.get(GroupKey::generation_model).value_or(""), std::string(kOverall),
                    c.group.get(GroupKey::dataset).value_or(""), &c});
  std::stable_sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) {
    return std::tuple(a.model, a.tier == kOverall, a.tier, a.dataset) <
           std::tuple(b.model, b.tier == kOverall, b.tier, b.dataset);
  });
  return rows;
}

inline std::string grid_csv(const std::vector<GridRow>& rows) {
  const std::vector<std::string> header{"generation_model", "evidence_tier", "dataset", "n_pairs", "eo_open",
                                        "eo_bounded",       "delta",         "diff_pct", "t",      "df",
                                        "p_two_sided",      "stars",         "status"};
  std::vector<std::vector<std::string>> out;
  for (const auto& r : rows) {
    const auto& c = *r.cmp;
    out.push_back({r.model, r.tier, r.dataset, std::to_string(c.n_pairs), format_double(c.mean_open),
                   format_double(c.mean_bounded), format_double(c.delta),
                   c.diff_pct ? format_fixed(*c.diff_pct, 1) : "", opt_num(c.test.t),
                   c.test.status == analysis::TestStatus::insufficient_pairs ? "" : std::to_string(c.test.df),
                   opt_num(c.test.p), c.stars, std::string(analysis::to_string(c.test.status))});
  }
  return csv::format(header, out);
}

// Model x tier rows, one column group per dataset, means at three decimals.
inline std::string grid_markdown(const std::vector<GridRow>& rows) {
  std::set<std::string> datasets;
  std::map<std::pair<std::string, std::string>, std::map<std::string, const PairedComparison*>> table;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& r : rows) {
    datasets.insert(r.dataset);
    auto key = std::pair(r.model, r.tier);
    if (!table.count(key)) order.push_back(key);
    table[key][r.dataset] = r.cmp;
  }
  std::string md = "| Model | Tier |";
  std::string rule = "|---|---|";
  for (const auto& ds : datasets) {
    md += fmt::format(" {0} EO open | {0} EO bounded | {0} Diff% | {0} t |", ds);
    rule += "---:|---:|---:|---:|";
  }
  md += "\n" + rule + "\n";
  for (const auto& key : order) {
    md += fmt::format("| {} | {} |", key.first, key.second);
    for (const auto& ds : datasets) {
      auto it = table[key].find(ds);
      if (it == table[key].end()) {
        md += " | | | |";
        continue;
      }
      const auto& c = *it->second;
      std::string t = c.test.t ? fmt::format("{}{}", format_fixed(*c.test.t, 2), c.stars) : "n/a";
      md += fmt::format(" {} | {} | {} | {} |", format_fixed(c.mean_open, 3), format_fixed(c.mean_bounded, 3),
                        diff_pct_display(c.diff_pct), t);
    }
    md += "\n";
  }
  md += "\nStars: * p<0.05, ** p<0.01, *** p<0.001 (two-sided paired t-test). Diff% is the change from open to bounded.\n";
  return md;
}

inline std::vector<std::string> group_header(const analysis::Group& g) {
  std::vector<std::string> out;
  for (const auto& [k, v] : g.fields) out.emplace_back(analysis::to_string(k));
  return out;
}

inline std::vector<std::string> group_values(const analysis::Group& g) {
  std::vector<std::string> out;
  for (const auto& [k, v] : g.fields) out.push_back(v);
  return out;
}

// Long form, one row per cell and dimension.
inline std::string dimension_cells_csv(const std::vector<CellSummary>& cells, const rubric::RubricDefinition& rubric,
                                       std::span<const GroupKey> group_by) {
  std::vector<std::string> header;
  for (GroupKey k : analysis::kGroupOrder)
    if (std::find(group_by.begin(), group_by.end(), k) != group_by.end()) header.emplace_back(analysis::to_string(k));
  for (const char* c : {"n", "dimension", "mean_score"}) header.emplace_back(c);
  std::vector<std::vector<std::string>> rows;
  for (const auto& cell : cells) {
    for (std::size_t d = 0; d < rubric.dimensions().size(); ++d) {
      auto row = group_values(cell.group);
      row.push_back(std::to_string(cell.n));
      row.push_back(rubric.dimensions()[d].name);
      row.push_back(format_double(cell.dimension_means[d]));
      rows.push_back(std::move(row));
    }
  }
  return csv::format(header, rows);
}

inline std::string cells_csv(const std::vector<CellSummary>& cells, const rubric::RubricDefinition& rubric,
                             std::span<const GroupKey> group_by) {
  std::vector<std::string> header;
  for (GroupKey k : analysis::kGroupOrder)
    if (std::find(group_by.begin(), group_by.end(), k) != group_by.end()) header.emplace_back(analysis::to_string(k));
  header.emplace_back("n");
  header.emplace_back("mean_eo");
  for (const auto& d : rubric.dimensions()) header.push_back(d.name);
  std::vector<std::vector<std::string>> rows;
  for (const auto& cell : cells) {
    auto row = group_values(cell.group);
    row.push_back(std::to_string(cell.n));
    row.push_back(format_double(cell.mean_eo));
    for (double d : cell.dimension_means) row.push_back(format_double(d));
    rows.push_back(std::move(row));
  }
  return csv::format(header, rows);
}

inline Json comparison_json(const PairedComparison& c) {
  Json j;
  for (const auto& [k, v] : c.group.fields) j[std::string(analysis::to_string(k))] = v;
  j["n_pairs"] = c.n_pairs;
  j["eo_open"] = c.mean_open;
  j["eo_bounded"] = c.mean_bounded;
  j["delta"] = c.delta;
  j["diff_pct"] = c.diff_pct ? Json(*c.diff_pct) : Json(nullptr);
  j["t"] = c.test.t ? Json(*c.test.t) : Json(nullptr);
  j["df"] = c.test.df;
  j["p_two_sided"] = c.test.p ? Json(*c.test.p) : Json(nullptr);
  j["stars"] = c.stars;
  j["status"] = analysis::to_string(c.test.status);
  return j;
}

struct ReportInputs {
  std::vector<PairedComparison> by_tier;
  std::vector<PairedComparison> overall;
  std::vector<CellSummary> cells;
  std::vector<GroupKey> cell_group_by;
  Json run_summary = Json::object();  // extra fields merged into summary.json
};

inline std::vector<fs::path> emit_report(const ReportInputs& in, const fs::path& dir,
                                         const rubric::RubricDefinition& rubric = rubric::RubricDefinition::builtin()) {
  const auto rows = grid_rows(in.by_tier, in.overall);
  Json summary = in.run_summary;
  summary["p_values"] = "two-sided";
  summary["overall"] = Json::array();
  for (const auto& c : in.overall) summary["overall"].push_back(comparison_json(c));
  summary["n_cells"] = in.cells.size();

  std::vector<std::pair<fs::path, std::string>> files{
      {dir / "table_grid.csv", grid_csv(rows)},
      {dir / "table_grid.md", grid_markdown(rows)},
      {dir / "dimension_cells.csv", dimension_cells_csv(in.cells, rubric, in.cell_group_by)},
      {dir / "summary.json", summary.dump(2) + "\n"}};
  std::vector<fs::path> written;
  for (const auto& [path, text] : files) {
    write_file(path, text);
    written.push_back(path);
  }
  return written;
}

}  // namespace eo::report
