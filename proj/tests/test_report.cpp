#include <gtest/gtest.h>

#include "support.hpp"

using namespace eo;
using analysis::GroupKey;
using analysis::PairedComparison;

namespace {

PairedComparison comparison(std::string dataset, std::string model, std::optional<std::string> tier, double open,
                            double bounded, std::optional<double> t, std::optional<double> p) {
  PairedComparison c;
  c.group.fields = {{GroupKey::dataset, std::move(dataset)}, {GroupKey::generation_model, std::move(model)}};
  if (tier) c.group.fields.emplace_back(GroupKey::evidence_tier, *tier);
  c.n_pairs = 30;
  c.mean_open = open;
  c.mean_bounded = bounded;
  c.delta = bounded - open;
  c.diff_pct = analysis::diff_pct(open, bounded);
  c.test.t = t;
  c.test.p = p;
  c.test.df = 29;
  c.test.status = t ? analysis::TestStatus::ok : analysis::TestStatus::zero_variance;
  c.stars = analysis::stars(p);
  return c;
}

struct Grid {
  std::vector<PairedComparison> by_tier, overall;
};

Grid sample_grid() {
  Grid g;
  for (const char* ds : {"GLOBEM-like", "StudentLife-like"})
    for (const char* model : {"llama", "gpt"}) {
      for (const char* tier : {"E3", "E1", "E2"})
        g.by_tier.push_back(comparison(ds, model, tier, 0.168, 0.098, -4.2, 0.0004));
      g.overall.push_back(comparison(ds, model, std::nullopt, 0.4375, 0.3125, -2.5, 0.02));
    }
  return g;
}

}  // namespace

TEST(GridRows, OrderedByModelThenTierWithOverallLast) {
  const auto g = sample_grid();
  const auto rows = report::grid_rows(g.by_tier, g.overall);
  ASSERT_EQ(rows.size(), 16u);
  std::vector<std::string> seen;
  for (const auto& r : rows) seen.push_back(r.model + "/" + r.tier + "/" + r.dataset);
  EXPECT_EQ(seen[0], "gpt/E1/GLOBEM-like");
  EXPECT_EQ(seen[1], "gpt/E1/StudentLife-like");
  EXPECT_EQ(seen[4], "gpt/E3/GLOBEM-like");
  EXPECT_EQ(seen[6], "gpt/Overall/GLOBEM-like");
  EXPECT_EQ(seen[7], "gpt/Overall/StudentLife-like");
  EXPECT_EQ(seen[8], "llama/E1/GLOBEM-like");
  EXPECT_EQ(seen[15], "llama/Overall/StudentLife-like");
}

TEST(GridCsv, FormatsDiffPctAtOneDecimal) {
  const auto g = sample_grid();
  const auto text = report::grid_csv(report::grid_rows(g.by_tier, g.overall));
  const auto table = csv::parse(text);
  ASSERT_EQ(table.rows.size(), 16u);
  EXPECT_EQ(table.header[0], "generation_model");
  EXPECT_EQ(table.header[7], "diff_pct");
  EXPECT_EQ(table.rows[0][7], "-41.7");
  EXPECT_EQ(table.rows[0][11], "***");
  EXPECT_EQ(table.rows[6][7], "-28.6");
  EXPECT_EQ(table.rows[6][11], "*");
  EXPECT_EQ(table.rows[6][12], "ok");
}

TEST(GridMarkdown, ThreeDecimalMeansAndStarredT) {
  auto g = sample_grid();
  g.overall[0] = comparison("GLOBEM-like", "llama", std::nullopt, 0.0, 0.0, std::nullopt, std::nullopt);
  const auto md = report::grid_markdown(report::grid_rows(g.by_tier, g.overall));
  EXPECT_NE(md.find("| Model | Tier | GLOBEM-like EO open |"), std::string::npos);
  EXPECT_NE(md.find("| gpt | E1 | 0.168 | 0.098 | -41.7 | -4.20*** |"), std::string::npos);
  EXPECT_NE(md.find("| gpt | Overall | 0.438 | 0.312 | -28.6 | -2.50* |"), std::string::npos);
  EXPECT_NE(md.find("| llama | Overall | 0.000 | 0.000 | n/a | n/a |"), std::string::npos);
  EXPECT_NE(md.find("two-sided"), std::string::npos);
}

TEST(GridMarkdown, MissingDatasetCellsStayBlank) {
  Grid g;
  g.by_tier.push_back(comparison("A", "m", "E1", 0.2, 0.1, -3.0, 0.004));
  g.by_tier.push_back(comparison("B", "m", "E2", 0.2, 0.1, -3.0, 0.004));
  const auto md = report::grid_markdown(report::grid_rows(g.by_tier, g.overall));
  EXPECT_NE(md.find("| m | E1 | 0.200 | 0.100 | -50.0 | -3.00** | | | | |"), std::string::npos) << md;
}

TEST(CellTables, WideAndLongFormsAgree) {
  const auto& rubric = rubric::RubricDefinition::builtin();
  std::vector<rubric::RubricJudgment> js;
  for (int i = 0; i < 8; ++i)
    js.push_back(eo::testing::make_judgment(
        eo::testing::make_key(i, kPolicies[i % 2], i < 4 ? "m1" : "m2"), 0x1001u << (i % 3)));
  const std::vector<GroupKey> by{GroupKey::generation_model, GroupKey::prompt_policy};
  const auto cells = analysis::aggregate_cells(js, by);
  ASSERT_EQ(cells.size(), 4u);

  const auto wide = csv::parse(report::cells_csv(cells, rubric, by));
  ASSERT_EQ(wide.rows.size(), 4u);
  EXPECT_EQ(wide.header, (std::vector<std::string>{"generation_model", "prompt_policy", "n", "mean_eo",
                                               "causal_attribution", "missing_context", "confidence",
                                               "temporal_inference", "diagnostic_inference"}));
  const auto long_form = csv::parse(report::dimension_cells_csv(cells, rubric, by));
  ASSERT_EQ(long_form.rows.size(), 4u * 5u);
  EXPECT_EQ(long_form.header.back(), "mean_score");
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t d = 0; d < 5; ++d) {
      const auto& row = long_form.rows[c * 5 + d];
      EXPECT_EQ(row[0], wide.rows[c][0]);
      EXPECT_EQ(row[1], wide.rows[c][1]);
      EXPECT_EQ(row[2], wide.rows[c][2]);
      EXPECT_EQ(row[3], rubric.dimensions()[d].name);
      EXPECT_EQ(row[4], wide.rows[c][4 + d]);
    }
}

TEST(EmitReport, WritesFourFiles) {
  eo::testing::TempDir dir;
  const auto g = sample_grid();
  report::ReportInputs in;
  in.by_tier = g.by_tier;
  in.overall = g.overall;
  in.run_summary = {{"run_id", "run-test"}};
  const auto written = report::emit_report(in, dir / "report");
  ASSERT_EQ(written.size(), 4u);
  for (const auto& p : written) EXPECT_TRUE(fs::exists(p)) << p;
  const auto summary = Json::parse(read_file(dir / "report/summary.json"));
  EXPECT_EQ(summary["run_id"], "run-test");
  EXPECT_EQ(summary["p_values"], "two-sided");
  EXPECT_EQ(summary["overall"].size(), 4u);
  EXPECT_EQ(summary["n_cells"], 0);
}
