#include <gtest/gtest.h>

#include <cstdlib>

#include "support.hpp"

using namespace eo;
using eo::testing::fixture_config;
using eo::testing::read_tree;
using eo::testing::TempDir;
namespace pl = eo::pipeline;

namespace {

pl::PipelineOptions quiet(std::optional<std::size_t> parallelism = std::nullopt) {
  pl::PipelineOptions o;
  o.parallelism = parallelism;
  o.sleep = eo::testing::no_sleep;
  return o;
}

std::size_t csv_rows(const fs::path& p) { return csv::parse(read_file(p)).rows.size(); }

std::size_t column_of(const std::vector<std::string>& header, std::string_view name) {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw Error(fmt::format("no column {}", name));
  return static_cast<std::size_t>(it - header.begin());
}

std::size_t total_cell_n(const fs::path& cells_csv) {
  const auto t = csv::parse(read_file(cells_csv));
  const auto n_col = column_of(t.header, "n");
  std::size_t total = 0;
  for (const auto& row : t.rows) total += std::stoul(row[n_col]);
  return total;
}

}  // namespace

TEST(Pipeline, MockRunProducesEveryArtifact) {
  TempDir dir;
  pl::Pipeline p(fixture_config(5), dir.path(), quiet());
  const auto outcomes = p.run_all();
  ASSERT_EQ(outcomes.size(), pl::kStages.size());
  for (const auto& o : outcomes) EXPECT_EQ(o.status, pl::StageStatus::ran) << pl::to_string(o.stage);

  const auto& detect = outcomes[0].summary;
  const std::size_t sampled = detect["n_sampled"].get<std::size_t>();
  EXPECT_GT(detect["n_flags"].get<std::size_t>(), sampled);
  EXPECT_EQ(sampled, 30u);  // two datasets x three anomaly types x cap 5
  EXPECT_EQ(outcomes[1].summary["n_bundles"], sampled * 3);
  const std::size_t tasks = outcomes[1].summary["n_tasks"].get<std::size_t>();
  EXPECT_EQ(tasks, sampled * 3 * 2 * 3);
  EXPECT_EQ(outcomes[2].summary["n_generated"], tasks);
  EXPECT_EQ(outcomes[2].summary["n_failed"], 0);
  EXPECT_EQ(csv_rows(dir / "judge/judgments.csv"), tasks);
  EXPECT_EQ(outcomes[4].summary["n_scored"], tasks);
  EXPECT_EQ(outcomes[5].summary["n_pairs"], tasks / 2);
  EXPECT_EQ(total_cell_n(dir / "analyze/cells.csv"), tasks);

  for (const char* rel : {"config.json", "manifest.json", "report/table_grid.csv", "report/table_grid.md",
                          "report/dimension_cells.csv", "report/summary.json"})
    EXPECT_TRUE(fs::exists(dir / rel)) << rel;
  EXPECT_FALSE(fs::exists(dir / "generate/journal.jsonl"));

  const auto manifest = Json::parse(read_file(dir / "manifest.json"));
  EXPECT_EQ(manifest["template_version"], "eo-prompts-v1");
  EXPECT_EQ(manifest["rubric_version"], "eo-rubric-v1");
  EXPECT_EQ(manifest["seed"], 42);
  EXPECT_EQ(manifest["config_file"]["path"], "config.json");
  EXPECT_EQ(manifest["config_file"]["sha256"], sha256_file(dir / "config.json"));
  EXPECT_EQ(manifest["stages"]["judge"]["completed_at"], "1970-01-01T00:00:00Z");
}

TEST(Pipeline, RerunIsUpToDate) {
  TempDir dir;
  pl::Pipeline(fixture_config(2), dir.path(), quiet()).run_all();
  const auto before = read_tree(dir.path());
  pl::Pipeline again(fixture_config(2), dir.path(), quiet());
  for (const auto& o : again.run_all()) EXPECT_EQ(o.status, pl::StageStatus::up_to_date) << pl::to_string(o.stage);
  EXPECT_EQ(read_tree(dir.path()), before);
}

TEST(Pipeline, EditedOutputTriggersRerunOfThatStage) {
  TempDir dir;
  pl::Pipeline(fixture_config(2), dir.path(), quiet()).run_all();
  write_file(dir / "report/table_grid.md", "edited\n");
  pl::Pipeline again(fixture_config(2), dir.path(), quiet());
  const auto outcomes = again.run_all();
  for (std::size_t i = 0; i + 1 < outcomes.size(); ++i) EXPECT_EQ(outcomes[i].status, pl::StageStatus::up_to_date);
  EXPECT_EQ(outcomes.back().status, pl::StageStatus::ran);
  EXPECT_NE(read_file(dir / "report/table_grid.md"), "edited\n");
}

TEST(Pipeline, MissingUpstreamOutputIsReported) {
  TempDir dir;
  pl::Pipeline p(fixture_config(2), dir.path(), quiet());
  try {
    p.run(pl::Stage::judge);
    FAIL() << "expected MissingStageOutput";
  } catch (const pl::MissingStageOutput& e) {
    EXPECT_EQ(e.stage(), "scenarios");
  }
}

TEST(Pipeline, ParallelismDoesNotChangeOutputs) {
  TempDir a, b;
  pl::Pipeline(fixture_config(3), a.path(), quiet(1)).run_all();
  pl::Pipeline(fixture_config(3), b.path(), quiet(8)).run_all();
  EXPECT_EQ(read_tree(a.path()), read_tree(b.path()));
}

TEST(Pipeline, SeedChangeInvalidatesSampling) {
  TempDir dir;
  pl::Pipeline(fixture_config(2), dir.path(), quiet()).run_all();
  const auto sampled = read_file(dir / "detect/sampled_flags.csv");
  auto cfg = fixture_config(2);
  cfg.seed = 7;
  pl::Pipeline p(cfg, dir.path(), quiet());
  EXPECT_EQ(p.run(pl::Stage::detect).status, pl::StageStatus::ran);
  EXPECT_NE(read_file(dir / "detect/sampled_flags.csv"), sampled);
  EXPECT_EQ(p.run(pl::Stage::scenarios).status, pl::StageStatus::ran);
}

TEST(Config, HashIgnoresParallelism) {
  auto a = fixture_config();
  auto b = fixture_config();
  a.parallelism = 1;
  b.parallelism = 8;
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 43;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  auto j = Json::parse(read_file(eo::testing::fixture_dir() / "audit_config.json"));
  j["sead"] = 1;
  EXPECT_THROW(pl::AuditConfig::from_json(j, eo::testing::fixture_dir()), ConfigError);
  j.erase("sead");
  j["scoring"]["on_mismatch"] = "ignore";
  EXPECT_THROW(pl::AuditConfig::from_json(j, eo::testing::fixture_dir()), ConfigError);
  j["scoring"]["on_mismatch"] = "repair";
  j["analysis"]["cell_group_by"] = {"dataset", "participant"};
  EXPECT_THROW(pl::AuditConfig::from_json(j, eo::testing::fixture_dir()), ConfigError);
}

TEST(Config, SnapshotReloadsToTheSameHash) {
  TempDir dir;
  const auto cfg = fixture_config(2);
  pl::Pipeline p(cfg, dir.path(), quiet());
  const auto reloaded = pl::AuditConfig::load(dir / "config.json");
  EXPECT_EQ(reloaded.hash(), cfg.hash());
  EXPECT_EQ(p.manifest().config_hash, cfg.hash());
}

TEST(ConsistencyGate, CorruptedScoreIsExcludedDownstream) {
  TempDir dir;
  pl::Pipeline(fixture_config(2), dir.path(), quiet()).run_all();
  const std::size_t before = total_cell_n(dir / "analyze/cells.csv");

  auto table = csv::parse(read_file(dir / "judge/judgments.csv"));
  const auto eo_col = column_of(table.header, "eo_score");
  auto& cell = table.rows[5][eo_col];
  cell = cell == "0.9375" ? "0.0625" : "0.9375";
  write_file(dir / "judge/judgments.csv", csv::format(table.header, table.rows));

  pl::Pipeline p(fixture_config(2), dir.path(), quiet());
  const auto score = p.run(pl::Stage::score);
  EXPECT_EQ(score.status, pl::StageStatus::ran);
  EXPECT_EQ(score.summary["n_flagged"], 1);
  EXPECT_EQ(score.summary["n_scored"], before - 1);
  EXPECT_EQ(p.run(pl::Stage::analyze).status, pl::StageStatus::ran);
  EXPECT_EQ(total_cell_n(dir / "analyze/cells.csv"), before - 1);

  const auto consistency = csv::parse(read_file(dir / "score/consistency.csv"));
  std::size_t excluded = 0;
  for (const auto& row : consistency.rows)
    if (std::find(row.begin(), row.end(), "excluded") != row.end()) ++excluded;
  EXPECT_EQ(excluded, 1u);
}

// ---------------------------------------------------------------------------
// Live-endpoint path against a local server.

namespace {

class ScopedEnv {
 public:
  ScopedEnv(std::string name, const std::string& value) : name_(std::move(name)) { ::setenv(name_.c_str(), value.c_str(), 1); }
  ~ScopedEnv() { ::unsetenv(name_.c_str()); }

 private:
  std::string name_;
};

pl::AuditConfig http_config(const std::string& base_url, const std::string& key_env) {
  auto j = Json::parse(read_file(eo::testing::fixture_dir() / "audit_config.json"));
  j["per_type_cap"] = 1;
  auto point = [&](Json& m) {
    m["provider"] = "http";
    m["base_url"] = base_url;
    m["api_key_env"] = key_env;
  };
  for (auto& m : j["generation_models"]) point(m);
  point(j["judge_model"]);
  return pl::AuditConfig::from_json(j, eo::testing::fixture_dir());
}

}  // namespace

TEST(HttpPipeline, SecretNeverReachesTheRunDirectory) {
  eo::testing::FakeChatServer server;
  const std::string secret = "sk-local-9f3c2b7e5d1a";
  ScopedEnv env("EO_PIPELINE_TEST_KEY", secret);
  TempDir dir;
  pl::Pipeline p(http_config(server.base_url(), "EO_PIPELINE_TEST_KEY"), dir.path(), quiet(4));
  const auto outcomes = p.run_all();
  const std::size_t tasks = outcomes[1].summary["n_tasks"].get<std::size_t>();
  EXPECT_EQ(outcomes[2].summary["n_generated"], tasks);
  EXPECT_EQ(csv_rows(dir / "judge/judgments.csv"), tasks);

  const auto auth = server.auth_headers();
  ASSERT_FALSE(auth.empty());
  for (const auto& h : auth) EXPECT_EQ(h, "Bearer " + secret);

  for (const auto& [rel, text] : read_tree(dir.path())) EXPECT_EQ(text.find(secret), std::string::npos) << rel;
  EXPECT_NE(read_file(dir / "config.json").find("EO_PIPELINE_TEST_KEY"), std::string::npos);
}

TEST(HttpPipeline, MatchesTheOfflineRunThroughTheWire) {
  eo::testing::FakeChatServer server;
  ScopedEnv env("EO_PIPELINE_TEST_KEY", "k");
  TempDir http_dir, mock_dir;
  auto cfg = http_config(server.base_url(), "EO_PIPELINE_TEST_KEY");
  pl::Pipeline(cfg, http_dir.path(), quiet(2)).run_all();
  cfg.use_mock_endpoints();
  pl::Pipeline(cfg, mock_dir.path(), quiet(2)).run_all();
  EXPECT_EQ(read_file(http_dir / "judge/judgments.csv"), read_file(mock_dir / "judge/judgments.csv"));
  EXPECT_EQ(read_file(http_dir / "report/table_grid.csv"), read_file(mock_dir / "report/table_grid.csv"));
}

TEST(HttpPipeline, MissingKeyStopsBeforeAnyRequest) {
  eo::testing::FakeChatServer server;
  ::unsetenv("EO_PIPELINE_ABSENT_KEY");
  TempDir dir;
  pl::Pipeline p(http_config(server.base_url(), "EO_PIPELINE_ABSENT_KEY"), dir.path(), quiet());
  p.run(pl::Stage::detect);
  p.run(pl::Stage::scenarios);
  EXPECT_THROW(p.run(pl::Stage::generate), ConfigError);
  EXPECT_TRUE(server.bodies().empty());
}
