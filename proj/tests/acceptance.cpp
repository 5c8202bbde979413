// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Reference values come from Boost and brute-force computations
// written here, never from the library under test.

#include <cmath>

#include <boost/math/statistics/bivariate_statistics.hpp>
#include <boost/math/statistics/t_test.hpp>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace eo;
using eo::testing::make_judgment;
using eo::testing::make_key;
using eo::testing::popcount16;

namespace {

// Collects the reasons a criterion failed; empty means pass.
struct Check {
  std::vector<std::string> problems;

  void require(bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  }
  template <class A, class B>
  void equal(const A& got, const B& want, const std::string& what) {
    if (!(got == want)) {
      std::ostringstream os;
      os << what << ": got " << got << ", want " << want;
      problems.push_back(os.str());
    }
  }
};

using Criterion = std::function<void(Check&)>;

bool run_criterion(int id, const std::string& desc, const Criterion& fn) {
  Check c;
  try {
    fn(c);
  } catch (const std::exception& e) {
    c.problems.push_back(std::string("exception: ") + e.what());
  }
  const bool pass = c.problems.empty();
  std::cout << fmt::format("[AC-{:02d}] {} {}", id, pass ? "PASS" : "FAIL", desc) << '\n';
  for (std::size_t i = 0; i < c.problems.size() && i < 10; ++i) std::cout << "        " << c.problems[i] << '\n';
  return pass;
}

// -- 1 -----------------------------------------------------------------------

void score_lattice(Check& c) {
  const auto start = std::chrono::steady_clock::now();
  const auto& rubric = rubric::RubricDefinition::builtin();
  c.equal(rubric.size(), 16u, "item count");
  std::set<double> distinct;
  std::size_t identity_failures = 0, count_failures = 0;
  for (std::uint32_t mask = 0; mask < (1u << 16); ++mask) {
    const auto j = make_judgment(make_key(0), mask);
    const double eo = rubric::compute_eo_score(j);
    if (eo != popcount16(mask) / 16.0) ++count_failures;
    distinct.insert(eo);
    const auto d = rubric::compute_dimension_scores(j);
    const double weighted = (3 * d[0] + 3 * d[1] + 3 * d[2] + 4 * d[3] + 3 * d[4]) / 16.0;
    if (std::fabs(weighted - eo) > 1e-12) ++identity_failures;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  c.equal(distinct.size(), 17u, "distinct scores");
  c.equal(count_failures, 0u, "masks where score != yes/16");
  c.equal(identity_failures, 0u, "masks violating the weighted identity");
  c.require(*distinct.begin() == 0.0 && *distinct.rbegin() == 1.0, "range is not [0, 1]");
  c.require(secs < 5.0, fmt::format("took {:.2f}s", secs));
}

// -- 2 -----------------------------------------------------------------------

void display_figures(Check& c) {
  c.equal(format_fixed(*analysis::diff_pct(0.168, 0.098), 1), std::string("-41.7"), "diff_pct 0.168 -> 0.098");
  c.equal(format_fixed(*analysis::diff_pct(0.139, 0.083), 1), std::string("-40.3"), "diff_pct 0.139 -> 0.083");
  c.equal(format_fixed(*analysis::diff_pct(0.142, 0.090), 1), std::string("-36.6"), "diff_pct 0.142 -> 0.090");
  const std::pair<std::uint32_t, const char*> counts[] = {{0x7F, "0.438"}, {0x1F, "0.312"}, {0x3F, "0.375"}};
  for (const auto& [mask, want] : counts)
    c.equal(format_fixed(rubric::compute_eo_score(make_judgment(make_key(0), mask)), 3), std::string(want),
            fmt::format("{} items", popcount16(mask)));
}

// -- 3 -----------------------------------------------------------------------

std::vector<detect::SeriesPoint> random_series(std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> noise(0, 1);
  const double level = 50 + 5000 * u(gen), spread = 1 + 800 * u(gen);
  const double p_gap = 0.3 * u(gen), p_missing = 0.5 * u(gen);
  const int n = 20 + static_cast<int>(180 * u(gen));
  std::vector<detect::SeriesPoint> s;
  Date d(2018, 1, 1);
  for (int i = 0; i < n; ++i) {
    d = d + 1;
    if (u(gen) < p_gap) continue;
    std::optional<double> v;
    if (u(gen) >= p_missing) v = level + spread * noise(gen);
    s.push_back({d, v});
  }
  return s;
}

std::vector<ingest::DayRecord> as_records(const std::vector<detect::SeriesPoint>& s) {
  std::vector<ingest::DayRecord> out;
  for (const auto& p : s) {
    ingest::DayRecord r{"p", p.date, {}};
    r.values["steps"] = p.value ? ingest::MaybeValue(*p.value) : ingest::MaybeValue{};
    out.push_back(std::move(r));
  }
  return out;
}

void anomaly_detection(Check& c) {
  const auto profile = eo::testing::tiny_profile();
  std::mt19937_64 gen(99);
  std::size_t checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto series = random_series(gen);
    const auto stats = detect::rolling_baseline(series, 14, 5);
    for (std::size_t i = 0; i < series.size(); ++i) {
      const auto want = eo::testing::oracle_baseline(series, series[i].date, 14, 5);
      if (stats[i].has_value() != want.has_value()) {
        c.problems.push_back(fmt::format("trial {} point {}: baseline presence differs", trial, i));
        continue;
      }
      if (!want) continue;
      ++checked;
      if (stats[i]->n_obs != want->n || !eo::testing::close_rel(stats[i]->mean, want->mean, 1e-9) ||
          !eo::testing::close_rel(stats[i]->sd, want->sd, 1e-9))
        c.problems.push_back(fmt::format("trial {} point {}: baseline differs", trial, i));
    }
    std::vector<Date> expected;
    for (const auto& p : series) {
      const auto b = eo::testing::oracle_baseline(series, p.date, 14, 5);
      if (p.value && b && (*p.value - b->mean) / b->sd <= -1.0) expected.push_back(p.date);
    }
    const auto flags = detect::detect_anomalies(as_records(series), profile, "activity");
    std::vector<Date> got;
    for (const auto& f : flags) got.push_back(f.date);
    c.require(got == expected, fmt::format("trial {}: flagged days differ", trial));

    // z is unchanged by positive affine maps and negated by negative ones.
    for (double a : {3.7, -0.25}) {
      auto mapped = series;
      for (auto& p : mapped)
        if (p.value) p.value = a * *p.value + 1234.5;
      const auto s1 = detect::rolling_baseline(mapped, 14, 5);
      for (std::size_t i = 0; i < series.size(); ++i) {
        if (!stats[i] || !series[i].value) continue;
        const double z0 = (*series[i].value - stats[i]->mean) / stats[i]->sd;
        const double z1 = (*mapped[i].value - s1[i]->mean) / s1[i]->sd;
        if (std::fabs(z1 - (a > 0 ? z0 : -z0)) > 1e-7 * std::max(1.0, std::fabs(z0)))
          c.problems.push_back(fmt::format("trial {} point {}: z not affine-covariant", trial, i));
      }
    }
  }
  c.require(checked > 1000, fmt::format("only {} baselines checked", checked));

  // Baseline 8, 12, 8, 12, 10 has mean 10 and sample sd 2.
  auto boundary = [&](double target) {
    std::vector<detect::SeriesPoint> s;
    Date d(2018, 4, 1);
    for (double v : {8.0, 12.0, 8.0, 12.0, 10.0, target}) {
      s.push_back({d, v});
      d = d + 1;
    }
    return detect::detect_anomalies(as_records(s), profile, "activity");
  };
  const auto at = boundary(8.0);
  c.require(at.size() == 1 && at[0].z == -1.0, "z = -1 exactly is not flagged");
  c.require(boundary(8.02).empty(), "z = -0.99 is flagged");
}

// -- 4 -----------------------------------------------------------------------

void factorial_counts(Check& c) {
  const std::vector<std::string> tiers{"E1", "E2", "E3"}, models{"gpt", "gemini", "llama"};
  const std::vector<PromptPolicy> policies(kPolicies.begin(), kPolicies.end());
  for (const auto& [n, want] : {std::pair{229u, 4122u}, std::pair{300u, 5400u}}) {
    std::vector<std::string> ids;
    for (unsigned i = 0; i < n; ++i) ids.push_back(fmt::format("sc-{:05d}", i));
    const auto tasks = scenario::expand_conditions(ids, tiers, policies, models);
    c.equal(tasks.size(), std::size_t{want}, fmt::format("tasks for {} scenarios", n));
    std::set<std::tuple<std::string, std::string, int, std::string>> distinct;
    for (const auto& t : tasks)
      distinct.insert({t.scenario_id, t.tier, static_cast<int>(t.policy), t.generation_model});
    c.equal(distinct.size(), std::size_t{want}, fmt::format("distinct conditions for {} scenarios", n));
  }
}

// -- 5 -----------------------------------------------------------------------

void golden_prompts(Check& c) {
  const fs::path dir = eo::testing::golden_dir() / "eo-prompts-v1";
  const auto s = eo::testing::sample_scenario("E2");
  const auto open = prompt::render_generation_prompt(s, PromptPolicy::open_explanation);
  const auto bounded = prompt::render_generation_prompt(s, PromptPolicy::evidence_bounded_explanation);
  c.require(open.full_text() == read_file(dir / "open_E2.txt"), "open prompt differs from golden");
  c.require(bounded.full_text() == read_file(dir / "bounded_E2.txt"), "bounded prompt differs from golden");
  c.require(open.system_text == bounded.system_text && !open.system_text.empty(), "system block not shared");

  const auto open_rules = scenario::scenario_to_observed_case(s, PromptPolicy::open_explanation)["interpretation_rules"];
  c.equal(open_rules["soft_reminders"].size(), 4u, "soft reminders");
  const auto hard =
      scenario::scenario_to_observed_case(s, PromptPolicy::evidence_bounded_explanation)["interpretation_rules"]
                                                                                        ["hard_constraints"];
  std::vector<std::string> names;
  for (const auto& [k, _] : hard.items()) names.push_back(k);
  c.require(names == std::vector<std::string>{"use_only_listed_evidence", "no_unsupported_causal_claims",
                                              "treat_missing_as_missing", "state_uncertainty_when_evidence_is_weak",
                                              "distinguish_observation_from_interpretation", "preserve_temporal_order"},
            "hard constraints differ");
  for (const auto& p : {open, bounded})
    c.require(p.user_text.find(scenario::observed_case_text(s, *p.policy)) != std::string::npos,
              "observed case not embedded verbatim");

  const auto& judge = prompt::TemplateSet::builtin().judge;
  std::size_t last = 0;
  for (const auto& item : rubric::RubricDefinition::builtin().item_names()) {
    const auto at = judge.find(item);
    c.require(at != std::string::npos && at > last, "judge template item order at " + item);
    last = at == std::string::npos ? last : at;
  }
  c.require(judge.find("/ 16") != std::string::npos, "judge template lacks the / 16 formula");
  c.require(read_file(dir / "judge.txt").find(judge) != std::string::npos, "judge golden does not embed the template");
}

// -- 6 -----------------------------------------------------------------------

void judge_csv(Check& c) {
  const auto& rubric = rubric::RubricDefinition::builtin();
  const auto s = eo::testing::sample_scenario("E3");
  scenario::ScenarioStore store;
  store.add(s);
  const char* texts[] = {"commas, here", "quote \"x\" inside", "two\nlines\r\nthree", " padded ", ""};
  std::vector<GeneratedExplanation> ex;
  std::vector<rubric::JudgmentKey> keys;
  for (std::size_t i = 0; i < 10; ++i) {
    GeneratedExplanation e;
    e.dataset_name = s.dataset_name;
    e.participant_id = s.participant_id;
    e.target_date = s.target_date.str();
    e.anomaly_type = s.anomaly_type;
    e.scenario_id = s.scenario_id;
    e.evidence_tier = s.tier.label;
    e.prompt_policy = kPolicies[i % 2];
    e.generation_model = fmt::format("m{}", i / 2);
    e.explanation_text = texts[i % std::size(texts)];
    keys.push_back(rubric::key_of(e));
    ex.push_back(std::move(e));
  }
  const auto batch = rubric::assemble_judge_csv(ex, store);
  auto t = csv::parse(batch);
  for (std::size_t r = 0; r < ex.size(); ++r) {
    c.require(t.rows[r][8] == ex[r].explanation_text, fmt::format("row {} text not preserved", r));
    const std::uint32_t mask = static_cast<std::uint32_t>((r * 40503u) & 0xFFFF);
    for (std::size_t i = 0; i < 16; ++i) t.rows[r][11 + i] = (mask >> i) & 1u ? "yes" : "no";
    t.rows[r][27] = format_fixed(popcount16(mask) / 16.0, 4);
    t.rows[r][28] = "note, \"q\"\nline";
  }
  const auto filled = csv::format(t.header, t.rows);
  const auto parsed = rubric::parse_judge_csv(rubric::strip_code_fence("```csv\n" + filled + "```"), keys, rubric, "judge");
  c.equal(parsed.size(), ex.size(), "parsed rows");
  for (std::size_t r = 0; r < parsed.size(); ++r) {
    const std::uint32_t mask = static_cast<std::uint32_t>((r * 40503u) & 0xFFFF);
    for (std::size_t i = 0; i < 16; ++i)
      c.require(parsed[r].items[i] == (((mask >> i) & 1u) != 0), fmt::format("row {} item {}", r, i));
    c.require(parsed[r].judge_notes == "note, \"q\"\nline", "notes not preserved");
  }

  auto rejected = [&](const csv::Table& bad) {
    try {
      rubric::parse_judge_csv(csv::format(bad.header, bad.rows), keys, rubric, "judge");
    } catch (const rubric::BatchRejected&) {
      return true;
    }
    return false;
  };
  auto dropped = t;
  dropped.rows.pop_back();
  c.require(rejected(dropped), "dropped row accepted");
  auto renamed = t;
  renamed.header[13] = "causal_speculation";
  c.require(rejected(renamed), "renamed column accepted");
}

// -- 7 -----------------------------------------------------------------------

void paired_tests(Check& c) {
  std::mt19937_64 gen(7);
  std::uniform_int_distribution<int> size(2, 250), items(0, 16);
  int compared = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> diffs;
    const int n = size(gen);
    for (int i = 0; i < n; ++i) diffs.push_back((items(gen) - items(gen) - 1) / 16.0);
    const auto r = analysis::paired_t_test(diffs);
    if (r.degenerate()) continue;
    const auto [t_ref, p_ref] = boost::math::statistics::one_sample_t_test(diffs, 0.0);
    ++compared;
    if (std::fabs(*r.t - t_ref) > 1e-6 * std::max(1.0, std::fabs(t_ref)))
      c.problems.push_back(fmt::format("trial {}: t {} vs {}", trial, *r.t, t_ref));
    if (std::fabs(*r.p - p_ref) > 1e-6) c.problems.push_back(fmt::format("trial {}: p {} vs {}", trial, *r.p, p_ref));
  }
  c.require(compared >= 45, fmt::format("only {} fixtures compared", compared));

  const auto hand = analysis::paired_t_test(std::vector<double>{-0.10, -0.05, -0.15});
  c.require(hand.t && format_fixed(*hand.t, 4) == "-3.4641", "hand case t");
  c.equal(hand.df, 2u, "hand case df");

  c.equal(analysis::stars(0.0009), std::string("***"), "stars p<0.001");
  c.equal(analysis::stars(0.009), std::string("**"), "stars p<0.01");
  c.equal(analysis::stars(0.049), std::string("*"), "stars p<0.05");
  c.equal(analysis::stars(0.05), std::string(""), "stars p=0.05");
}

// -- 8 -----------------------------------------------------------------------

void agreement(Check& c) {
  std::vector<rubric::RubricJudgment> a, b;
  for (int i = 0; i < 16; ++i) a.push_back(make_judgment(make_key(i), 0x0303u * (i % 3)));
  const auto same = rubric::agreement_stats(a, a);
  c.equal(same.raw_agreement_any, 100.0, "identical raw agreement");
  c.equal(same.eo_mae, 0.0, "identical MAE");

  a.clear();
  for (int i = 0; i < 16; ++i) {
    const std::uint32_t mask = i < 4 ? 0u : 0x11u << (i % 4);
    a.push_back(make_judgment(make_key(i), mask));
    b.push_back(make_judgment(make_key(i), i < 4 ? 0x4000u : mask));
  }
  c.equal(format_fixed(rubric::agreement_stats(a, b).raw_agreement_any, 1), std::string("75.0"),
          "4/16 disagreement");

  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<rubric::RubricJudgment> x, y;
    std::vector<double> ex, ey;
    for (int i = 0; i < 30; ++i) {
      x.push_back(make_judgment(make_key(i), static_cast<std::uint32_t>(gen())));
      y.push_back(make_judgment(make_key(i), static_cast<std::uint32_t>(gen())));
      ex.push_back(rubric::compute_eo_score(x.back()));
      ey.push_back(rubric::compute_eo_score(y.back()));
    }
    const auto rep = rubric::agreement_stats(x, y);
    const double ref = boost::math::statistics::correlation_coefficient(ex, ey);
    c.require(rep.eo_pearson_r && std::fabs(*rep.eo_pearson_r - ref) < 1e-12, fmt::format("trial {} pearson", trial));
  }

  std::vector<rubric::RubricJudgment> flat, varied;
  for (int i = 0; i < 8; ++i) {
    flat.push_back(make_judgment(make_key(i), 0x3));
    varied.push_back(make_judgment(make_key(i), static_cast<std::uint32_t>(i)));
  }
  c.require(!rubric::agreement_stats(flat, varied).eo_pearson_r, "constant series gave a correlation");
}

// -- 9, 10 -------------------------------------------------------------------

int cli(const std::vector<std::string>& args) {
  std::string cmd = std::string("\"") + EO_CLI_PATH + "\"";
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path fixture_config_path() { return eo::testing::fixture_dir() / "audit_config.json"; }

void reproducible_run(Check& c) {
  eo::testing::TempDir tmp;
  const auto start = std::chrono::steady_clock::now();
  for (const char* name : {"a", "b"})
    c.equal(cli({"run-all", "--mock-llm", "--config", fixture_config_path().string(), "--run-dir", (tmp / name).string()}),
            0, std::string("run ") + name);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  c.require(secs < 60.0, fmt::format("two runs took {:.1f}s", secs));
  for (const char* par : {"1", "8"})
    c.equal(cli({"run-all", "--mock-llm", "--parallelism", par, "--config", fixture_config_path().string(), "--run-dir",
                 (tmp / fmt::format("p{}", par)).string()}),
            0, std::string("run p") + par);

  const auto a = eo::testing::read_tree(tmp / "a");
  c.require(a.count("report/table_grid.csv") && a.count("report/summary.json"), "report missing");
  c.require(a == eo::testing::read_tree(tmp / "b"), "repeated runs differ");
  c.require(eo::testing::read_tree(tmp / "p1") == eo::testing::read_tree(tmp / "p8"), "parallelism 1 and 8 differ");
}

std::map<std::string, std::size_t> cell_counts(const fs::path& path) {
  const auto t = csv::parse(read_file(path));
  std::map<std::string, std::size_t> out;
  const std::size_t n_col = static_cast<std::size_t>(std::find(t.header.begin(), t.header.end(), "n") - t.header.begin());
  for (const auto& row : t.rows) {
    std::string key;
    for (std::size_t i = 0; i < n_col; ++i) key += row[i] + "|";
    out[key] = std::stoul(row[n_col]);
  }
  return out;
}

void consistency_gate(Check& c) {
  eo::testing::TempDir tmp;
  const std::string run = (tmp / "run").string();
  c.equal(cli({"run-all", "--mock-llm", "--config", fixture_config_path().string(), "--run-dir", run}), 0, "run-all");
  const auto before = cell_counts(tmp / "run/analyze/cells.csv");

  const fs::path judgments = tmp / "run/judge/judgments.csv";
  auto t = csv::parse(read_file(judgments));
  const auto col = [&](std::string_view name) {
    return static_cast<std::size_t>(std::find(t.header.begin(), t.header.end(), name) - t.header.begin());
  };
  auto& row = t.rows[t.rows.size() / 2];
  row[col("eo_score")] = row[col("eo_score")] == "0.5000" ? "0.2500" : "0.5000";
  const std::string key = fmt::format("{}|{}|{}|{}|{}|", row[col("dataset")], row[col("generation_model")],
                                      row[col("evidence_tier")], row[col("anomaly_type")], row[col("prompt_policy")]);
  write_file(judgments, csv::format(t.header, t.rows));

  c.equal(cli({"score", "--run-dir", run}), 0, "score");
  c.equal(cli({"analyze", "--run-dir", run}), 0, "analyze");
  const auto after = cell_counts(tmp / "run/analyze/cells.csv");
  c.require(before.count(key) && after.count(key), "corrupted cell not found: " + key);
  if (before.count(key) && after.count(key)) c.equal(before.at(key) - after.at(key), 1u, "cell n drop");
  for (const auto& [k, n] : before)
    if (k != key) c.require(after.count(k) && after.at(k) == n, "other cell changed: " + k);
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, Criterion>> criteria{
      {"score lattice: 17 values over 65,536 masks, weighted identity, under 5 s", score_lattice},
      {"display figures: diff_pct -41.7/-40.3/-36.6 and 0.438/0.312/0.375", display_figures},
      {"anomaly detection matches brute force, inclusive threshold, affine covariance", anomaly_detection},
      {"factorial expansion: 4122 and 5400 tasks", factorial_counts},
      {"prompts match golden files and carry the fixed rule sets", golden_prompts},
      {"judge CSV round trip; dropped rows and renamed columns reject the batch", judge_csv},
      {"paired t-test matches reference on 50 fixtures; hand case; star thresholds", paired_tests},
      {"agreement: identity, 75.0% fixture, Pearson vs reference, constant series", agreement},
      {"mock run-all under 60 s, byte-identical across runs and parallelism", reproducible_run},
      {"corrupted eo_score is excluded and its cell loses exactly one row", consistency_gate},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i)
    if (!run_criterion(static_cast<int>(i + 1), criteria[i].first, criteria[i].second)) ++failed;
  std::cout << fmt::format("{}/{} criteria passed", criteria.size() - failed, criteria.size()) << '\n';
  return failed == 0 ? 0 : 1;
}
