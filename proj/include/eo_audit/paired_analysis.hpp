#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eo_audit/common.hpp"
#include "eo_audit/rubric_judging.hpp"

namespace eo::analysis {

using rubric::RubricJudgment;

// ---------------------------------------------------------------------------
// Student's t distribution

// lgamma(a + b) - lgamma(a). For large a the two lgamma values are huge and
// nearly equal, so their difference is taken from the Stirling series instead.
inline double lgamma_shift(double a, double b) {
  if (a < 20.0) return std::lgamma(a + b) - std::lgamma(a);
  auto corr = [](double x) {
    const double r = 1.0 / (x * x);
    return (1.0 / 12.0 - r * (1.0 / 360.0 - r * (1.0 / 1260.0 - r / 1680.0))) / x;
  };
  return b * std::log(a) + (a + b - 0.5) * std::log1p(b / a) - b + corr(a + b) - corr(a);
}

/// Regularized incomplete beta I_x(a, b), evaluated with the modified Lentz
/// continued fraction on whichever side of the mean converges faster.
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0) || !(b > 0)) throw InputError("incomplete beta: a and b must be positive");
  if (x <= 0) return 0.0;
  if (x >= 1) return 1.0;
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - regularized_incomplete_beta(b, a, 1.0 - x);

  const double log_beta_inv = a >= b ? lgamma_shift(a, b) - std::lgamma(b) : lgamma_shift(b, a) - std::lgamma(a);
  const double log_front = log_beta_inv + a * std::log(x) + b * std::log1p(-x);
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-15;
  double f = 1.0, c = 1.0, d = 0.0;
  for (int i = 0; i <= 400; ++i) {
    const int m = i / 2;
    double numerator;
    if (i == 0)
      numerator = 1.0;
    else if (i % 2 == 0)
      numerator = (m * (b - m) * x) / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
    else
      numerator = -((a + m) * (a + b + m) * x) / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
    d = 1.0 + numerator * d;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    c = 1.0 + numerator / c;
    if (std::fabs(c) < tiny) c = tiny;
    const double delta = c * d;
    f *= delta;
    if (std::fabs(1.0 - delta) < eps) return std::exp(log_front) * (f - 1.0) / a;
  }
  throw Error("incomplete beta: continued fraction did not converge");
}

// P(|T| >= |t|) for T ~ Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (!(df > 0)) throw InputError("student t: df must be positive");
  if (std::isinf(t)) return 0.0;
  const double t2 = t * t;
  // For small |t| the argument df/(df+t^2) sits near 1; use the complement
  // with t^2/(df+t^2) so that 1 - x is never formed.
  if (t2 < df) return 1.0 - regularized_incomplete_beta(0.5, df / 2.0, t2 / (df + t2));
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t2));
}

// ---------------------------------------------------------------------------
// Paired t-test

enum class TestStatus { ok, zero_variance, insufficient_pairs };

inline std::string_view to_string(TestStatus s) {
  switch (s) {
    case TestStatus::ok: return "ok";
    case TestStatus::zero_variance: return "degenerate_zero_variance";
    case TestStatus::insufficient_pairs: return "insufficient_pairs";
  }
  return "";
}

struct TTestResult {
  std::size_t n = 0;
  double mean_diff = 0;
  double sd_diff = 0;
  std::optional<double> t;
  std::size_t df = 0;
  std::optional<double> p;  // two-sided
  TestStatus status = TestStatus::ok;

  bool degenerate() const { return status != TestStatus::ok; }
};

inline TTestResult paired_t_test(std::span<const double> diffs) {
  if (diffs.size() < 2) throw InputError(fmt::format("paired t-test needs n >= 2, got {}", diffs.size()));
  TTestResult r;
  r.n = diffs.size();
  r.df = r.n - 1;
  const double n = static_cast<double>(r.n);
  double sum = 0;
  for (double d : diffs) sum += d;
  r.mean_diff = sum / n;
  double ss = 0;
  for (double d : diffs) ss += (d - r.mean_diff) * (d - r.mean_diff);
  r.sd_diff = std::sqrt(ss / (n - 1.0));
  if (!(r.sd_diff > 0)) {
    r.status = TestStatus::zero_variance;
    return r;
  }
  r.t = r.mean_diff / (r.sd_diff / std::sqrt(n));
  r.p = student_t_two_sided_p(*r.t, static_cast<double>(r.df));
  return r;
}

inline std::string stars(std::optional<double> p) {
  if (!p) return "";
  if (*p < 0.001) return "***";
  if (*p < 0.01) return "**";
  if (*p < 0.05) return "*";
  return "";
}

// Relative change from open to bounded in percent; empty when mean_open is 0.
inline std::optional<double> diff_pct(double mean_open, double mean_bounded) {
  if (mean_open == 0.0) return std::nullopt;
  return 100.0 * (mean_bounded - mean_open) / mean_open;
}

// ---------------------------------------------------------------------------
// Pairing

struct ConditionKey {
  std::string scenario_id;
  std::string evidence_tier;
  std::string generation_model;
  auto operator<=>(const ConditionKey&) const = default;
};

inline ConditionKey condition_of(const RubricJudgment& j) {
  return {j.key.scenario_id, j.key.evidence_tier, j.key.generation_model};
}

struct JudgmentPair {
  RubricJudgment open;
  RubricJudgment bounded;
  double open_eo = 0;
  double bounded_eo = 0;
  double diff() const { return bounded_eo - open_eo; }
};

struct PairExclusion {
  rubric::JudgmentKey key;
  std::string reason;
};

struct Pairing {
  std::vector<JudgmentPair> pairs;  // ordered by condition
  std::vector<PairExclusion> excluded;
};

inline Pairing pair_judgments(std::span<const RubricJudgment> judgments,
                              const rubric::RubricDefinition& rubric = rubric::RubricDefinition::builtin()) {
  std::map<ConditionKey, std::pair<const RubricJudgment*, const RubricJudgment*>> slots;
  for (const auto& j : judgments) {
    auto& slot = slots[condition_of(j)];
    auto& ref = j.key.prompt_policy == PromptPolicy::open_explanation ? slot.first : slot.second;
    if (ref)
      throw InputError(fmt::format("duplicate judgment for condition {} ({})", rubric::describe(j.key),
                                   eo::to_string(j.key.prompt_policy)));
    ref = &j;
  }
  Pairing out;
  for (const auto& [cond, slot] : slots) {
    if (slot.first && slot.second) {
      out.pairs.push_back({*slot.first, *slot.second, rubric::compute_eo_score(*slot.first, rubric),
                           rubric::compute_eo_score(*slot.second, rubric)});
    } else {
      const auto* present = slot.first ? slot.first : slot.second;
      out.excluded.push_back(
          {present->key, slot.first ? "missing evidence_bounded_explanation" : "missing open_explanation"});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grouping

enum class GroupKey { dataset, generation_model, evidence_tier, anomaly_type, prompt_policy };

// Fixed order in which groups are sorted, whatever order the caller lists them.
inline constexpr std::array<GroupKey, 5> kGroupOrder{GroupKey::dataset, GroupKey::generation_model,
                                                     GroupKey::evidence_tier, GroupKey::anomaly_type,
                                                     GroupKey::prompt_policy};

inline std::string_view to_string(GroupKey k) {
  switch (k) {
    case GroupKey::dataset: return "dataset";
    case GroupKey::generation_model: return "generation_model";
    case GroupKey::evidence_tier: return "evidence_tier";
    case GroupKey::anomaly_type: return "anomaly_type";
    case GroupKey::prompt_policy: return "prompt_policy";
  }
  return "";
}

inline GroupKey parse_group_key(std::string_view s) {
  for (GroupKey k : kGroupOrder)
    if (to_string(k) == s) return k;
  throw ConfigError(fmt::format("unknown grouping key '{}'", s));
}

inline std::vector<GroupKey> parse_group_keys(std::span<const std::string> names) {
  std::vector<GroupKey> out;
  for (const auto& n : names) {
    GroupKey k = parse_group_key(n);
    if (std::find(out.begin(), out.end(), k) != out.end()) throw ConfigError(fmt::format("grouping key '{}' repeated", n));
    out.push_back(k);
  }
  return out;
}

inline std::string group_value(const rubric::JudgmentKey& key, GroupKey g) {
  switch (g) {
    case GroupKey::dataset: return key.dataset;
    case GroupKey::generation_model: return key.generation_model;
    case GroupKey::evidence_tier: return key.evidence_tier;
    case GroupKey::anomaly_type: return key.anomaly_type;
    case GroupKey::prompt_policy: return std::string(eo::to_string(key.prompt_policy));
  }
  return {};
}

// Group labels in canonical field order.
struct Group {
  std::vector<std::pair<GroupKey, std::string>> fields;

  std::optional<std::string> get(GroupKey k) const {
    for (const auto& [key, v] : fields)
      if (key == k) return v;
    return std::nullopt;
  }

  // Policies sort in declaration order (open first); other fields lexically.
  auto sort_key() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : fields)
      out.push_back(k == GroupKey::prompt_policy
                        ? std::to_string(static_cast<int>(parse_policy(v)))
                        : v);
    return out;
  }

  bool operator<(const Group& o) const { return sort_key() < o.sort_key(); }
  bool operator==(const Group& o) const = default;
};

inline Group group_of(const rubric::JudgmentKey& key, std::span<const GroupKey> group_by) {
  Group g;
  for (GroupKey k : kGroupOrder)
    if (std::find(group_by.begin(), group_by.end(), k) != group_by.end()) g.fields.emplace_back(k, group_value(key, k));
  return g;
}

struct PairedComparison {
  Group group;
  std::size_t n_pairs = 0;
  double mean_open = 0;
  double mean_bounded = 0;
  double delta = 0;  // mean of bounded - open over pairs
  std::optional<double> diff_pct;
  TTestResult test;
  std::string stars;
};

inline PairedComparison summarize_pairs(Group group, std::span<const JudgmentPair* const> pairs) {
  PairedComparison c;
  c.group = std::move(group);
  c.n_pairs = pairs.size();
  std::vector<double> diffs;
  double so = 0, sb = 0;
  for (const auto* p : pairs) {
    so += p->open_eo;
    sb += p->bounded_eo;
    diffs.push_back(p->diff());
  }
  const double n = static_cast<double>(pairs.size());
  c.mean_open = so / n;
  c.mean_bounded = sb / n;
  c.diff_pct = analysis::diff_pct(c.mean_open, c.mean_bounded);
  if (pairs.size() >= 2) {
    c.test = paired_t_test(diffs);
    c.delta = c.test.mean_diff;
  } else {
    c.test.n = pairs.size();
    c.test.status = TestStatus::insufficient_pairs;
    c.test.mean_diff = c.delta = diffs.empty() ? 0.0 : diffs.front();
  }
  c.stars = stars(c.test.p);
  return c;
}

/// Open-versus-bounded comparison per group. Groups with a single pair are
/// kept and marked insufficient_pairs.
inline std::vector<PairedComparison> compare_policies(std::span<const JudgmentPair> pairs,
                                                      std::span<const GroupKey> group_by) {
  if (std::find(group_by.begin(), group_by.end(), GroupKey::prompt_policy) != group_by.end())
    throw ConfigError("compare_policies: prompt_policy cannot be a grouping key");
  std::map<Group, std::vector<const JudgmentPair*>> groups;
  for (const auto& p : pairs) groups[group_of(p.open.key, group_by)].push_back(&p);
  std::vector<PairedComparison> out;
  for (auto& [g, members] : groups) out.push_back(summarize_pairs(g, members));
  return out;
}

struct CellSummary {
  Group group;
  std::size_t n = 0;
  double mean_eo = 0;
  std::vector<double> dimension_means;  // rubric dimension order
};

inline std::vector<CellSummary> aggregate_cells(std::span<const RubricJudgment> judgments,
                                                std::span<const GroupKey> group_by,
                                                const rubric::RubricDefinition& rubric = rubric::RubricDefinition::builtin()) {
  std::map<Group, CellSummary> cells;
  for (const auto& j : judgments) {
    Group g = group_of(j.key, group_by);
    auto& cell = cells[g];
    if (cell.n == 0) {
      cell.group = g;
      cell.dimension_means.assign(rubric.dimensions().size(), 0.0);
    }
    ++cell.n;
    cell.mean_eo += rubric::compute_eo_score(j, rubric);
    auto dims = rubric::compute_dimension_scores(j, rubric);
    for (std::size_t d = 0; d < dims.size(); ++d) cell.dimension_means[d] += dims[d];
  }
  std::vector<CellSummary> out;
  for (auto& [g, cell] : cells) {
    const double n = static_cast<double>(cell.n);
    cell.mean_eo /= n;
    for (double& d : cell.dimension_means) d /= n;
    out.push_back(std::move(cell));
  }
  return out;
}

}  // namespace eo::analysis
