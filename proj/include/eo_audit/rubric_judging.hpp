#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "eo_audit/common.hpp"
#include "eo_audit/csv.hpp"
#include "eo_audit/embedded_assets.hpp"
#include "eo_audit/explanation.hpp"
#include "eo_audit/policy.hpp"
#include "eo_audit/scenario_builder.hpp"

// The 16-item overreach rubric: definition, scoring, the judge CSV exchange
// format, score consistency checks and inter-rater agreement.
namespace eo::rubric {

struct RubricItem {
  std::string name;
  std::string question;
  std::size_t dimension = 0;
};

struct RubricDimension {
  std::string name;
  std::string short_name;
  std::string title;
  std::vector<std::size_t> items;  // indices into RubricDefinition::items()
};

class RubricDefinition {
 public:
  static RubricDefinition from_json(const Json& j) {
    RubricDefinition def;
    try {
      def.version_ = j.at("version").get<std::string>();
      for (const auto& d : j.at("dimensions")) {
        RubricDimension dim{d.at("name").get<std::string>(), d.at("short").get<std::string>(),
                            d.value("title", std::string{}), {}};
        for (const auto& it : d.at("items")) {
          dim.items.push_back(def.items_.size());
          def.items_.push_back({it.at("name").get<std::string>(), it.value("question", std::string{}),
                                def.dimensions_.size()});
        }
        def.dimensions_.push_back(std::move(dim));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("rubric definition: {}", e.what()));
    }
    std::set<std::string> names;
    for (const auto& it : def.items_)
      if (!names.insert(it.name).second) throw ConfigError(fmt::format("rubric: duplicate item '{}'", it.name));
    for (const auto& d : def.dimensions_)
      if (d.items.empty()) throw ConfigError(fmt::format("rubric: dimension '{}' has no items", d.name));
    if (def.items_.empty()) throw ConfigError("rubric: no items");
    return def;
  }

  static const RubricDefinition& builtin() {
    static const RubricDefinition def = from_json(Json::parse(assets::rubric_v1));
    return def;
  }

  const std::string& version() const { return version_; }
  const std::vector<RubricItem>& items() const { return items_; }
  const std::vector<RubricDimension>& dimensions() const { return dimensions_; }
  // K in the EO score.
  std::size_t size() const { return items_.size(); }

  std::optional<std::size_t> index_of(std::string_view item) const {
    for (std::size_t i = 0; i < items_.size(); ++i)
      if (items_[i].name == item) return i;
    return std::nullopt;
  }

  std::vector<std::string> item_names() const {
    std::vector<std::string> out;
    for (const auto& it : items_) out.push_back(it.name);
    return out;
  }

 private:
  std::string version_;
  std::vector<RubricItem> items_;
  std::vector<RubricDimension> dimensions_;
};

struct JudgmentKey {
  std::string scenario_id;
  std::string dataset;
  std::string evidence_tier;
  std::string anomaly_type;
  PromptPolicy prompt_policy = PromptPolicy::open_explanation;
  std::string generation_model;
  std::string participant_id;
  std::string target_date;

  auto operator<=>(const JudgmentKey&) const = default;
};

inline JudgmentKey key_of(const GeneratedExplanation& e) {
  return {e.scenario_id, e.dataset_name,     e.evidence_tier,  e.anomaly_type,
          e.prompt_policy, e.generation_model, e.participant_id, e.target_date};
}

inline std::string describe(const JudgmentKey& k) {
  return fmt::format("{}/{}/{}/{}", k.scenario_id, k.evidence_tier, to_string(k.prompt_policy), k.generation_model);
}

// A score as written in a file, with the number of decimals it was written at.
struct StoredScore {
  double value = 0;
  int decimals = 4;

  static std::optional<StoredScore> parse(std::string_view text) {
    std::string t = trim(text);
    auto v = parse_double(t);
    if (!v || !std::isfinite(*v)) return std::nullopt;
    int decimals = 0;
    if (auto dot = t.find('.'); dot != std::string::npos) {
      auto end = t.find_first_of("eE", dot);
      decimals = static_cast<int>((end == std::string::npos ? t.size() : end) - dot - 1);
    }
    return StoredScore{*v, decimals};
  }

  std::string str() const { return format_fixed(value, decimals); }
  bool operator==(const StoredScore&) const = default;
};

struct RubricJudgment {
  JudgmentKey key;
  std::vector<std::optional<bool>> items;  // rubric order; true = yes (overreach present)
  std::optional<StoredScore> stored_eo;
  std::vector<std::optional<StoredScore>> stored_dimensions;
  std::string judge_notes;
  std::string judge_model;
  std::string rubric_version;

  std::size_t yes_count() const {
    return static_cast<std::size_t>(std::count(items.begin(), items.end(), std::optional<bool>(true)));
  }
  bool any_overreach() const { return yes_count() >= 1; }

  bool operator==(const RubricJudgment&) const = default;
};

inline double round_to(double v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::round(v * scale) / scale;
}

struct ScoreOptions {
  // Score over the evaluated items only (K < 16). Off by default.
  bool allow_partial = false;
};

inline void require_shape(const RubricJudgment& j, const RubricDefinition& rubric) {
  if (j.items.size() != rubric.size())
    throw InputError(fmt::format("judgment {} has {} item slots, rubric has {}", describe(j.key), j.items.size(),
                                 rubric.size()));
}

/// Proportion of rubric items marked yes, rounded to four decimals.
inline double compute_eo_score(const RubricJudgment& j, const RubricDefinition& rubric = RubricDefinition::builtin(),
                               ScoreOptions opts = {}) {
  require_shape(j, rubric);
  std::size_t evaluated = 0, yes = 0;
  for (std::size_t i = 0; i < j.items.size(); ++i) {
    if (!j.items[i]) {
      if (!opts.allow_partial)
        throw InputError(fmt::format("judgment {} is missing item '{}'", describe(j.key), rubric.items()[i].name));
      continue;
    }
    ++evaluated;
    if (*j.items[i]) ++yes;
  }
  if (evaluated == 0) throw InputError(fmt::format("judgment {} has no evaluated items", describe(j.key)));
  return round_to(static_cast<double>(yes) / static_cast<double>(evaluated), 4);
}

// Mean of member indicators per dimension, unrounded, in rubric order.
inline std::vector<double> compute_dimension_scores(const RubricJudgment& j,
                                                    const RubricDefinition& rubric = RubricDefinition::builtin(),
                                                    ScoreOptions opts = {}) {
  require_shape(j, rubric);
  std::vector<double> out;
  for (const auto& dim : rubric.dimensions()) {
    std::size_t evaluated = 0, yes = 0;
    for (std::size_t idx : dim.items) {
      if (!j.items[idx]) {
        if (!opts.allow_partial)
          throw InputError(
              fmt::format("judgment {} is missing item '{}'", describe(j.key), rubric.items()[idx].name));
        continue;
      }
      ++evaluated;
      if (*j.items[idx]) ++yes;
    }
    out.push_back(evaluated ? static_cast<double>(yes) / static_cast<double>(evaluated) : 0.0);
  }
  return out;
}

// Fills the stored eo and dimension scores from the item labels (4 decimals).
inline void fill_scores(RubricJudgment& j, const RubricDefinition& rubric = RubricDefinition::builtin()) {
  j.stored_eo = StoredScore{compute_eo_score(j, rubric), 4};
  j.stored_dimensions.clear();
  for (double d : compute_dimension_scores(j, rubric)) j.stored_dimensions.push_back(StoredScore{round_to(d, 4), 4});
}

// ---------------------------------------------------------------------------
// Consistency checks

struct ConsistencyRow {
  JudgmentKey key;
  bool consistent = true;
  std::optional<double> stored_eo;
  double recomputed_eo = 0;
  std::vector<std::string> mismatches;
};

/// A stored value matches when it is within `tolerance` of the recomputed
/// value, or within half a unit of its own last written decimal (so 0.438
/// stored for 7/16 = 0.4375 passes).
inline bool score_matches(const StoredScore& stored, double recomputed, double tolerance) {
  const double allowed = std::max(tolerance, 0.5 * std::pow(10.0, -stored.decimals));
  return std::fabs(stored.value - recomputed) <= allowed + 1e-12;
}

inline ConsistencyRow verify_consistency(const RubricJudgment& j,
                                         const RubricDefinition& rubric = RubricDefinition::builtin(),
                                         double tolerance = 1e-4) {
  ConsistencyRow row;
  row.key = j.key;
  if (j.stored_eo) row.stored_eo = j.stored_eo->value;
  std::vector<double> dims;
  try {
    row.recomputed_eo = compute_eo_score(j, rubric);
    dims = compute_dimension_scores(j, rubric);
  } catch (const InputError& e) {
    row.consistent = false;
    row.mismatches.push_back(e.what());
    return row;
  }
  if (!j.stored_eo) {
    row.mismatches.push_back("eo_score missing");
  } else if (!score_matches(*j.stored_eo, row.recomputed_eo, tolerance)) {
    row.mismatches.push_back(fmt::format("eo_score stored {} != recomputed {}", j.stored_eo->str(),
                                         format_fixed(row.recomputed_eo, 4)));
  }
  for (std::size_t d = 0; d < j.stored_dimensions.size() && d < dims.size(); ++d) {
    const auto& s = j.stored_dimensions[d];
    if (s && !score_matches(*s, dims[d], tolerance))
      row.mismatches.push_back(fmt::format("{} stored {} != recomputed {}", rubric.dimensions()[d].name, s->str(),
                                           format_fixed(dims[d], 4)));
  }
  row.consistent = row.mismatches.empty();
  return row;
}

enum class MismatchPolicy { exclude, repair };

inline MismatchPolicy parse_mismatch_policy(std::string_view s) {
  if (s == "exclude") return MismatchPolicy::exclude;
  if (s == "repair") return MismatchPolicy::repair;
  throw ConfigError(fmt::format("unknown consistency policy '{}' (exclude|repair)", s));
}

struct GateResult {
  std::vector<RubricJudgment> kept;
  std::vector<ConsistencyRow> report;  // every input row, in input order
  std::size_t flagged = 0;
  std::size_t repaired = 0;
};

/// Runs verify_consistency over a batch. Flagged rows are dropped
/// (exclude) or have their scores replaced by the recomputed ones (repair,
/// only possible when all items are present).
inline GateResult apply_consistency_gate(std::span<const RubricJudgment> judgments, MismatchPolicy policy,
                                         const RubricDefinition& rubric = RubricDefinition::builtin(),
                                         double tolerance = 1e-4) {
  GateResult out;
  for (const auto& j : judgments) {
    ConsistencyRow row = verify_consistency(j, rubric, tolerance);
    if (row.consistent) {
      out.kept.push_back(j);
    } else {
      ++out.flagged;
      const bool repairable = std::all_of(j.items.begin(), j.items.end(), [](auto v) { return v.has_value(); }) &&
                              j.items.size() == rubric.size();
      if (policy == MismatchPolicy::repair && repairable) {
        RubricJudgment fixed = j;
        fill_scores(fixed, rubric);
        out.kept.push_back(std::move(fixed));
        ++out.repaired;
      }
    }
    out.report.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Judge CSV exchange

inline const std::vector<std::string>& judge_input_columns() {
  static const std::vector<std::string> cols{"scenario_id",
                                             "dataset",
                                             "evidence_level",
                                             "participant_id",
                                             "target_date",
                                             "anomaly_type",
                                             "prompt_policy",
                                             "available_evidence_for_judge",
                                             "model_response",
                                             "model_uncertainty_statement",
                                             "model_response_full"};
  return cols;
}

inline std::vector<std::string> judge_csv_columns(const RubricDefinition& rubric = RubricDefinition::builtin()) {
  std::vector<std::string> cols = judge_input_columns();
  for (const auto& it : rubric.items()) cols.push_back(it.name);
  cols.push_back("eo_score");
  cols.push_back("judge_notes");
  return cols;
}

using UncertaintyExtractor = std::function<std::string(const GeneratedExplanation&)>;

struct AssembleOptions {
  // Unset: model_uncertainty_statement is left blank.
  UncertaintyExtractor uncertainty_extractor;
};

/// One row per explanation, in the given order, judgment columns blank. The
/// evidence column carries the observed-case document the generator saw.
inline std::string assemble_judge_csv(std::span<const GeneratedExplanation> explanations,
                                      const scenario::ScenarioStore& scenarios,
                                      const RubricDefinition& rubric = RubricDefinition::builtin(),
                                      const AssembleOptions& opts = {}) {
  const auto header = judge_csv_columns(rubric);
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : explanations) {
    const auto* s = scenarios.find(e.scenario_id, e.evidence_tier);
    if (!s)
      throw InputError(fmt::format("explanation references unknown scenario {} / {}", e.scenario_id, e.evidence_tier));
    std::vector<std::string> row{e.scenario_id,
                                 e.dataset_name,
                                 e.evidence_tier,
                                 e.participant_id,
                                 e.target_date,
                                 e.anomaly_type,
                                 std::string(to_string(e.prompt_policy)),
                                 scenario::observed_case_text(*s, e.prompt_policy),
                                 e.explanation_text,
                                 opts.uncertainty_extractor ? opts.uncertainty_extractor(e) : std::string{},
                                 e.explanation_text};
    row.resize(header.size());
    rows.push_back(std::move(row));
  }
  return csv::format(header, rows);
}

class BatchRejected : public InputError {
 public:
  explicit BatchRejected(std::vector<std::string> defects)
      : InputError(fmt::format("judge batch rejected: {}", fmt::join(defects, "; "))), defects_(std::move(defects)) {}
  const std::vector<std::string>& defects() const { return defects_; }

 private:
  std::vector<std::string> defects_;
};

// Body of the first fenced code block, or the whole text when there is none.
inline std::string strip_code_fence(std::string_view text) {
  auto open = text.find("```");
  if (open == std::string_view::npos) return std::string(text);
  auto body = text.find('\n', open);
  if (body == std::string_view::npos) return {};
  ++body;
  auto close = text.find("\n```", body - 1);
  if (close == std::string_view::npos) return std::string(text.substr(body));
  return std::string(text.substr(body, close + 1 - body));
}

/// Parses a judge-completed batch against the rows it was sent. Any defect
/// rejects the whole batch; the exception lists every defect found.
inline std::vector<RubricJudgment> parse_judge_csv(std::string_view text, std::span<const JudgmentKey> expected,
                                                   const RubricDefinition& rubric = RubricDefinition::builtin(),
                                                   std::string_view judge_model = {}) {
  std::vector<std::string> defects;
  csv::Table table;
  try {
    table = csv::parse(text);
  } catch (const InputError& e) {
    throw BatchRejected({e.what()});
  }
  const auto columns = judge_csv_columns(rubric);
  if (table.header != columns) {
    std::vector<std::string> diffs;
    for (std::size_t i = 0; i < std::max(columns.size(), table.header.size()); ++i) {
      std::string want = i < columns.size() ? columns[i] : "<none>";
      std::string got = i < table.header.size() ? table.header[i] : "<none>";
      if (want != got) diffs.push_back(fmt::format("col {} '{}' != expected '{}'", i + 1, got, want));
    }
    defects.push_back(fmt::format("header mismatch: {}", fmt::join(diffs, ", ")));
    throw BatchRejected(std::move(defects));
  }
  if (table.rows.size() != expected.size())
    defects.push_back(fmt::format("row_count {} != expected {}", table.rows.size(), expected.size()));

  const std::size_t first_item = judge_input_columns().size();
  const std::size_t eo_col = first_item + rubric.size();
  std::vector<RubricJudgment> out;
  for (std::size_t r = 0; r < std::min(table.rows.size(), expected.size()); ++r) {
    const auto& row = table.rows[r];
    const auto& key = expected[r];
    if (row.size() != columns.size()) {
      defects.push_back(fmt::format("row {}: {} fields, expected {}", r + 1, row.size(), columns.size()));
      continue;
    }
    const std::pair<std::string_view, std::string_view> checks[] = {
        {row[0], key.scenario_id},   {row[1], key.dataset},      {row[2], key.evidence_tier},
        {row[3], key.participant_id}, {row[4], key.target_date}, {row[5], key.anomaly_type},
        {row[6], to_string(key.prompt_policy)}};
    for (std::size_t c = 0; c < std::size(checks); ++c)
      if (checks[c].first != checks[c].second)
        defects.push_back(fmt::format("row {}: {} '{}' != expected '{}'", r + 1, columns[c], checks[c].first,
                                      checks[c].second));

    RubricJudgment j;
    j.key = key;
    j.judge_model = std::string(judge_model);
    j.rubric_version = rubric.version();
    for (std::size_t i = 0; i < rubric.size(); ++i) {
      std::string cell = to_lower(trim(row[first_item + i]));
      if (cell == "yes") {
        j.items.push_back(true);
      } else if (cell == "no") {
        j.items.push_back(false);
      } else {
        j.items.push_back(std::nullopt);
        defects.push_back(fmt::format("row {}: {} is '{}' (expected yes/no)", r + 1, rubric.items()[i].name,
                                      row[first_item + i]));
      }
    }
    j.stored_eo = StoredScore::parse(row[eo_col]);
    if (!j.stored_eo) defects.push_back(fmt::format("row {}: eo_score '{}' is not a number", r + 1, row[eo_col]));
    j.judge_notes = row[eo_col + 1];
    out.push_back(std::move(j));
  }
  if (!defects.empty()) throw BatchRejected(std::move(defects));
  return out;
}

// ---------------------------------------------------------------------------
// Judged-results artifact

inline std::vector<std::string> judged_columns(const RubricDefinition& rubric = RubricDefinition::builtin()) {
  std::vector<std::string> cols{"scenario_id",   "dataset",          "evidence_tier",  "anomaly_type",
                                "prompt_policy", "generation_model", "participant_id", "target_date"};
  for (const auto& it : rubric.items()) cols.push_back(it.name);
  cols.push_back("eo_score");
  for (const auto& d : rubric.dimensions()) cols.push_back(d.name);
  cols.push_back("judge_notes");
  cols.push_back("judge_model");
  cols.push_back("rubric_version");
  return cols;
}

inline std::string write_judgments(std::span<const RubricJudgment> judgments,
                                   const RubricDefinition& rubric = RubricDefinition::builtin()) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& j : judgments) {
    const auto& k = j.key;
    std::vector<std::string> row{k.scenario_id, k.dataset,          k.evidence_tier,   k.anomaly_type,
                                 std::string(to_string(k.prompt_policy)), k.generation_model, k.participant_id,
                                 k.target_date};
    for (std::size_t i = 0; i < rubric.size(); ++i) {
      const auto& v = i < j.items.size() ? j.items[i] : std::optional<bool>{};
      row.push_back(v ? (*v ? "yes" : "no") : "");
    }
    row.push_back(j.stored_eo ? j.stored_eo->str() : "");
    for (std::size_t d = 0; d < rubric.dimensions().size(); ++d) {
      const auto& s = d < j.stored_dimensions.size() ? j.stored_dimensions[d] : std::optional<StoredScore>{};
      row.push_back(s ? s->str() : "");
    }
    row.push_back(j.judge_notes);
    row.push_back(j.judge_model);
    row.push_back(j.rubric_version);
    rows.push_back(std::move(row));
  }
  return csv::format(judged_columns(rubric), rows);
}

inline std::vector<RubricJudgment> read_judgments(std::string_view text,
                                                  const RubricDefinition& rubric = RubricDefinition::builtin()) {
  csv::Table t = csv::parse(text);
  const auto cols = judged_columns(rubric);
  if (t.header != cols) throw InputError("judgments artifact: unexpected header");
  std::vector<RubricJudgment> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    if (row.size() != cols.size())
      throw InputError(fmt::format("judgments artifact line {}: wrong field count", t.lines[r]));
    RubricJudgment j;
    j.key = {row[0], row[1], row[2], row[3], parse_policy(row[4]), row[5], row[6], row[7]};
    std::size_t c = 8;
    for (std::size_t i = 0; i < rubric.size(); ++i, ++c) {
      std::string v = to_lower(trim(row[c]));
      if (v == "yes")
        j.items.push_back(true);
      else if (v == "no")
        j.items.push_back(false);
      else if (v.empty())
        j.items.push_back(std::nullopt);
      else
        throw InputError(fmt::format("judgments artifact line {}: bad label '{}'", t.lines[r], row[c]));
    }
    j.stored_eo = StoredScore::parse(row[c++]);
    for (std::size_t d = 0; d < rubric.dimensions().size(); ++d) j.stored_dimensions.push_back(StoredScore::parse(row[c++]));
    j.judge_notes = row[c++];
    j.judge_model = row[c++];
    j.rubric_version = row[c++];
    out.push_back(std::move(j));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Agreement between two label sets over the same rows

struct AgreementReport {
  std::size_t n = 0;
  double raw_agreement_any = 0;  // percent
  double eo_mae = 0;
  std::optional<double> eo_pearson_r;
  std::vector<std::pair<std::string, double>> item_agreement;  // percent, rubric order
  double mean_item_agreement = 0;                              // percent
};

// Empty when either series has zero variance or fewer than two points.
inline std::optional<double> pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0) || !(syy > 0)) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline AgreementReport agreement_stats(std::span<const RubricJudgment> a, std::span<const RubricJudgment> b,
                                       const RubricDefinition& rubric = RubricDefinition::builtin()) {
  std::map<JudgmentKey, const RubricJudgment*> by_key;
  for (const auto& j : b)
    if (!by_key.emplace(j.key, &j).second)
      throw ConfigError(fmt::format("agreement_stats: duplicate key {}", describe(j.key)));
  if (a.size() != b.size()) throw ConfigError("agreement_stats: key mismatch (different row counts)");

  AgreementReport rep;
  rep.n = a.size();
  if (rep.n == 0) throw ConfigError("agreement_stats: no rows");
  std::vector<double> eo_a, eo_b;
  std::vector<std::size_t> item_matches(rubric.size(), 0);
  std::size_t any_matches = 0;
  std::set<JudgmentKey> seen;
  for (const auto& ja : a) {
    auto it = by_key.find(ja.key);
    if (it == by_key.end() || !seen.insert(ja.key).second)
      throw ConfigError(fmt::format("agreement_stats: key mismatch at {}", describe(ja.key)));
    const RubricJudgment& jb = *it->second;
    eo_a.push_back(compute_eo_score(ja, rubric));
    eo_b.push_back(compute_eo_score(jb, rubric));
    if (ja.any_overreach() == jb.any_overreach()) ++any_matches;
    for (std::size_t i = 0; i < rubric.size(); ++i)
      if (ja.items[i] == jb.items[i]) ++item_matches[i];
  }
  const double n = static_cast<double>(rep.n);
  rep.raw_agreement_any = 100.0 * static_cast<double>(any_matches) / n;
  double abs_sum = 0;
  for (std::size_t i = 0; i < eo_a.size(); ++i) abs_sum += std::fabs(eo_a[i] - eo_b[i]);
  rep.eo_mae = abs_sum / n;
  rep.eo_pearson_r = pearson_r(eo_a, eo_b);
  double sum = 0;
  for (std::size_t i = 0; i < rubric.size(); ++i) {
    double pct = 100.0 * static_cast<double>(item_matches[i]) / n;
    rep.item_agreement.emplace_back(rubric.items()[i].name, pct);
    sum += pct;
  }
  rep.mean_item_agreement = sum / static_cast<double>(rubric.size());
  return rep;
}

}  // namespace eo::rubric
