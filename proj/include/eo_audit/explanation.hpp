#pragma once

#include <span>
#include <string>
#include <vector>

#include "eo_audit/common.hpp"
#include "eo_audit/csv.hpp"
#include "eo_audit/policy.hpp"

namespace eo {

struct GeneratedExplanation {
  std::string dataset_name;
  std::string participant_id;
  std::string target_date;
  std::string anomaly_type;
  std::string scenario_id;
  std::string evidence_tier;
  PromptPolicy prompt_policy = PromptPolicy::open_explanation;
  std::string generation_model;
  std::string explanation_text;
  // provenance
  std::string request_fingerprint;
  std::string timestamp;
  int attempts = 1;

  bool operator==(const GeneratedExplanation&) const = default;
};

// Canonical order: scenario, tier, policy, model.
inline bool canonical_less(const GeneratedExplanation& a, const GeneratedExplanation& b) {
  return std::tie(a.scenario_id, a.evidence_tier, a.prompt_policy, a.generation_model) <
         std::tie(b.scenario_id, b.evidence_tier, b.prompt_policy, b.generation_model);
}

inline const std::vector<std::string>& explanation_columns() {
  static const std::vector<std::string> cols{
      "dataset_name",   "participant_id", "target_date",       "anomaly_type",
      "scenario_id",    "evidence_tier",  "prompt_policy",     "generation_model",
      "explanation_text", "request_fingerprint", "timestamp", "attempts"};
  return cols;
}

inline std::vector<std::string> explanation_row(const GeneratedExplanation& e) {
  return {e.dataset_name,     e.participant_id,      e.target_date, e.anomaly_type,
          e.scenario_id,      e.evidence_tier,       std::string(to_string(e.prompt_policy)),
          e.generation_model, e.explanation_text,    e.request_fingerprint,
          e.timestamp,        std::to_string(e.attempts)};
}

inline GeneratedExplanation explanation_from_row(std::span<const std::string> row) {
  if (row.size() != explanation_columns().size()) throw InputError("generation artifact: wrong field count");
  GeneratedExplanation e;
  e.dataset_name = row[0];
  e.participant_id = row[1];
  e.target_date = row[2];
  e.anomaly_type = row[3];
  e.scenario_id = row[4];
  e.evidence_tier = row[5];
  e.prompt_policy = parse_policy(row[6]);
  e.generation_model = row[7];
  e.explanation_text = row[8];
  e.request_fingerprint = row[9];
  e.timestamp = row[10];
  auto attempts = parse_double(row[11]);
  if (!attempts) throw InputError("generation artifact: bad attempts value");
  e.attempts = static_cast<int>(*attempts);
  return e;
}

inline std::string write_explanations(std::span<const GeneratedExplanation> items) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : items) rows.push_back(explanation_row(e));
  return csv::format(explanation_columns(), rows);
}

inline std::vector<GeneratedExplanation> read_explanations(std::string_view text) {
  csv::Table t = csv::parse(text);
  if (t.header != explanation_columns()) throw InputError("generation artifact: unexpected header");
  std::vector<GeneratedExplanation> out;
  for (const auto& row : t.rows) out.push_back(explanation_from_row(row));
  return out;
}

}  // namespace eo
