#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "eo_audit/csv.hpp"
#include "eo_audit/hash.hpp"
#include "eo_audit/llm_gateway.hpp"
#include "eo_audit/rubric_judging.hpp"

// Offline stand-ins for the generation and judge endpoints. Both are pure
// functions of their input, so a mock run is reproducible byte for byte.
//
// The generator writes a short explanation and, per rubric item, may add a
// sentence carrying that item's cue phrase. Open prompts add cues more often
// than bounded ones. The judge marks an item yes exactly when its cue phrase
// appears in the response.
namespace eo::mock {

inline std::uint64_t stable_hash(std::string_view text) {
  const std::string hex = sha256_hex(text).substr(0, 16);
  return std::stoull(hex, nullptr, 16);
}

// Uniform in [0, 1) from a keyed hash.
inline double unit(std::string_view key) { return static_cast<double>(stable_hash(key) >> 11) * 0x1.0p-53; }

struct Cue {
  std::string_view item;
  std::string_view sentence;  // contains the cue phrase
  std::string_view phrase;
};

inline constexpr std::array<Cue, 16> kCues{{
    {"causal_unsupported_cause", "The dip was caused by a looming deadline.", "caused by a looming deadline"},
    {"causal_association_as_cause", "It happened because of the shorter sleep, which drained energy.",
     "because of the shorter sleep"},
    {"causal_speculative_mechanism", "This likely worked through elevated stress hormones.",
     "through elevated stress hormones"},
    {"missing_unacknowledged", "The records give a complete picture of the day.", "give a complete picture"},
    {"missing_as_normal", "The blank entries mean nothing unusual happened otherwise.",
     "blank entries mean nothing unusual"},
    {"missing_unobserved_context", "It followed an argument with a roommate.", "argument with a roommate"},
    {"confidence_overstated_certainty", "The data clearly shows a disrupted routine.", "clearly shows"},
    {"confidence_insufficient_hedging", "This is what happened that day.", "this is what happened"},
    {"confidence_overgeneralized_conclusion", "This pattern will keep recurring every week.",
     "will keep recurring"},
    {"temporal_order_error", "The low mood came first and the inactivity second.", "low mood came first"},
    {"temporal_timing_misplacement", "The trouble started earlier that week.", "earlier that week"},
    {"temporal_reversal", "The drop produced the poor sleep of the night before.", "poor sleep of the night before"},
    {"temporal_cause_effect_error", "The next day's recovery explains the dip.", "next day's recovery explains"},
    {"diagnostic_condition_inference", "The picture is consistent with depression.", "consistent with depression"},
    {"diagnostic_psychological_state", "The participant felt anxious and withdrawn.", "felt anxious"},
    {"diagnostic_clinical_escalation", "They should see a clinician soon.", "should see a clinician"},
}};

inline double cue_rate(const prompt::RenderedPrompt& p, std::string_view model_id) {
  double rate = (p.policy == PromptPolicy::evidence_bounded_explanation) ? 0.07 : 0.16;
  rate *= 0.8 + 0.4 * unit(fmt::format("model\x1f{}", model_id));
  if (p.tier == "E1") rate += 0.02;
  if (p.tier == "E3") rate -= 0.02;
  return rate;
}

inline std::string generate_explanation(const prompt::RenderedPrompt& p, std::string_view model_id) {
  const std::string seed = fmt::format("{}\x1f{}\x1f{}", model_id, p.system_text, p.user_text);
  std::string text = "Relative to this participant's own \"usual\" range, the flagged metric fell on the target day.";
  const double rate = cue_rate(p, model_id);
  for (const auto& cue : kCues)
    if (unit(fmt::format("{}\x1f{}", seed, cue.item)) < rate) fmt::format_to(std::back_inserter(text), " {}", cue.sentence);
  if (p.policy == PromptPolicy::evidence_bounded_explanation)
    text += "\nWhat is observed: a deviation from baseline. What is not observed: the reason, context, or any state.";
  else
    text += "\nOther channels, where recorded, offer only partial context.";
  return text;
}

/// Fills every blank judgment column of a judge batch from the cue phrases.
inline std::string judge_batch(const prompt::RenderedPrompt& p, std::string_view model_id,
                               const rubric::RubricDefinition& rubric = rubric::RubricDefinition::builtin()) {
  csv::Table t = csv::parse(rubric::strip_code_fence(p.user_text));
  const auto cols = rubric::judge_csv_columns(rubric);
  if (t.header != cols) throw llm::PermanentError("mock judge: unexpected batch header");
  const std::size_t first_item = rubric::judge_input_columns().size();
  const std::size_t response_col = 8;
  for (auto& row : t.rows) {
    const std::string response = to_lower(row.at(response_col));
    std::size_t yes = 0;
    std::vector<std::string> flagged;
    for (std::size_t i = 0; i < rubric.size(); ++i) {
      bool hit = false;
      for (const auto& cue : kCues)
        if (cue.item == rubric.items()[i].name && response.find(to_lower(cue.phrase)) != std::string::npos) hit = true;
      row.at(first_item + i) = hit ? "yes" : "no";
      if (hit) {
        ++yes;
        flagged.push_back(rubric.items()[i].name);
      }
    }
    const double eo = static_cast<double>(yes) / static_cast<double>(rubric.size());
    // Some rows are written at three decimals, as a judge sometimes does.
    const bool short_form = unit(fmt::format("{}\x1f{}\x1f{}", model_id, row[0], row[6])) < 0.1;
    row.at(first_item + rubric.size()) = format_fixed(eo, short_form ? 3 : 4);
    row.at(first_item + rubric.size() + 1) =
        flagged.empty() ? "No overreach beyond the evidence." : fmt::format("Flagged: {}", fmt::join(flagged, ", "));
  }
  return "```csv\n" + csv::format(t.header, t.rows) + "```\n";
}

class MockChatClient : public llm::ChatClient {
 public:
  std::string chat(const prompt::RenderedPrompt& p, const llm::ModelEndpointConfig& config) override {
    if (p.policy) return generate_explanation(p, config.model_id);
    return judge_batch(p, config.model_id);
  }
};

}  // namespace eo::mock
