#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "eo_audit/common.hpp"
#include "eo_audit/embedded_assets.hpp"
#include "eo_audit/policy.hpp"
#include "eo_audit/scenario_builder.hpp"

namespace eo::prompt {

// Versioned prompt texts. The built-in set is compiled from assets/templates.
struct TemplateSet {
  std::string version;
  std::string system;
  std::string open_user;
  std::string bounded_user;
  std::string judge;

  static const TemplateSet& builtin() {
    static const TemplateSet set{trim(assets::template_version), std::string(assets::system_template),
                                 std::string(assets::open_user_template),
                                 std::string(assets::bounded_user_template),
                                 std::string(assets::judge_template)};
    return set;
  }

  // Same file names as assets/templates.
  static TemplateSet load(const fs::path& dir) {
    return {trim(read_file(dir / "VERSION")), read_file(dir / "system.txt"), read_file(dir / "open_user.txt"),
            read_file(dir / "bounded_user.txt"), read_file(dir / "judge.txt")};
  }

  const std::string& user_template(PromptPolicy p) const {
    return p == PromptPolicy::open_explanation ? open_user : bounded_user;
  }
};

struct RenderedPrompt {
  std::string system_text;
  std::string user_text;
  std::optional<PromptPolicy> policy;  // empty for judge prompts
  std::string scenario_id;
  std::string tier;
  std::string template_version;

  std::string full_text() const { return system_text + "\n" + user_text; }
  bool operator==(const RenderedPrompt&) const = default;
};

/// Replaces `{name}` placeholders in one pass; substituted text is never
/// rescanned. Unknown or unterminated placeholders are an error.
inline std::string substitute(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    auto open = tmpl.find('{', pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    out.append(tmpl.substr(pos, open - pos));
    auto close = tmpl.find('}', open);
    if (close == std::string_view::npos) throw ConfigError("template: unterminated placeholder");
    std::string name(tmpl.substr(open + 1, close - open - 1));
    auto it = vars.find(name);
    if (it == vars.end()) throw ConfigError(fmt::format("template: unknown placeholder '{{{}}}'", name));
    out += it->second;
    pos = close + 1;
  }
  return out;
}

inline RenderedPrompt render_generation_prompt(const scenario::AnomalyScenario& s, PromptPolicy policy,
                                               const TemplateSet& templates = TemplateSet::builtin()) {
  RenderedPrompt p;
  p.system_text = templates.system;
  p.user_text = substitute(templates.user_template(policy),
                           {{"anomaly_type", s.anomaly_type},
                            {"target_rule", s.target_rule},
                            {"observed_case", scenario::observed_case_text(s, policy)}});
  p.policy = policy;
  p.scenario_id = s.scenario_id;
  p.tier = s.tier.label;
  p.template_version = templates.version;
  return p;
}

// Judge instructions as system text; the batch CSV, fenced, as user text.
inline RenderedPrompt render_judge_prompt(std::string_view batch_csv,
                                          const TemplateSet& templates = TemplateSet::builtin()) {
  if (trim(batch_csv).empty()) throw ConfigError("render_judge_prompt: empty batch");
  RenderedPrompt p;
  p.system_text = templates.judge;
  p.user_text = "```csv\n" + std::string(batch_csv);
  if (p.user_text.back() != '\n') p.user_text.push_back('\n');
  p.user_text += "```\n";
  p.template_version = templates.version;
  return p;
}

}  // namespace eo::prompt
