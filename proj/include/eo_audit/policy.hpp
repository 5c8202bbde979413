#pragma once

#include <array>
#include <string>
#include <string_view>

#include "eo_audit/common.hpp"

namespace eo {

enum class PromptPolicy { open_explanation, evidence_bounded_explanation };

inline constexpr std::array<PromptPolicy, 2> kPolicies{PromptPolicy::open_explanation,
                                                       PromptPolicy::evidence_bounded_explanation};

inline std::string_view to_string(PromptPolicy p) {
  return p == PromptPolicy::open_explanation ? "open_explanation" : "evidence_bounded_explanation";
}

inline PromptPolicy parse_policy(std::string_view s) {
  if (s == "open_explanation") return PromptPolicy::open_explanation;
  if (s == "evidence_bounded_explanation") return PromptPolicy::evidence_bounded_explanation;
  throw ConfigError(fmt::format("unknown prompt policy '{}'", s));
}

}  // namespace eo
