#pragma once

#include "eo_audit/anomaly_detector.hpp"
#include "eo_audit/common.hpp"
#include "eo_audit/csv.hpp"
#include "eo_audit/explanation.hpp"
#include "eo_audit/hash.hpp"
#include "eo_audit/llm_gateway.hpp"
#include "eo_audit/mock_llm.hpp"
#include "eo_audit/paired_analysis.hpp"
#include "eo_audit/pipeline.hpp"
#include "eo_audit/policy.hpp"
#include "eo_audit/prompt_engine.hpp"
#include "eo_audit/report.hpp"
#include "eo_audit/rubric_judging.hpp"
#include "eo_audit/scenario_builder.hpp"
#include "eo_audit/sensing_ingest.hpp"
