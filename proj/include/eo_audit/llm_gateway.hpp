#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <fmt/chrono.h>
#include <httplib.h>

#include "eo_audit/common.hpp"
#include "eo_audit/explanation.hpp"
#include "eo_audit/hash.hpp"
#include "eo_audit/prompt_engine.hpp"
#include "eo_audit/rubric_judging.hpp"
#include "eo_audit/scenario_builder.hpp"

namespace eo::llm {

enum class Provider { http, mock };
NLOHMANN_JSON_SERIALIZE_ENUM(Provider, {{Provider::http, "http"}, {Provider::mock, "mock"}})

struct ModelEndpointConfig {
  std::string model_id;
  Provider provider = Provider::http;
  // OpenAI-compatible root, e.g. https://api.example.com/v1; requests go to
  // {base_url}/chat/completions.
  std::string base_url;
  // Name of the environment variable holding the bearer token. The token
  // itself is read at request time and never stored.
  std::string api_key_env;
  std::chrono::milliseconds timeout{60'000};
  // Retries after the first attempt, so at most 1 + max_retries requests.
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  double backoff_factor = 2.0;
  std::chrono::milliseconds max_backoff{30'000};
  std::optional<double> temperature;
  std::optional<int> max_tokens;

  // Fields that can change a response. Feeds request fingerprints.
  Json output_affecting_json() const {
    Json j;
    j["model_id"] = model_id;
    j["provider"] = provider;
    j["base_url"] = base_url;
    j["temperature"] = temperature ? Json(*temperature) : Json(nullptr);
    j["max_tokens"] = max_tokens ? Json(*max_tokens) : Json(nullptr);
    return j;
  }

  Json to_json() const {
    Json j = output_affecting_json();
    j["api_key_env"] = api_key_env;
    j["timeout_ms"] = timeout.count();
    j["max_retries"] = max_retries;
    j["initial_backoff_ms"] = initial_backoff.count();
    j["backoff_factor"] = backoff_factor;
    j["max_backoff_ms"] = max_backoff.count();
    return j;
  }

  static ModelEndpointConfig from_json(const Json& j) {
    ModelEndpointConfig c;
    try {
      c.model_id = j.at("model_id").get<std::string>();
      c.provider = j.value("provider", Provider::http);
      c.base_url = j.value("base_url", std::string{});
      c.api_key_env = j.value("api_key_env", std::string{});
      c.timeout = std::chrono::milliseconds(j.value("timeout_ms", c.timeout.count()));
      c.max_retries = j.value("max_retries", c.max_retries);
      c.initial_backoff = std::chrono::milliseconds(j.value("initial_backoff_ms", c.initial_backoff.count()));
      c.backoff_factor = j.value("backoff_factor", c.backoff_factor);
      c.max_backoff = std::chrono::milliseconds(j.value("max_backoff_ms", c.max_backoff.count()));
      if (j.contains("temperature") && !j["temperature"].is_null()) c.temperature = j["temperature"].get<double>();
      if (j.contains("max_tokens") && !j["max_tokens"].is_null()) c.max_tokens = j["max_tokens"].get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("model config: {}", e.what()));
    }
    if (c.model_id.empty()) throw ConfigError("model config: empty model_id");
    if (c.max_retries < 0) throw ConfigError(fmt::format("model config {}: max_retries < 0", c.model_id));
    if (c.provider == Provider::http && c.base_url.empty())
      throw ConfigError(fmt::format("model config {}: http provider needs base_url", c.model_id));
    return c;
  }
};

class TransientError : public Error {
 public:
  using Error::Error;
};
class PermanentError : public Error {
 public:
  using Error::Error;
};
// Bad or missing credentials. Never retried; aborts the run.
class AuthError : public Error {
 public:
  using Error::Error;
};

// Implementations must be safe to call from several threads at once.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string chat(const prompt::RenderedPrompt& prompt, const ModelEndpointConfig& config) = 0;
};

inline std::optional<std::string> read_secret(const ModelEndpointConfig& c) {
  if (c.api_key_env.empty()) return std::nullopt;
  const char* v = std::getenv(c.api_key_env.c_str());
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

/// Chat-completions client. Request body:
///   {"model", "messages": [{"role":"system",...}, {"role":"user",...}],
///    "temperature"?, "max_tokens"?}
/// and the reply text is read from choices[0].message.content.
class HttpChatClient : public ChatClient {
 public:
  std::string chat(const prompt::RenderedPrompt& prompt, const ModelEndpointConfig& config) override {
    auto [origin, path] = split_url(config.base_url);
    httplib::Client cli(origin);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config.timeout);
    const auto usec = std::chrono::duration_cast<std::chrono::microseconds>(config.timeout - secs);
    cli.set_connection_timeout(secs.count(), usec.count());
    cli.set_read_timeout(secs.count(), usec.count());
    cli.set_write_timeout(secs.count(), usec.count());

    httplib::Headers headers;
    if (!config.api_key_env.empty()) {
      auto key = read_secret(config);
      if (!key) throw AuthError(fmt::format("environment variable {} is not set", config.api_key_env));
      headers.emplace("Authorization", "Bearer " + *key);
    }
    Json body{{"model", config.model_id},
              {"messages",
               Json::array({{{"role", "system"}, {"content", prompt.system_text}},
                            {{"role", "user"}, {"content", prompt.user_text}}})}};
    if (config.temperature) body["temperature"] = *config.temperature;
    if (config.max_tokens) body["max_tokens"] = *config.max_tokens;

    auto res = cli.Post(path + "/chat/completions", headers, body.dump(), "application/json");
    if (!res) throw TransientError(fmt::format("transport error: {}", httplib::to_string(res.error())));
    const int status = res->status;
    if (status == 401 || status == 403) throw AuthError(fmt::format("{} rejected credentials (HTTP {})", config.model_id, status));
    if (status == 408 || status == 429 || status >= 500) throw TransientError(fmt::format("HTTP {}", status));
    if (status < 200 || status >= 300) throw PermanentError(fmt::format("HTTP {}: {}", status, res->body.substr(0, 200)));
    try {
      Json reply = Json::parse(res->body);
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw PermanentError(fmt::format("malformed completion response: {}", e.what()));
    }
  }

  static std::pair<std::string, std::string> split_url(std::string_view url) {
    auto scheme = url.find("://");
    auto host_start = scheme == std::string_view::npos ? 0 : scheme + 3;
    auto slash = url.find('/', host_start);
    std::string origin(url.substr(0, slash));
    std::string path = slash == std::string_view::npos ? "" : std::string(url.substr(slash));
    while (!path.empty() && path.back() == '/') path.pop_back();
    return {origin, path};
  }
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline void real_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

inline std::string utc_now_iso() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(
                                                   std::chrono::system_clock::now())));
}

struct CompletionResult {
  std::optional<std::string> text;
  int attempts = 0;
  std::string failure_reason;  // "retries_exhausted" or "permanent_error"
  std::string failure_detail;
};

inline std::chrono::milliseconds backoff_delay(const ModelEndpointConfig& c, int retry_index) {
  double ms = static_cast<double>(c.initial_backoff.count()) * std::pow(c.backoff_factor, retry_index);
  ms = std::min(ms, static_cast<double>(c.max_backoff.count()));
  return std::chrono::milliseconds(static_cast<long long>(ms));
}

/// Sends one prompt, retrying transient failures with exponential backoff.
/// AuthError propagates to the caller.
inline CompletionResult complete(ChatClient& client, const prompt::RenderedPrompt& prompt,
                                 const ModelEndpointConfig& config, const Sleeper& sleep = real_sleep) {
  CompletionResult r;
  for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
    if (attempt > 0) sleep(backoff_delay(config, attempt - 1));
    ++r.attempts;
    try {
      r.text = client.chat(prompt, config);
      return r;
    } catch (const TransientError& e) {
      r.failure_detail = e.what();
    } catch (const PermanentError& e) {
      r.failure_reason = "permanent_error";
      r.failure_detail = e.what();
      return r;
    }
  }
  r.failure_reason = "retries_exhausted";
  return r;
}

inline std::string request_fingerprint(const prompt::RenderedPrompt& p, const ModelEndpointConfig& c) {
  return sha256_hex(fmt::format("{}\x1f{}\x1f{}\x1f{}", p.template_version, p.system_text, p.user_text,
                                c.output_affecting_json().dump()));
}

// Runs fn(i) for i in [0, n) on at most `parallelism` threads. The first
// exception stops further work and is rethrown after all workers join.
inline void parallel_for(std::size_t n, std::size_t parallelism, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(parallelism, n));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto work = [&] {
    for (;;) {
      if (stop.load()) return;
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        stop = true;
        return;
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work);
    for (auto& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
}

struct TaskFailure {
  scenario::GenerationTask task;
  std::string reason;
  std::string detail;
  int attempts = 0;
};

struct GenerationOptions {
  std::size_t parallelism = 1;
  // Outputs from an earlier, possibly interrupted, run. Tasks whose request
  // fingerprint matches one of these are not sent again.
  std::vector<GeneratedExplanation> existing;
  // Called once per new output as it arrives (serialized), for journaling.
  std::function<void(const GeneratedExplanation&)> on_result;
  std::function<std::string()> clock = utc_now_iso;
  Sleeper sleep = real_sleep;
  const prompt::TemplateSet* templates = nullptr;
};

struct GenerationRun {
  std::vector<GeneratedExplanation> outputs;  // canonical order
  std::vector<TaskFailure> failures;          // task order
  std::size_t requests_issued = 0;            // tasks sent, not counting retries
  std::size_t reused = 0;
};

inline const ModelEndpointConfig& config_for(const std::map<std::string, ModelEndpointConfig>& configs,
                                             const std::string& model) {
  auto it = configs.find(model);
  if (it == configs.end()) throw ConfigError(fmt::format("no endpoint config for model '{}'", model));
  return it->second;
}

inline GenerationRun run_generation(std::span<const scenario::GenerationTask> tasks,
                                    const scenario::ScenarioStore& scenarios,
                                    const std::map<std::string, ModelEndpointConfig>& configs, ChatClient& client,
                                    const GenerationOptions& opts = {}) {
  const auto& templates = opts.templates ? *opts.templates : prompt::TemplateSet::builtin();
  struct Prepared {
    const scenario::AnomalyScenario* s;
    const ModelEndpointConfig* config;
    prompt::RenderedPrompt prompt;
    std::string fingerprint;
  };
  std::vector<Prepared> prepared;
  for (const auto& t : tasks) {
    const auto* s = scenarios.find(t.scenario_id, t.tier);
    if (!s) throw InputError(fmt::format("task references unknown scenario {} / {}", t.scenario_id, t.tier));
    const auto& cfg = config_for(configs, t.generation_model);
    auto p = prompt::render_generation_prompt(*s, t.policy, templates);
    auto fp = request_fingerprint(p, cfg);
    prepared.push_back({s, &cfg, std::move(p), std::move(fp)});
  }

  std::map<std::string, const GeneratedExplanation*> done;
  for (const auto& e : opts.existing) done.emplace(e.request_fingerprint, &e);

  GenerationRun run;
  std::vector<std::size_t> pending;
  std::vector<std::optional<GeneratedExplanation>> results(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    auto it = done.find(prepared[i].fingerprint);
    if (it != done.end() && it->second->scenario_id == tasks[i].scenario_id &&
        it->second->evidence_tier == tasks[i].tier && it->second->prompt_policy == tasks[i].policy &&
        it->second->generation_model == tasks[i].generation_model) {
      results[i] = *it->second;
      ++run.reused;
    } else {
      pending.push_back(i);
    }
  }

  std::vector<std::optional<TaskFailure>> failures(tasks.size());
  std::mutex journal_mu;
  parallel_for(pending.size(), opts.parallelism, [&](std::size_t k) {
    const std::size_t i = pending[k];
    const auto& task = tasks[i];
    const auto& prep = prepared[i];
    CompletionResult r = complete(client, prep.prompt, *prep.config, opts.sleep);
    if (!r.text) {
      failures[i] = TaskFailure{task, r.failure_reason, r.failure_detail, r.attempts};
      return;
    }
    GeneratedExplanation e;
    e.dataset_name = prep.s->dataset_name;
    e.participant_id = prep.s->participant_id;
    e.target_date = prep.s->target_date.str();
    e.anomaly_type = prep.s->anomaly_type;
    e.scenario_id = task.scenario_id;
    e.evidence_tier = task.tier;
    e.prompt_policy = task.policy;
    e.generation_model = task.generation_model;
    e.explanation_text = std::move(*r.text);
    e.request_fingerprint = prep.fingerprint;
    e.timestamp = opts.clock();
    e.attempts = r.attempts;
    std::lock_guard lock(journal_mu);
    if (opts.on_result) opts.on_result(e);
    results[i] = std::move(e);
  });
  run.requests_issued = pending.size();

  for (auto& r : results)
    if (r) run.outputs.push_back(std::move(*r));
  std::stable_sort(run.outputs.begin(), run.outputs.end(),
                   [](const auto& a, const auto& b) { return eo::canonical_less(a, b); });
  for (auto& f : failures)
    if (f) run.failures.push_back(std::move(*f));
  return run;
}

// ---------------------------------------------------------------------------
// Judging

struct JudgeOptions {
  std::size_t batch_size = 10;
  // Extra attempts for a batch whose reply fails to parse.
  int max_rejudge = 2;
  std::size_t parallelism = 1;
  Sleeper sleep = real_sleep;
  const prompt::TemplateSet* templates = nullptr;
  rubric::AssembleOptions assemble;
};

struct JudgeFailure {
  std::vector<rubric::JudgmentKey> keys;
  std::string reason;  // "batch_rejected", "retries_exhausted", "permanent_error"
  std::vector<std::string> defects;
  int attempts = 0;
};

struct JudgeRun {
  std::vector<rubric::RubricJudgment> judgments;  // input order
  std::vector<JudgeFailure> failures;
  std::size_t batches = 0;
};

/// Sends explanations to the judge in fixed-size batches. Each accepted
/// judgment keeps the judge's own eo_score; dimension scores are derived
/// from its item labels.
inline JudgeRun run_judging(std::span<const GeneratedExplanation> explanations,
                            const scenario::ScenarioStore& scenarios, const ModelEndpointConfig& judge,
                            ChatClient& client, const rubric::RubricDefinition& rubric = rubric::RubricDefinition::builtin(),
                            const JudgeOptions& opts = {}) {
  if (opts.batch_size == 0) throw ConfigError("judge batch_size must be positive");
  const auto& templates = opts.templates ? *opts.templates : prompt::TemplateSet::builtin();
  const std::size_t n_batches = (explanations.size() + opts.batch_size - 1) / opts.batch_size;

  std::vector<std::vector<rubric::RubricJudgment>> accepted(n_batches);
  std::vector<std::optional<JudgeFailure>> failed(n_batches);
  parallel_for(n_batches, opts.parallelism, [&](std::size_t b) {
    auto slice = explanations.subspan(b * opts.batch_size,
                                      std::min(opts.batch_size, explanations.size() - b * opts.batch_size));
    std::vector<rubric::JudgmentKey> keys;
    for (const auto& e : slice) keys.push_back(rubric::key_of(e));
    const auto prompt =
        prompt::render_judge_prompt(rubric::assemble_judge_csv(slice, scenarios, rubric, opts.assemble), templates);

    JudgeFailure failure{keys, "", {}, 0};
    for (int round = 0; round <= opts.max_rejudge; ++round) {
      CompletionResult r = complete(client, prompt, judge, opts.sleep);
      failure.attempts += r.attempts;
      if (!r.text) {
        failure.reason = r.failure_reason;
        failure.defects = {r.failure_detail};
        if (r.failure_reason == "permanent_error") break;
        continue;
      }
      try {
        auto parsed = rubric::parse_judge_csv(rubric::strip_code_fence(*r.text), keys, rubric, judge.model_id);
        for (auto& j : parsed) {
          j.stored_dimensions.clear();
          for (double d : rubric::compute_dimension_scores(j, rubric))
            j.stored_dimensions.push_back(rubric::StoredScore{rubric::round_to(d, 4), 4});
        }
        accepted[b] = std::move(parsed);
        return;
      } catch (const rubric::BatchRejected& e) {
        failure.reason = "batch_rejected";
        failure.defects = e.defects();
      }
    }
    failed[b] = std::move(failure);
  });

  JudgeRun run;
  run.batches = n_batches;
  for (std::size_t b = 0; b < n_batches; ++b) {
    for (auto& j : accepted[b]) run.judgments.push_back(std::move(j));
    if (failed[b]) run.failures.push_back(std::move(*failed[b]));
  }
  return run;
}

}  // namespace eo::llm
