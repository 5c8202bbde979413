#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include "eo_audit/eo_audit.hpp"

namespace eo::testing {

inline fs::path source_dir() { return fs::path(EO_SOURCE_DIR); }
inline fs::path fixture_dir() { return source_dir() / "data" / "fixtures"; }
inline fs::path golden_dir() { return source_dir() / "tests" / "golden"; }

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "eo_audit_test_XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw Error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

// Small profile: three E1 channels, one E2, one text channel in E3.
inline ingest::DatasetProfile tiny_profile(std::string name = "Tiny") {
  ingest::DatasetProfile p;
  p.dataset_name = std::move(name);
  p.channel_specs = {{"steps", ingest::ValueKind::numeric, "steps", ingest::Sampling::daily},
                     {"sleep_hours", ingest::ValueKind::numeric, "h", ingest::Sampling::daily},
                     {"mood", ingest::ValueKind::numeric, "1-5", ingest::Sampling::intermittent},
                     {"calls", ingest::ValueKind::numeric, "count", ingest::Sampling::daily},
                     {"note", ingest::ValueKind::text, "", ingest::Sampling::daily}};
  p.tiers = {{"E1", {"steps", "sleep_hours", "mood"}},
             {"E2", {"steps", "sleep_hours", "mood", "calls"}},
             {"E3", {"steps", "sleep_hours", "mood", "calls", "note"}}};
  p.anomaly_metrics = {{"activity", "steps"}, {"sleep", "sleep_hours"}, {"affect", "mood"}};
  return p;
}

// Brute-force trailing baseline: scans the whole series for each target.
struct OracleBaseline {
  double mean = 0;
  double sd = 0;
  std::size_t n = 0;
};

inline std::optional<OracleBaseline> oracle_baseline(const std::vector<detect::SeriesPoint>& series, Date target,
                                                     int window_days, std::size_t min_obs) {
  std::vector<double> vals;
  for (const auto& p : series) {
    const auto lag = target - p.date;
    if (lag >= 1 && lag <= window_days && p.value) vals.push_back(*p.value);
  }
  if (vals.size() < std::max<std::size_t>(min_obs, 2)) return std::nullopt;
  long double sum = 0, sumsq = 0;
  for (double v : vals) sum += v;
  const long double mean = sum / vals.size();
  for (double v : vals) sumsq += (v - mean) * (v - mean);
  const double sd = static_cast<double>(std::sqrt(sumsq / (vals.size() - 1)));
  if (!(sd > 0)) return std::nullopt;
  return OracleBaseline{static_cast<double>(mean), sd, vals.size()};
}

inline bool close_rel(double a, double b, double rel) {
  return std::fabs(a - b) <= rel * std::max({1.0, std::fabs(a), std::fabs(b)});
}

inline rubric::JudgmentKey make_key(int i, PromptPolicy policy = PromptPolicy::open_explanation,
                                    std::string model = "m1", std::string tier = "E1", std::string dataset = "DS",
                                    std::string anomaly = "activity") {
  return {fmt::format("sc-{:04d}", i), std::move(dataset), std::move(tier), std::move(anomaly), policy,
          std::move(model), fmt::format("p{}", i % 7), "2018-04-06"};
}

// Judgment whose item i is yes when bit i of `mask` is set; scores filled in.
inline rubric::RubricJudgment make_judgment(const rubric::JudgmentKey& key, std::uint32_t mask) {
  const auto& rubric = rubric::RubricDefinition::builtin();
  rubric::RubricJudgment j;
  j.key = key;
  for (std::size_t i = 0; i < rubric.size(); ++i) j.items.push_back(((mask >> i) & 1u) != 0);
  j.judge_model = "judge";
  j.rubric_version = rubric.version();
  rubric::fill_scores(j, rubric);
  return j;
}

inline int popcount16(std::uint32_t mask) { return __builtin_popcount(mask & 0xFFFFu); }

// A scenario over a hand-written record set, used by prompt and judge tests.
inline scenario::AnomalyScenario sample_scenario(const std::string& tier = "E2") {
  auto profile = tiny_profile("StudentLife-like");
  std::vector<ingest::DayRecord> records;
  const Date start = Date::parse("2018-03-20");
  const double steps[] = {8000, 12000, 8000, 12000, 10000, 9000, 11000, 10500, 9500, 4000};
  for (int d = 0; d < 10; ++d) {
    ingest::DayRecord r{"u01", start + d, {}};
    r.values["steps"] = steps[d];
    if (d != 8) r.values["sleep_hours"] = 7.0 + 0.1 * d;
    if (d % 3 == 0) r.values["mood"] = 3.0;
    r.values["calls"] = static_cast<double>(d);
    r.values["note"] = std::string(d == 9 ? "exam, \"chem\" 101" : "");
    records.push_back(std::move(r));
  }
  ingest::RecordIndex index(records);
  auto flags = detect::detect_anomalies(records, profile, "activity", {-1.0, 14, 5});
  if (flags.empty()) throw Error("sample_scenario: fixture produced no flag");
  return scenario::build_scenario(flags.back(), index, profile, tier, {3, {-1.0, 14, 5}});
}

// Chat client driven by a per-call function; counts calls.
class ScriptedClient : public llm::ChatClient {
 public:
  using Fn = std::function<std::string(const prompt::RenderedPrompt&, const llm::ModelEndpointConfig&, int call)>;
  explicit ScriptedClient(Fn fn) : fn_(std::move(fn)) {}
  std::string chat(const prompt::RenderedPrompt& p, const llm::ModelEndpointConfig& c) override {
    const int n = ++calls_;
    return fn_(p, c, n);
  }
  int calls() const { return calls_.load(); }

 private:
  Fn fn_;
  std::atomic<int> calls_{0};
};

// Local chat-completions endpoint. Replies come from the offline mock unless
// `respond` is set; request bodies and Authorization headers are recorded.
class FakeChatServer {
 public:
  using Responder = std::function<std::pair<int, std::string>(const Json& body, int call)>;

  FakeChatServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      Json body = Json::parse(req.body);
      int call;
      {
        std::lock_guard lock(mu_);
        call = static_cast<int>(bodies_.size()) + 1;
        bodies_.push_back(body);
        auth_.push_back(req.get_header_value("Authorization"));
      }
      Responder fn;
      {
        std::lock_guard lock(mu_);
        fn = respond_;
      }
      auto [status, content] = fn ? fn(body, call) : std::pair{200, mock_reply(body)};
      res.status = status;
      if (status == 200) {
        Json message{{"role", "assistant"}, {"content", content}};
        Json reply;
        reply["choices"] = Json::array();
        reply["choices"].push_back(Json{{"message", message}});
        res.set_content(reply.dump(), "application/json");
      } else {
        res.set_content(content, "text/plain");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeChatServer() {
    server_.stop();
    thread_.join();
  }

  std::string base_url() const { return fmt::format("http://127.0.0.1:{}/v1", port_); }
  void set_responder(Responder fn) {
    std::lock_guard lock(mu_);
    respond_ = std::move(fn);
  }
  std::vector<Json> bodies() const {
    std::lock_guard lock(mu_);
    return bodies_;
  }
  std::vector<std::string> auth_headers() const {
    std::lock_guard lock(mu_);
    return auth_;
  }

  // Rebuilds the prompt from the request and answers as the offline mock.
  static std::string mock_reply(const Json& body) {
    prompt::RenderedPrompt p;
    p.system_text = body["messages"][0]["content"].get<std::string>();
    p.user_text = body["messages"][1]["content"].get<std::string>();
    llm::ModelEndpointConfig c;
    c.model_id = body["model"].get<std::string>();
    if (p.user_text.rfind("```csv", 0) == 0) return mock::judge_batch(p, c.model_id);
    p.policy = p.user_text.find("\"evidence_bounded_explanation\"") != std::string::npos
                   ? PromptPolicy::evidence_bounded_explanation
                   : PromptPolicy::open_explanation;
    static const std::regex level(R"re("evidence_level":\s*"([^"]+)")re");
    if (std::smatch m; std::regex_search(p.user_text, m, level)) p.tier = m[1].str();
    return mock::generate_explanation(p, c.model_id);
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  mutable std::mutex mu_;
  Responder respond_;
  std::vector<Json> bodies_;
  std::vector<std::string> auth_;
};

inline llm::ModelEndpointConfig mock_endpoint(std::string id, int max_retries = 3) {
  llm::ModelEndpointConfig c;
  c.model_id = std::move(id);
  c.provider = llm::Provider::mock;
  c.max_retries = max_retries;
  c.initial_backoff = std::chrono::milliseconds(0);
  return c;
}

inline void no_sleep(std::chrono::milliseconds) {}

inline pipeline::AuditConfig fixture_config(std::size_t per_type_cap = 5) {
  auto cfg = pipeline::AuditConfig::load(fixture_dir() / "audit_config.json");
  cfg.per_type_cap = per_type_cap;
  cfg.use_mock_endpoints();
  return cfg;
}

inline std::map<std::string, std::string> read_tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = read_file(e.path());
  return out;
}

}  // namespace eo::testing
