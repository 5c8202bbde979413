// eo_audit: staged command-line driver.
//
//   eo_audit <detect|scenarios|generate|judge|score|analyze|report|run-all>
//            --run-dir DIR [--config FILE] [--seed N] [--parallelism N]
//            [--mock-llm] [--force]
//
// The first command in a run directory needs --config; its resolved form is
// saved as DIR/config.json and reused by later commands. Each completed stage
// prints one JSON line on stdout. Failures print one JSON object on stderr
// and exit nonzero: 2 configuration, 3 input, 4 credentials, 1 anything else.

#include <iostream>

#include <CLI11.hpp>

#include "eo_audit/eo_audit.hpp"

namespace {

using eo::Json;
namespace pl = eo::pipeline;

struct Args {
  std::string command;
  std::string run_dir;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> parallelism;
  bool mock_llm = false;
  bool force = false;
};

int fail(std::string_view kind, std::string_view message, int code, const Json& extra = Json::object()) {
  Json err{{"error", message}, {"kind", kind}};
  err.update(extra);
  std::cerr << err.dump() << '\n';
  return code;
}

pl::AuditConfig resolve_config(const Args& args) {
  const eo::fs::path run_dir(args.run_dir);
  pl::AuditConfig cfg;
  if (!args.config.empty()) {
    cfg = pl::AuditConfig::load(args.config);
  } else if (eo::fs::exists(run_dir / "config.json")) {
    cfg = pl::AuditConfig::load(run_dir / "config.json");
  } else {
    throw eo::ConfigError("no config: pass --config or use a run directory containing config.json");
  }
  if (args.seed) cfg.seed = *args.seed;
  if (args.mock_llm) cfg.use_mock_endpoints();
  return cfg;
}

void print(const pl::StageOutcome& o) {
  std::cout << Json{{"stage", pl::to_string(o.stage)},
                    {"status", o.status == pl::StageStatus::ran ? "ran" : "up_to_date"},
                    {"summary", o.summary}}
                   .dump()
            << '\n';
}

int run(const Args& args) {
  try {
    pl::PipelineOptions opts;
    opts.parallelism = args.parallelism;
    opts.force = args.force;
    pl::Pipeline pipeline(resolve_config(args), args.run_dir, opts);
    if (args.command == "run-all") {
      for (auto stage : pl::kStages) print(pipeline.run(stage));
    } else {
      print(pipeline.run(pl::parse_stage(args.command)));
    }
    return 0;
  } catch (const pl::MissingStageOutput& e) {
    return fail("missing_stage_output", e.what(), 3, {{"stage", e.stage()}});
  } catch (const eo::llm::AuthError& e) {
    return fail("auth", e.what(), 4);
  } catch (const eo::ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const eo::InputError& e) {
    return fail("input", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audit epistemic overreach in model explanations of sensing anomalies"};
  app.require_subcommand(1);
  Args args;
  app.add_option("--run-dir", args.run_dir, "Run directory (all artifacts are written here)")->required();
  app.add_option("--config", args.config, "Audit config JSON");
  app.add_option("--seed", args.seed, "Override the sampling seed");
  app.add_option("--parallelism", args.parallelism, "Max in-flight model requests")->check(CLI::PositiveNumber);
  app.add_flag("--mock-llm", args.mock_llm, "Use the built-in offline generator and judge");
  app.add_flag("--force", args.force, "Re-run stages even when their inputs are unchanged");

  for (const char* name : {"detect", "scenarios", "generate", "judge", "score", "analyze", "report", "run-all"})
    app.add_subcommand(name)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  args.command = app.get_subcommands().front()->get_name();
  return run(args);
}
