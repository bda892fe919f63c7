// mhese: run estimation scenarios and summarize their outputs.
//
//   mhese run data/testcase2.toml --seed 7 --out out/tc2
//   mhese report out/tc2
//
// Log verbosity comes from MHESE_LOG (trace, debug, info, warn, error, off).

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <spdlog/spdlog.h>
#include <string>

#include "mhese/config.hpp"
#include "mhese/errors.hpp"
#include "mhese/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kEstimation = 3, kUnobservableSse = 4 };

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* lvl = std::getenv("MHESE_LOG")) {
    spdlog::set_level(spdlog::level::from_str(lvl));
  }
}

struct RunOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> estimator;
  std::optional<bool> lnr;
  std::optional<int> horizon;
};

int run(const RunOptions& opt) {
  mhese::RunConfig cfg;
  try {
    cfg = mhese::load_run_config(opt.config);
    if (opt.seed) cfg.scenario.noise_seed = *opt.seed;
    if (opt.out) cfg.output_dir = *opt.out;
    if (opt.estimator) cfg.estimator = mhese::parse_estimator_choice(*opt.estimator);
    if (opt.lnr) cfg.lnr = *opt.lnr;
    if (opt.horizon) {
      cfg.mhe.horizon = *opt.horizon;
      cfg.mhe.validate();
    }
  } catch (const mhese::ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return kConfig;
  } catch (const mhese::InvalidParameters& e) {
    spdlog::error("config: {}", e.what());
    return kConfig;
  }

  spdlog::info("running {} (seed {}, estimator {}, L = {}, lnr {})", opt.config,
               cfg.scenario.noise_seed, mhese::to_string(cfg.estimator), cfg.mhe.horizon,
               cfg.lnr ? "on" : "off");
  mhese::ExperimentResult res;
  try {
    res = mhese::run_experiment(cfg);
    mhese::write_outputs(res, cfg, cfg.output_dir);
  } catch (const mhese::Error& e) {
    spdlog::error("estimation: {}", e.what());
    return kEstimation;
  }
  spdlog::info("wrote {}", cfg.output_dir.string());
  spdlog::debug("{} MHE windows, {} SSE windows", res.mhe.size(), res.sse.size());

  if (res.sse_error) {
    if (cfg.estimator == mhese::EstimatorChoice::Sse) {
      spdlog::error("sse: {}", *res.sse_error);
      return kUnobservableSse;
    }
    spdlog::warn("sse: {}", *res.sse_error);
  }
  if (res.unconverged > 0) {
    spdlog::error("{} estimation windows did not converge", res.unconverged);
    return kEstimation;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Moving-horizon dynamic state estimation for power systems"};
  app.require_subcommand(1);

  RunOptions opt;
  CLI::App* run_cmd = app.add_subcommand("run", "Simulate, estimate and write outputs");
  run_cmd->add_option("config", opt.config, "Test-case TOML file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--seed", opt.seed, "PMU noise seed");
  run_cmd->add_option("--out", opt.out, "Output directory");
  run_cmd->add_option("--estimator", opt.estimator, "mhe, sse or both")
      ->check(CLI::IsMember({"mhe", "sse", "both"}));
  run_cmd->add_option("--lnr", opt.lnr, "Bad-data rejection on/off (true/false)");
  run_cmd->add_option("--horizon", opt.horizon, "MHE window length L")->check(CLI::PositiveNumber);

  std::string report_dir;
  CLI::App* report_cmd = app.add_subcommand("report", "Print the summary of a finished run");
  report_cmd->add_option("dir", report_dir, "Output directory of a run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfig;
  }

  if (*run_cmd) return run(opt);
  try {
    std::cout << mhese::format_report(report_dir);
  } catch (const mhese::Error& e) {
    spdlog::error("report: {}", e.what());
    return kConfig;
  }
  return kOk;
}
