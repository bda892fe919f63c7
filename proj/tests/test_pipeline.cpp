#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "mhese/errors.hpp"
#include "support.hpp"

using namespace mhese;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void replace(std::string& s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  REQUIRE(at != std::string::npos);
  s.replace(at, from.size(), to);
}

/// Bundled test case text with the run shortened to `duration` seconds.
std::string short_case(int k, const std::string& duration, const std::string& step_time) {
  std::string text = slurp(testing::data_path("testcase" + std::to_string(k) + ".toml"));
  replace(text, "duration = 6.0", "duration = " + duration);
  replace(text, "time = 3.5", "time = " + step_time);
  return text;
}

RunConfig parse_case(const std::string& text) {
  return parse_run_config(text, testing::data_path("inline.toml"));
}

std::string config_error(const std::string& text) {
  try {
    parse_case(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("mhese_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

int cli(const std::string& args) {
  const std::string cmd = std::string("MHESE_LOG=off ") + MHESE_CLI + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

}  // namespace

TEST_CASE("config errors name the file, line and field") {
  const std::string base = short_case(2, "1.0", "0.5");

  std::string bad_method = base;
  replace(bad_method, "method = \"both\"", "method = \"kalman\"");
  const std::string m1 = config_error(bad_method);
  CHECK(m1.find("inline.toml:") != std::string::npos);
  CHECK(m1.find("estimator.method") != std::string::npos);

  std::string bad_horizon = base;
  replace(bad_horizon, "horizon = 3", "horizon = 0");
  CHECK(config_error(bad_horizon).find("horizon") != std::string::npos);

  std::string bad_bus = base;
  replace(bad_bus, "bus = 1\n", "bus = 9\n");
  CHECK(config_error(bad_bus).find("pmu") != std::string::npos);

  std::string bad_var = base;
  replace(bad_var, "variance = 1e-6", "variance = -1.0");
  CHECK(config_error(bad_var).find("pmu.variance") != std::string::npos);

  std::string no_system = base;
  replace(no_system, "five_bus.toml", "missing_system.toml");
  CHECK(config_error(no_system).find("cannot open file") != std::string::npos);

  const std::string syntax = config_error(base + "\n[estimator\n");
  CHECK(syntax.find("inline.toml:") != std::string::npos);

  std::string bad_channel = slurp(testing::data_path("testcase3.toml"));
  replace(bad_channel, "channel = \"V3.mag\"", "channel = \"V5.mag\"");
  CHECK(config_error(bad_channel).find("bad_data.channel") != std::string::npos);

  CHECK_THROWS_AS(load_run_config(testing::data_path("nope.toml")), ConfigError);
  CHECK_THROWS_AS(parse_estimator_choice("MHE"), ConfigError);
}

TEST_CASE("bundled configurations parse") {
  for (int k = 1; k <= 3; ++k) {
    const RunConfig cfg = testing::testcase(k);
    CHECK(cfg.system.network.size() == 5);
    CHECK(cfg.system.generators.size() == 2);
    CHECK(cfg.mhe.horizon == 3);
    CHECK(cfg.bad_data.has_value() == (k == 3));
  }
  CHECK(testing::testcase(1).pmus.size() == 2);
  CHECK(testing::testcase(2).pmus.size() == 4);
  CHECK(testing::testcase(3).lnr);
}

TEST_CASE("runs are deterministic given the seed") {
  RunConfig cfg = parse_case(short_case(2, "1.0", "0.5"));
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b"), c = scratch_dir("det_c");
  write_outputs(run_experiment(cfg), cfg, a);
  write_outputs(run_experiment(cfg), cfg, b);
  for (const auto& entry : fs::directory_iterator(a)) {
    const fs::path other = b / entry.path().filename();
    REQUIRE(fs::exists(other));
    CHECK_MESSAGE(slurp(entry.path()) == slurp(other), entry.path().filename().string());
  }

  cfg.scenario.noise_seed += 1;
  write_outputs(run_experiment(cfg), cfg, c);
  CHECK(slurp(a / "truth.csv") == slurp(c / "truth.csv"));
  CHECK(slurp(a / "measurements.csv") != slurp(c / "measurements.csv"));
}

TEST_CASE("single-PMU run: finite MHE errors, SSE unobservable") {
  RunConfig cfg = parse_case(short_case(1, "1.0", "0.5"));
  cfg.lnr = true;
  const ExperimentResult res = run_experiment(cfg);
  REQUIRE(res.mse_mhe);
  CHECK(res.mse_mhe->size() == 5);
  CHECK(res.mse_mhe->allFinite());
  CHECK_FALSE(res.mse_sse);
  REQUIRE(res.sse_error);
  CHECK(res.sse_error->find("unobservable") != std::string::npos);
  CHECK(res.state_dim == 84);
  CHECK(res.unconverged == 0);
  const double it = mean_iterations(res.mhe);
  CHECK(it >= 1.0);
  CHECK(it <= 5.0);
  for (const BadDataRecord& r : res.baddata) CHECK(r.action != "removed");

  const fs::path dir = scratch_dir("tc1");
  write_outputs(res, cfg, dir);
  const std::string report = format_report(dir);
  CHECK(report.find("removals: none") != std::string::npos);
  CHECK(report.find("unobservable") != std::string::npos);
}

TEST_CASE("report has one row per node and both estimators") {
  const RunConfig cfg = parse_case(short_case(2, "1.0", "0.5"));
  const fs::path dir = scratch_dir("tc2");
  write_outputs(run_experiment(cfg), cfg, dir);
  const std::string report = format_report(dir);
  CHECK(report.find("MSE mhe") != std::string::npos);
  CHECK(report.find("MSE sse") != std::string::npos);
  std::istringstream lines(report);
  std::string line;
  int rows = 0;
  while (std::getline(lines, line)) {
    std::istringstream f(line);
    int node = 0;
    double a = 0.0, b = 0.0;
    if (f >> node >> a >> b) ++rows;
  }
  CHECK(rows == 5);
  for (const char* name : {"truth.csv", "measurements.csv", "estimates_mhe.csv", "estimates_sse.csv",
                           "mse.csv", "iterations.csv", "baddata_log.csv", "residual_index.csv",
                           "summary.json"}) {
    CHECK_MESSAGE(fs::exists(dir / name), name);
  }
  CHECK_THROWS_AS(format_report(scratch_dir("empty")), Error);
}

TEST_CASE("bad-data log names the corrupted channel") {
  std::string text = slurp(testing::data_path("testcase3.toml"));
  replace(text, "duration = 6.0", "duration = 3.3");
  replace(text, "time = 3.5", "time = 3.2");
  replace(text, "method = \"both\"", "method = \"mhe\"");
  const ExperimentResult res = run_experiment(parse_case(text));
  int removed = 0;
  for (const BadDataRecord& r : res.baddata) {
    if (r.action != "removed") continue;
    ++removed;
    CHECK(r.channel == "V3.mag");
    CHECK(r.t >= 3.0 - 1e-9);
  }
  CHECK(removed > 0);
}

TEST_CASE("command-line exit codes") {
  const fs::path dir = scratch_dir("cli");
  const auto write = [&](const std::string& name, const std::string& text) {
    std::string t = text;
    replace(t, "five_bus.toml", testing::data_path("five_bus.toml"));
    std::ofstream(dir / name) << t;
    return (dir / name).string();
  };
  const std::string ok = write("ok.toml", short_case(2, "0.3", "0.2"));
  const std::string tc1 = write("tc1.toml", short_case(1, "0.3", "0.2"));
  std::string broken = short_case(2, "0.3", "0.2");
  replace(broken, "horizon = 3", "horizon = \"three\"");
  const std::string bad = write("bad.toml", broken);

  CHECK(cli("run " + ok + " --out " + (dir / "out").string()) == 0);
  CHECK(fs::exists(dir / "out" / "summary.json"));
  CHECK(cli("report " + (dir / "out").string()) == 0);
  CHECK(cli("run " + bad) == 2);
  CHECK(cli("run " + (dir / "absent.toml").string()) == 2);
  CHECK(cli("run " + ok + " --estimator kalman") == 2);
  CHECK(cli("report " + (dir / "nothing").string()) == 2);
  CHECK(cli("run " + tc1 + " --estimator sse --out " + (dir / "sse").string()) == 4);
  CHECK(cli("run " + tc1 + " --out " + (dir / "both").string()) == 0);
  CHECK(cli("") == 2);
}

TEST_CASE("line-charging variant runs end to end") {
  std::string text = short_case(2, "1.0", "0.5");
  replace(text, "five_bus.toml", "five_bus_charging.toml");
  const RunConfig cfg = parse_case(text);
  CHECK(cfg.system.name == "five_bus_charging");
  const ExperimentResult res = run_experiment(cfg);
  CHECK(res.unconverged == 0);
  REQUIRE(res.mse_mhe);
  REQUIRE(res.mse_sse);
  CHECK(res.mse_mhe->maxCoeff() <= 1e-5);
  CHECK(res.mse_sse->maxCoeff() <= 1e-5);
}
