#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bpsm/harness.hpp"

namespace bpsm {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "bpsm_harness_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Config around the bundled map with a short straight trajectory.
ExperimentConfig short_config(const fs::path& dir, double length, bool noiseless) {
  text_io::write_file(dir / "trajectory.csv",
                      "# bp-scanmatch trajectory v1\n60,11\n" + text_io::format_double(60.0 + length) + ",11\n");
  nlohmann::json j = {{"schema", "bp-scanmatch-config/1"},
                      {"map", std::string(BPSM_DATA_DIR) + "/demo_map.csv"},
                      {"trajectory", {{"waypoints", "trajectory.csv"}}},
                      {"inference", {{"n_p", 300}}},
                      {"n_mc", 1},
                      {"seed", 3}};
  if (noiseless) {
    j["sensor"] = {{"sigma_range", 0.0}, {"sigma_bearing_deg", 0.0}};
    j["clutter"] = {{"lambda_na", 0.0}};
  }
  return parse_config(j, dir);
}

std::string dump(const BenchmarkReport& r) { return report_to_json(r).dump(); }

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text_io::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) row.push_back(field);
    rows.push_back(row);
  }
  return rows;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BPSM_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Quantile, Examples) {
  const std::vector<double> a{1.0, 2.0, 3.0, 4.0, 100.0};
  EXPECT_EQ(compute_quantile(a, 50), 3.0);
  const std::vector<double> single{5.0};
  for (const double q : {0.0, 1.0, 50.0, 95.0, 100.0}) EXPECT_EQ(compute_quantile(single, q), 5.0);
  std::vector<double> hundred;
  for (int k = 1; k <= 100; ++k) hundred.push_back(k);
  EXPECT_EQ(compute_quantile(hundred, 95), 95.0);
  EXPECT_EQ(compute_quantile(hundred, 50), 50.0);
}

TEST(Quantile, IgnoresNan) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::vector<double> v{nan, 4.0, 1.0, nan, 2.0};
  EXPECT_EQ(compute_quantile(v, 50), 2.0);
  EXPECT_EQ(count_nan(v), 2u);
  const std::vector<double> all_nan{nan, nan};
  EXPECT_THROW(compute_quantile(all_nan, 50), ContractViolation);
  EXPECT_THROW(compute_quantile(std::vector<double>{}, 50), ContractViolation);
  EXPECT_THROW(compute_quantile(v, 101), ContractViolation);
}

TEST(Quantile, MatchesSortOracle) {
  CounterRng rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + static_cast<std::size_t>(rng.uniform01() * 60.0);
    std::vector<double> v;
    for (std::size_t k = 0; k < n; ++k) v.push_back(std::round(rng.uniform(0.0, 20.0)));
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (const double q : {5.0, 50.0, 95.0, 99.0}) {
      // Smallest sorted value with at least q% of samples <= it.
      double expected = sorted.back();
      for (std::size_t k = 0; k < n; ++k) {
        const auto at_most = static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), sorted[k]) - sorted.begin());
        if (100.0 * static_cast<double>(at_most) >= q * static_cast<double>(n)) {
          expected = sorted[k];
          break;
        }
      }
      EXPECT_EQ(compute_quantile(v, q), expected);
    }
  }
}

TEST(Trajectory, AccumulateExamples) {
  EXPECT_EQ(accumulate_trajectory({}).size(), 1u);
  const std::vector<Pose> steps{Pose::pure_translation(1.0, 0.0), Pose::pure_translation(1.0, 0.0)};
  const auto t = accumulate_trajectory(steps);
  ASSERT_EQ(t.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(t[k].translation().x(), static_cast<double>(k), 1e-15);
    EXPECT_EQ(t[k].translation().y(), 0.0);
  }
}

TEST(Trajectory, AccumulatingTruthReproducesPoses) {
  TrajectorySpec spec;
  spec.waypoints = load_waypoints(fs::path(BPSM_DATA_DIR) / "benchmark_trajectory.csv");
  const auto poses = generate_trajectory(spec);
  std::vector<Pose> rel;
  for (std::size_t k = 1; k < poses.size(); ++k) rel.push_back(motion_between(poses[k - 1], poses[k]));
  const auto acc = accumulate_trajectory(rel);
  for (std::size_t k = 0; k < poses.size(); ++k) {
    const Pose expected = compose(poses[0].inverse(), poses[k]);
    EXPECT_LE((acc[k].matrix() - expected.matrix()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Config, BundledBenchmarkLoads) {
  const auto c = load_config(fs::path(BPSM_DATA_DIR) / "benchmark.json");
  EXPECT_EQ(c.n_mc, 100u);
  EXPECT_EQ(c.model.sigma_e, 0.03);
  EXPECT_EQ(c.model.f_a, 0.8);
  EXPECT_EQ(c.model.d_th, 2.0);
  EXPECT_EQ(c.clutter.lambda_na, 1.0);
  EXPECT_EQ(c.baselines.imls_h, 2.0);
  EXPECT_TRUE(c.map.is_absolute());
}

TEST(Config, UnknownKeyRejectedWithPath) {
  const auto dir = scratch("unknown");
  nlohmann::json j = config_to_json(short_config(dir, 1.6, false));
  j["model"]["sigma"] = 0.1;
  try {
    parse_config(j, dir);
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.sigma"), std::string::npos) << e.what();
  }
  j = config_to_json(short_config(dir, 1.6, false));
  j["extra"] = 1;
  EXPECT_THROW(parse_config(j, dir), ConfigError);
}

TEST(Config, Rejections) {
  const auto dir = scratch("reject");
  const nlohmann::json good = config_to_json(short_config(dir, 1.6, false));
  auto expect_rejected = [&](const std::function<void(nlohmann::json&)>& edit) {
    nlohmann::json j = good;
    edit(j);
    EXPECT_THROW(parse_config(j, dir), ConfigError) << j.dump();
  };
  expect_rejected([](auto& j) { j["schema"] = "bp-scanmatch-config/2"; });
  expect_rejected([](auto& j) { j["model"]["sigma_e"] = "0.03"; });
  expect_rejected([](auto& j) { j["model"]["sigma_e"] = -1.0; });
  expect_rejected([](auto& j) { j["model"]["f_a"] = 1.0; });
  expect_rejected([](auto& j) { j["n_mc"] = -3; });
  expect_rejected([](auto& j) { j["n_mc"] = 1.5; });
  expect_rejected([](auto& j) { j["map"] = "missing_map.csv"; });
  expect_rejected([](auto& j) { j["inference"]["refine_method"] = "newton"; });
  expect_rejected([](auto& j) { j["prior"]["x"] = nlohmann::json::array({1.0}); });
}

TEST(Config, EchoReloads) {
  const auto dir = scratch("echo");
  const auto c = short_config(dir, 1.6, true);
  const auto echo = config_to_json(c);
  const auto reloaded = parse_config(echo, fs::path("/"));
  EXPECT_EQ(config_to_json(reloaded), echo);
}

TEST(Methods, Parse) {
  EXPECT_EQ(parse_methods("proposed,ndt,imls"), (std::vector<std::string>{"proposed", "ndt", "imls"}));
  EXPECT_EQ(parse_methods("imls"), std::vector<std::string>{"imls"});
  EXPECT_THROW(parse_methods("icp"), ConfigError);
  EXPECT_EQ(method_label("imls"), "IMLS-style");
}

TEST(Summarize, ExcludesStationaryAndCountsFailures) {
  BenchmarkReport report;
  report.methods = {"ndt"};
  auto record = [&](std::size_t frame, double e, const std::string& status) {
    FrameRecord r;
    r.frame = frame;
    r.method = "ndt";
    r.truth = Pose::pure_translation(1.0, 0.0);
    r.e_trans = e;
    r.e_rot = e;
    r.status = status;
    report.records.push_back(r);
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  record(1, 0.1, "ok");
  record(2, nan, "stationary");
  record(3, 0.3, "ok");
  record(4, nan, "failed: no overlap");
  record(5, 0.2, "ok");
  summarize(report);
  const auto& s = report.summary("ndt");
  EXPECT_EQ(report.stationary_frames, 1u);
  EXPECT_EQ(s.evaluated, 4u);
  EXPECT_EQ(s.failures, 1u);
  EXPECT_EQ(s.nan_count, 1u);
  EXPECT_EQ(s.quantiles.at("e_trans").at(50), 0.2);
  EXPECT_EQ(s.quantiles.at("e_trans").at(95), 0.3);
  EXPECT_TRUE(s.degraded);
  EXPECT_TRUE(report.degraded);
}

TEST(Benchmark, NoiselessSingleFrameIsAccurate) {
  const auto dir = scratch("noiseless");
  auto c = short_config(dir, 0.8, true);
  c.inference.n_p = 2000;
  BenchmarkOptions options;
  options.methods = {"proposed"};
  const auto report = run_benchmark(c, options);
  ASSERT_EQ(report.frames_per_trial, 1u);
  ASSERT_EQ(report.records.size(), 1u);
  EXPECT_EQ(report.records[0].status, "ok");
  EXPECT_LT(report.records[0].e_trans, 0.01);
}

TEST(Benchmark, DeterministicAcrossJobCounts) {
  const auto dir = scratch("jobs");
  auto c = short_config(dir, 1.6, false);
  c.n_mc = 3;
  c.inference.n_p = 200;
  BenchmarkOptions one, three;
  one.jobs = 1;
  three.jobs = 3;
  const auto a = run_benchmark(c, one);
  const auto b = run_benchmark(c, three);
  EXPECT_EQ(dump(a), dump(b));
  emit_report(a, dir / "a");
  emit_report(b, dir / "b");
  for (const char* f : {"report.json", "errors.csv", "quantiles.csv", "trajectory_truth.csv", "trajectory_ndt.csv"}) {
    EXPECT_EQ(text_io::read_file(dir / "a" / f), text_io::read_file(dir / "b" / f)) << f;
  }
}

TEST(Benchmark, ReportContents) {
  const auto dir = scratch("report");
  auto c = short_config(dir, 1.6, false);
  c.inference.n_p = 200;
  const auto report = run_benchmark(c);
  emit_report(report, dir / "out");
  for (const char* f : {"report.json", "errors.csv", "quantiles.csv", "timing.json", "trajectory_truth.csv",
                        "trajectory_proposed.csv", "trajectory_ndt.csv", "trajectory_imls.csv"}) {
    EXPECT_TRUE(fs::is_regular_file(dir / "out" / f)) << f;
  }
  const auto q = read_csv(dir / "out" / "quantiles.csv");
  EXPECT_EQ(q.size(), 1u + 3u * 2u * 2u);
  for (const auto& s : report.summaries) {
    for (const char* metric : {"e_trans", "e_rot"}) {
      EXPECT_LE(s.quantiles.at(metric).at(50), s.quantiles.at(metric).at(95));
    }
  }
  for (const auto& r : report.records) {
    if (r.status != "ok") continue;
    EXPECT_EQ(r.e_trans, translation_error(r.estimate, r.truth));
    EXPECT_EQ(r.e_rot, rotation_error(r.estimate, r.truth));
  }
  const auto errors = read_csv(dir / "out" / "errors.csv");
  EXPECT_EQ(errors.size(), 1u + report.records.size());
  const auto traj = read_csv(dir / "out" / "trajectory_truth.csv");
  EXPECT_EQ(traj.size(), 1u + 1u + report.frames_per_trial);

  const auto j = nlohmann::json::parse(text_io::read_file(dir / "out" / "report.json"));
  EXPECT_EQ(j.at("schema"), "bp-scanmatch-report/1");
  const auto reloaded = parse_config(j.at("config"), fs::path("/"));
  EXPECT_EQ(config_to_json(reloaded), j.at("config"));
}

TEST(Benchmark, GoldenTwoFrameRun) {
  const fs::path golden = fs::path(BPSM_TEST_DIR) / "golden";
  const auto report = run_benchmark(load_config(golden / "two_frame.json"));
  const auto dir = scratch("golden");
  emit_report(report, dir);
  const auto got = read_csv(dir / "errors.csv");
  const auto want = read_csv(golden / "two_frame_errors.csv");
  ASSERT_EQ(got.size(), want.size());
  ASSERT_EQ(got[0], want[0]);
  for (std::size_t k = 1; k < got.size(); ++k) {
    ASSERT_EQ(got[k].size(), want[k].size());
    for (std::size_t f = 0; f < got[k].size(); ++f) {
      if (f == 3 || f == 4) {
        const double a = std::stod(got[k][f]);
        const double b = std::stod(want[k][f]);
        EXPECT_NEAR(a, b, 1e-6 * std::abs(b) + 1e-12) << "row " << k << " field " << f;
      } else {
        EXPECT_EQ(got[k][f], want[k][f]) << "row " << k << " field " << f;
      }
    }
  }
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = scratch("cli");
    config_ = dir_ / "config.json";
    auto c = short_config(dir_, 0.8, false);
    c.inference.n_p = 200;
    text_io::write_file(config_, config_to_json(c).dump(2));
    unsetenv("BP_SCANMATCH_SEED");
  }

  fs::path dir_;
  fs::path config_;
};

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("benchmark --config " + (dir_ / "missing.json").string() + " --out " + (dir_ / "o").string()), 2);
  text_io::write_file(dir_ / "bad.json", "{\"schema\": \"bp-scanmatch-config/1\", \"typo\": 1}");
  EXPECT_EQ(run_cli("benchmark --config " + (dir_ / "bad.json").string() + " --out " + (dir_ / "o").string()), 2);
  EXPECT_EQ(run_cli("benchmark --config " + config_.string() + " --out " + (dir_ / "ok").string() +
                    " --methods ndt"),
            0);
  EXPECT_TRUE(fs::is_regular_file(dir_ / "ok" / "report.json"));
}

TEST_F(Cli, SimulateThenMatch) {
  const auto scans = dir_ / "scans";
  ASSERT_EQ(run_cli("simulate --config " + config_.string() + " --out " + scans.string()), 0);
  ASSERT_TRUE(fs::is_regular_file(scans / "scan_0000.csv"));
  ASSERT_TRUE(fs::is_regular_file(scans / "scan_0001.csv"));
  const auto out = dir_ / "match";
  ASSERT_EQ(run_cli("match --config " + config_.string() + " --source " + (scans / "scan_0001.csv").string() +
                    " --destination " + (scans / "scan_0000.csv").string() + " --methods proposed,ndt,imls --out " +
                    out.string()),
            0);
  const auto j = nlohmann::json::parse(text_io::read_file(out / "match.json"));
  EXPECT_NEAR(j.at("proposed").at("map_pose").at("x").get<double>(), 0.8, 0.05);
  EXPECT_TRUE(j.contains("ndt"));
  EXPECT_TRUE(j.contains("imls"));
}

TEST_F(Cli, SeedPrecedence) {
  auto simulate = [&](const std::string& env, const std::string& flag, const std::string& name) {
    const auto out = dir_ / name;
    const std::string prefix = env.empty() ? "" : "BP_SCANMATCH_SEED=" + env + " ";
    const std::string cmd = prefix + BPSM_CLI + " simulate --config " + config_.string() + " --out " + out.string() +
                            (flag.empty() ? "" : " --seed " + flag) + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    EXPECT_EQ(WEXITSTATUS(status), 0) << cmd;
    return text_io::read_file(out / "scan_0000.csv");
  };
  const auto by_flag = simulate("", "11", "flag");
  const auto by_env = simulate("11", "", "env");
  const auto flag_wins = simulate("12", "11", "both");
  const auto config_seed = simulate("", "", "config");
  EXPECT_EQ(by_flag, by_env);
  EXPECT_EQ(by_flag, flag_wins);
  EXPECT_NE(by_flag, config_seed);

  const std::string bad = "BP_SCANMATCH_SEED=abc " + std::string(BPSM_CLI) + " simulate --config " + config_.string() +
                          " --out " + (dir_ / "bad").string() + " > /dev/null 2>&1";
  EXPECT_EQ(WEXITSTATUS(std::system(bad.c_str())), 2);
}

}  // namespace
}  // namespace bpsm
