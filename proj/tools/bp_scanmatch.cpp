// Command-line front end: simulate, match, benchmark, oracle-check.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "bpsm/bpsm.hpp"

namespace {

using namespace bpsm;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDegraded = 3;
constexpr int kExitComponent = 4;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string methods;
  unsigned jobs = 1;
};

std::uint64_t parse_seed(const std::string& text, const std::string& origin) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used, 10);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || text.front() == '-') {
    throw ConfigError(origin + ": invalid seed '" + text + "'");
  }
  return v;
}

/// Flag beats environment beats config file.
std::uint64_t resolve_seed(const CommonOptions& o, std::uint64_t config_seed) {
  if (o.seed) return *o.seed;
  if (const char* env = std::getenv("BP_SCANMATCH_SEED"); env != nullptr && *env != '\0') {
    return parse_seed(env, "BP_SCANMATCH_SEED");
  }
  return config_seed;
}

ExperimentConfig config_or_default(const CommonOptions& o) {
  if (!o.config.empty()) return load_config(o.config);
  return ExperimentConfig{};
}

nlohmann::json pose_object(const Pose& p) {
  const auto c = to_chart(p);
  return {{"x", c.x}, {"y", c.y}, {"theta", c.theta}};
}

void write_json(const nlohmann::json& j, const std::string& out, const std::string& file_name) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
    return;
  }
  fs::create_directories(out);
  text_io::write_file(fs::path(out) / file_name, text);
}

// ---------------------------------------------------------------- simulate

int run_simulate(const CommonOptions& o, std::size_t trial) {
  if (o.config.empty()) throw ConfigError("simulate needs --config");
  if (o.out.empty()) throw ConfigError("simulate needs --out");
  auto config = load_config(o.config);
  config.seed = resolve_seed(o, config.seed);
  const Scenario scenario(config);
  const auto scans = simulate_scans(scenario, config, trial);
  fs::create_directories(o.out);
  std::ostringstream poses;
  poses << "k,x,y,theta\n";
  for (std::size_t k = 0; k < scans.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "scan_%04zu.csv", k);
    save_cloud(scans[k], fs::path(o.out) / name);
    const auto c = to_chart(scenario.poses[k]);
    poses << k << ',' << text_io::format_double(c.x) << ',' << text_io::format_double(c.y) << ','
          << text_io::format_double(c.theta) << '\n';
  }
  text_io::write_file(fs::path(o.out) / "poses.csv", poses.str());
  std::cerr << "wrote " << scans.size() << " scans to " << o.out << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ match

int run_match(const CommonOptions& o, const std::string& source_path, const std::string& destination_path) {
  auto config = config_or_default(o);
  config.seed = resolve_seed(o, config.seed);
  const auto methods = o.methods.empty() ? std::vector<std::string>{"proposed"} : parse_methods(o.methods);

  const auto source = load_source_cloud(source_path);
  SourceCloud destination;
  SurfaceCloud surface;
  if (peek_cloud_kind(destination_path) == CloudKind::kSurface) {
    surface = load_surface_cloud(destination_path);
    destination.points = surface.points;
  } else {
    destination = load_source_cloud(destination_path);
    surface = estimate_normals(destination.points, config.normal_options());
  }

  nlohmann::json out = {{"source", fs::absolute(source_path).string()},
                        {"destination", fs::absolute(destination_path).string()},
                        {"seed", config.seed}};
  bool failed = false;
  for (const auto& m : methods) {
    nlohmann::json r;
    try {
      if (m == "proposed") {
        const auto result = match_scans(source, surface, config.inference_config(), CounterRng(config.seed).split("match"));
        const auto& d = result.diagnostics;
        nlohmann::json assoc = nlohmann::json::array();
        for (Eigen::Index i = 0; i < result.association_marginals.rows(); ++i) {
          Eigen::Index best = 0;
          const double p = result.association_marginals.row(i).maxCoeff(&best);
          assoc.push_back({{"a", best}, {"probability", p}});
        }
        r = {{"map_pose", pose_object(result.map_pose)},
             {"log_posterior_at_map", result.log_posterior_at_map},
             {"initial_pose", pose_object(result.initial_pose)},
             {"diagnostics",
              {{"n_destination", d.n_destination},
               {"n_source", d.n_source},
               {"dropped_sources", d.dropped_sources},
               {"bp_iterations", d.bp_iterations},
               {"bp_converged", d.bp_converged},
               {"refinement_iterations", d.refinement_iterations},
               {"refinement_converged", d.refinement_converged},
               {"initial_sample_index", d.initial_sample_index},
               {"initial_log_posterior", d.initial_log_posterior},
               {"sample_ess", d.sample_ess},
               {"candidates_refined", d.candidates_refined}}},
             {"map_associations", assoc}};
      } else if (m == "ndt") {
        const auto result = ndt_register(source, destination.points, Pose::identity(), config.ndt_options());
        r = {{"pose", pose_object(result.pose)},
             {"score", result.score},
             {"iterations", result.iterations},
             {"converged", result.converged}};
      } else {
        const auto result = imls_register(source, surface, Pose::identity(), config.imls_config());
        r = {{"pose", pose_object(result.pose)},
             {"cost", result.cost},
             {"used_points", result.used_points},
             {"iterations", result.iterations},
             {"converged", result.converged}};
      }
    } catch (const Error& e) {
      r = {{"error", e.what()}};
      failed = true;
    }
    out[m] = r;
  }
  write_json(out, o.out, "match.json");
  return failed ? kExitComponent : kExitOk;
}

// -------------------------------------------------------------- benchmark

int run_benchmark_command(const CommonOptions& o) {
  if (o.config.empty()) throw ConfigError("benchmark needs --config");
  if (o.out.empty()) throw ConfigError("benchmark needs --out");
  auto config = load_config(o.config);
  config.seed = resolve_seed(o, config.seed);
  BenchmarkOptions options;
  if (!o.methods.empty()) options.methods = parse_methods(o.methods);
  options.jobs = o.jobs;
  options.progress = [](std::size_t done, std::size_t total) {
    std::cerr << "\rtrials " << done << "/" << total << std::flush;
    if (done == total) std::cerr << "\n";
  };
  const auto report = run_benchmark(config, options);
  emit_report(report, o.out);

  std::cout << "method       e_trans q50  e_trans q95  e_rot q50 (deg/m)  e_rot q95 (deg/m)  failed\n";
  for (const auto& s : report.summaries) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-11s  %10.3f%%  %10.3f%%  %16.4f  %16.4f  %zu/%zu\n",
                  method_label(s.method).c_str(), 100.0 * s.quantiles.at("e_trans").at(50),
                  100.0 * s.quantiles.at("e_trans").at(95), rad2deg(s.quantiles.at("e_rot").at(50)),
                  rad2deg(s.quantiles.at("e_rot").at(95)), s.failures, s.evaluated);
    std::cout << line;
  }
  std::cout << "frames per trial " << report.frames_per_trial << ", trials " << report.trials << ", stationary "
            << report.stationary_frames << ", wall " << report.wall_seconds << " s\n";
  if (report.degraded) {
    std::cerr << "benchmark degraded: more than 10% of frames failed for some method\n";
    return kExitDegraded;
  }
  return kExitOk;
}

// ----------------------------------------------------------- oracle-check

int run_oracle_check(const CommonOptions& o) {
  const std::uint64_t seed = resolve_seed(o, 1);
  std::vector<OracleOutcome> outcomes;
  outcomes.push_back(check_bp_trees(200, seed));
  ToyOptions single;
  single.destination_points = 1;
  auto tree = check_posterior_enumeration(10, 2000, 8, seed, 1e-9, single);
  tree.name = "posterior-vs-enumeration-single-destination";
  outcomes.push_back(tree);
  outcomes.push_back(check_posterior_enumeration(5, 5000, 10, seed));
  bool ok = true;
  for (const auto& r : outcomes) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitComponent;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scan matching with belief-propagation data association"};
  app.require_subcommand(1);
  CommonOptions o;
  auto add_common = [&](CLI::App* sub, bool needs_jobs) {
    sub->add_option("--config", o.config, "Experiment config (JSON)");
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { o.seed = s; },
                                            "Random seed (overrides config and BP_SCANMATCH_SEED)");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--methods", o.methods, "Comma-separated subset of proposed,ndt,imls");
    if (needs_jobs) sub->add_option("--jobs", o.jobs, "Worker threads (0 = all cores)");
  };

  std::size_t trial = 0;
  auto* simulate = app.add_subcommand("simulate", "Write the scans of one Monte Carlo trial");
  add_common(simulate, false);
  simulate->add_option("--trial", trial, "Trial index");

  std::string source_path, destination_path;
  auto* match = app.add_subcommand("match", "Match a source cloud against a destination cloud");
  add_common(match, false);
  match->add_option("--source", source_path, "Source cloud file")->required();
  match->add_option("--destination", destination_path, "Destination cloud file (points or surface)")->required();

  auto* benchmark = app.add_subcommand("benchmark", "Monte Carlo benchmark with drift quantiles");
  add_common(benchmark, true);

  auto* oracle = app.add_subcommand("oracle-check", "Enumeration oracles at toy sizes");
  add_common(oracle, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*simulate) return run_simulate(o, trial);
    if (*match) return run_match(o, source_path, destination_path);
    if (*benchmark) return run_benchmark_command(o);
    if (*oracle) return run_oracle_check(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitComponent;
  }
  return kExitOk;
}
