#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bpsm/errors.hpp"
#include "bpsm/imls.hpp"
#include "bpsm/lidar_sim.hpp"
#include "bpsm/ndt.hpp"
#include "bpsm/pointcloud.hpp"
#include "bpsm/pose.hpp"
#include "bpsm/posterior.hpp"
#include "bpsm/rng.hpp"
#include "bpsm/text_io.hpp"

namespace bpsm {

inline constexpr std::string_view kConfigSchema = "bp-scanmatch-config/1";
inline constexpr std::string_view kReportSchema = "bp-scanmatch-report/1";

// ---------------------------------------------------------------- metrics

/// Lower empirical quantile: the smallest sample v such that at least q% of
/// the samples are <= v. NaNs are ignored; see count_nan.
inline double compute_quantile(std::span<const double> values, double q) {
  if (!(q >= 0.0 && q <= 100.0)) throw ContractViolation("quantile level must lie in [0, 100]");
  std::vector<double> v;
  v.reserve(values.size());
  for (const double x : values) {
    if (!std::isnan(x)) v.push_back(x);
  }
  if (v.empty()) throw ContractViolation("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double rank = std::ceil(q * static_cast<double>(v.size()) / 100.0);
  const auto k = static_cast<std::size_t>(std::max(rank, 1.0)) - 1;
  return v[std::min(k, v.size() - 1)];
}

inline std::size_t count_nan(std::span<const double> values) {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](double x) { return std::isnan(x); }));
}

/// T_0 = I, T_k = T_{k-1} * dP_k.
inline std::vector<Pose> accumulate_trajectory(std::span<const Pose> relative_poses) {
  std::vector<Pose> out{Pose::identity()};
  out.reserve(relative_poses.size() + 1);
  for (const auto& d : relative_poses) out.push_back(compose(out.back(), d));
  return out;
}

// ----------------------------------------------------------------- config

struct TrajectoryConfig {
  std::filesystem::path waypoints;
  double speed = 10.0;
  double scan_period = 0.08;
};

struct SensorConfig {
  double angular_resolution_deg = 1.0;
  double max_range = 100.0;
  double sigma_range = 0.05;
  double sigma_bearing_deg = 0.5;

  SensorSpec spec() const {
    return {deg2rad(angular_resolution_deg), max_range, sigma_range, deg2rad(sigma_bearing_deg)};
  }
};

struct ClutterConfig {
  double lambda_na = 1.0;
  double range_min = 0.0;
  double range_max = 100.0;
  double bearing_min_deg = 0.0;
  double bearing_max_deg = 360.0;

  ClutterSpec spec() const {
    return {lambda_na, range_min, range_max, deg2rad(bearing_min_deg), deg2rad(bearing_max_deg)};
  }
};

/// Matcher-side model. The clutter support is shared with the simulator.
struct ModelConfig {
  double sigma_e = 0.03;
  double f_a = 0.8;
  double lambda_na = 1.0;
  double d_th = 2.0;

  MeasurementModel model(const ClutterConfig& clutter) const {
    MeasurementModel m;
    m.error.sigma_e = sigma_e;
    m.associability.f_a = f_a;
    m.clutter = {lambda_na, clutter.range_min, clutter.range_max, deg2rad(clutter.bearing_min_deg),
                 deg2rad(clutter.bearing_max_deg)};
    return m;
  }
};

struct PriorConfig {
  double x_min = -10.0, x_max = 10.0;
  double y_min = -10.0, y_max = 10.0;
  double theta_min_deg = -90.0, theta_max_deg = 90.0;

  PosePrior prior() const {
    return {x_min, x_max, y_min, y_max, deg2rad(theta_min_deg), deg2rad(theta_max_deg)};
  }
};

struct InferenceSettings {
  std::size_t n_p = 2000;
  int n_da = 200;
  double bp_tol = 1e-8;
  double bp_damping = 0.0;
  int n_it = 100;
  std::string refine_method = "nelder-mead";
  bool pruning = true;
  double pruning_sigmas = 6.0;
  std::size_t global_candidates = 4;
  std::vector<double> anneal_sigmas = {1.0, 0.3, 0.1};
};

struct BaselineConfig {
  bool ndt = true;
  double ndt_cell_size = 2.0;
  bool imls = true;
  double imls_h = 2.0;
};

struct ExperimentConfig {
  std::filesystem::path map;
  TrajectoryConfig trajectory;
  SensorConfig sensor;
  ClutterConfig clutter;
  ModelConfig model;
  PriorConfig prior;
  InferenceSettings inference;
  BaselineConfig baselines;
  std::size_t n_mc = 100;
  std::uint64_t seed = 1;

  MeasurementModel measurement_model() const { return model.model(clutter); }

  InferenceConfig inference_config() const {
    InferenceConfig c;
    c.model = measurement_model();
    c.prior = prior.prior();
    c.n_p = inference.n_p;
    c.bp.max_iters = inference.n_da;
    c.bp.tol = inference.bp_tol;
    c.bp.damping = inference.bp_damping;
    c.refine.max_iters = inference.n_it;
    c.refine.method =
        inference.refine_method == "gradient-ascent" ? RefineMethod::kGradientAscent : RefineMethod::kNelderMead;
    c.refine.anneal_sigmas = inference.anneal_sigmas;
    c.pruning.enabled = inference.pruning;
    c.pruning.cutoff_sigmas = inference.pruning_sigmas;
    c.global_candidates = inference.global_candidates;
    return c;
  }

  NormalEstimationOptions normal_options() const {
    NormalEstimationOptions o;
    o.d_th = model.d_th;
    return o;
  }

  NdtOptions ndt_options() const {
    NdtOptions o;
    o.cell_size = baselines.ndt_cell_size;
    return o;
  }

  ImlsConfig imls_config() const {
    ImlsConfig c;
    c.h = baselines.imls_h;
    return c;
  }

  /// Methods enabled by the config: the proposed matcher plus toggled baselines.
  std::vector<std::string> default_methods() const {
    std::vector<std::string> m{"proposed"};
    if (baselines.ndt) m.push_back("ndt");
    if (baselines.imls) m.push_back("imls");
    return m;
  }

  /// Throws ConfigError on out-of-range values or missing files.
  void validate() const {
    try {
      sensor.spec().validate();
      clutter.spec().validate();
      measurement_model().validate();
      prior.prior().validate();
      imls_config().validate();
    } catch (const ContractViolation& e) {
      throw ConfigError(e.what());
    }
    auto require = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError(what);
    };
    require(model.d_th > 0.0, "model.d_th must be positive");
    require(trajectory.speed > 0.0 && trajectory.scan_period > 0.0,
            "trajectory speed and scan_period must be positive");
    require(inference.n_p >= 1, "inference.n_p must be at least 1");
    require(inference.n_da >= 1, "inference.n_da must be at least 1");
    require(inference.n_it >= 1, "inference.n_it must be at least 1");
    require(inference.bp_tol > 0.0, "inference.bp_tol must be positive");
    require(inference.bp_damping >= 0.0 && inference.bp_damping < 1.0, "inference.bp_damping must lie in [0, 1)");
    require(inference.refine_method == "nelder-mead" || inference.refine_method == "gradient-ascent",
            "inference.refine_method must be 'nelder-mead' or 'gradient-ascent'");
    require(inference.pruning_sigmas > 0.0, "inference.pruning_sigmas must be positive");
    for (const double s : inference.anneal_sigmas) require(s > 0.0, "inference.anneal_sigmas must be positive");
    require(baselines.ndt_cell_size > 0.0, "baselines.ndt.cell_size must be positive");
    require(n_mc >= 1, "n_mc must be at least 1");
    require(std::filesystem::is_regular_file(map), "map file not found: " + map.string());
    require(std::filesystem::is_regular_file(trajectory.waypoints),
            "trajectory waypoint file not found: " + trajectory.waypoints.string());
  }
};

namespace detail {

/// Reads the members of one JSON object and rejects any it did not consume.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if (std::is_unsigned_v<T> && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  void get(const char* key, std::vector<double>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + " must be an array of numbers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(where(key) + " must be an array of numbers");
      out.push_back(e.get<double>());
    }
  }

  void get_range(const char* key, double& lo, double& hi) {
    std::vector<double> r{lo, hi};
    get(key, r);
    if (r.size() != 2) throw ConfigError(where(key) + " must be [min, max]");
    lo = r[0];
    hi = r[1];
  }

  void get_path(const char* key, std::filesystem::path& out, const std::filesystem::path& base) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    const std::filesystem::path p(s);
    out = std::filesystem::absolute(p.is_absolute() ? p : base / p).lexically_normal();
  }

  std::optional<ObjectReader> child(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return ObjectReader(j_.at(key), joined(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key " + where(key.c_str()));
    }
  }

 private:
  std::string joined(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  std::string where(const char* key = nullptr) const {
    const std::string p = key == nullptr ? path_ : joined(key);
    return p.empty() ? "config" : "'" + p + "'";
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Parses a config document. Relative paths resolve against base_dir.
/// Values are range-checked; referenced files must exist.
inline ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  detail::ObjectReader root(j, "");
  std::string schema;
  root.get("schema", schema);
  if (schema != kConfigSchema) {
    throw ConfigError("config schema must be '" + std::string(kConfigSchema) + "', got '" + schema + "'");
  }
  root.get_path("map", c.map, base_dir);
  if (auto t = root.child("trajectory")) {
    t->get_path("waypoints", c.trajectory.waypoints, base_dir);
    t->get("speed", c.trajectory.speed);
    t->get("scan_period", c.trajectory.scan_period);
    t->finish();
  }
  if (auto s = root.child("sensor")) {
    s->get("angular_resolution_deg", c.sensor.angular_resolution_deg);
    s->get("max_range", c.sensor.max_range);
    s->get("sigma_range", c.sensor.sigma_range);
    s->get("sigma_bearing_deg", c.sensor.sigma_bearing_deg);
    s->finish();
  }
  if (auto s = root.child("clutter")) {
    s->get("lambda_na", c.clutter.lambda_na);
    s->get("range_min", c.clutter.range_min);
    s->get("range_max", c.clutter.range_max);
    s->get("bearing_min_deg", c.clutter.bearing_min_deg);
    s->get("bearing_max_deg", c.clutter.bearing_max_deg);
    s->finish();
  }
  if (auto s = root.child("model")) {
    s->get("sigma_e", c.model.sigma_e);
    s->get("f_a", c.model.f_a);
    s->get("lambda_na", c.model.lambda_na);
    s->get("d_th", c.model.d_th);
    s->finish();
  }
  if (auto s = root.child("prior")) {
    s->get_range("x", c.prior.x_min, c.prior.x_max);
    s->get_range("y", c.prior.y_min, c.prior.y_max);
    s->get_range("theta_deg", c.prior.theta_min_deg, c.prior.theta_max_deg);
    s->finish();
  }
  if (auto s = root.child("inference")) {
    auto& in = c.inference;
    s->get("n_p", in.n_p);
    s->get("n_da", in.n_da);
    s->get("bp_tol", in.bp_tol);
    s->get("bp_damping", in.bp_damping);
    s->get("n_it", in.n_it);
    s->get("refine_method", in.refine_method);
    s->get("pruning", in.pruning);
    s->get("pruning_sigmas", in.pruning_sigmas);
    s->get("global_candidates", in.global_candidates);
    s->get("anneal_sigmas", in.anneal_sigmas);
    s->finish();
  }
  if (auto b = root.child("baselines")) {
    if (auto n = b->child("ndt")) {
      n->get("enabled", c.baselines.ndt);
      n->get("cell_size", c.baselines.ndt_cell_size);
      n->finish();
    }
    if (auto n = b->child("imls")) {
      n->get("enabled", c.baselines.imls);
      n->get("h", c.baselines.imls_h);
      n->finish();
    }
    b->finish();
  }
  root.get("n_mc", c.n_mc);
  root.get("seed", c.seed);
  root.finish();
  if (c.map.empty()) throw ConfigError("config needs 'map'");
  if (c.trajectory.waypoints.empty()) throw ConfigError("config needs 'trajectory.waypoints'");
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text_io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  try {
    return parse_config(j, std::filesystem::absolute(path).parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// The config as a loadable document, with absolute paths.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& in = c.inference;
  return json{
      {"schema", kConfigSchema},
      {"map", c.map.string()},
      {"trajectory",
       {{"waypoints", c.trajectory.waypoints.string()},
        {"speed", c.trajectory.speed},
        {"scan_period", c.trajectory.scan_period}}},
      {"sensor",
       {{"angular_resolution_deg", c.sensor.angular_resolution_deg},
        {"max_range", c.sensor.max_range},
        {"sigma_range", c.sensor.sigma_range},
        {"sigma_bearing_deg", c.sensor.sigma_bearing_deg}}},
      {"clutter",
       {{"lambda_na", c.clutter.lambda_na},
        {"range_min", c.clutter.range_min},
        {"range_max", c.clutter.range_max},
        {"bearing_min_deg", c.clutter.bearing_min_deg},
        {"bearing_max_deg", c.clutter.bearing_max_deg}}},
      {"model",
       {{"sigma_e", c.model.sigma_e}, {"f_a", c.model.f_a}, {"lambda_na", c.model.lambda_na}, {"d_th", c.model.d_th}}},
      {"prior",
       {{"x", {c.prior.x_min, c.prior.x_max}},
        {"y", {c.prior.y_min, c.prior.y_max}},
        {"theta_deg", {c.prior.theta_min_deg, c.prior.theta_max_deg}}}},
      {"inference",
       {{"n_p", in.n_p},
        {"n_da", in.n_da},
        {"bp_tol", in.bp_tol},
        {"bp_damping", in.bp_damping},
        {"n_it", in.n_it},
        {"refine_method", in.refine_method},
        {"pruning", in.pruning},
        {"pruning_sigmas", in.pruning_sigmas},
        {"global_candidates", in.global_candidates},
        {"anneal_sigmas", in.anneal_sigmas}}},
      {"baselines",
       {{"ndt", {{"enabled", c.baselines.ndt}, {"cell_size", c.baselines.ndt_cell_size}}},
        {"imls", {{"enabled", c.baselines.imls}, {"h", c.baselines.imls_h}}}}},
      {"n_mc", c.n_mc},
      {"seed", c.seed},
  };
}

/// Splits "proposed,ndt" and checks every name.
inline std::vector<std::string> parse_methods(std::string_view list) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto end = std::min(list.find(',', start), list.size());
    const std::string name(text_io::trim(list.substr(start, end - start)));
    if (name != "proposed" && name != "ndt" && name != "imls") {
      throw ConfigError("unknown method '" + name + "' (expected proposed, ndt or imls)");
    }
    if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
    start = end + 1;
  }
  return out;
}

inline std::string method_label(const std::string& method) {
  if (method == "ndt") return "NDT";
  if (method == "imls") return "IMLS-style";
  return "proposed";
}

// --------------------------------------------------------------- scenario

/// The simulated world of a config: map and ground-truth scan poses.
struct Scenario {
  SegmentMap map;
  std::vector<Pose> poses;

  explicit Scenario(const ExperimentConfig& c) : map(load_map(c.map)) {
    TrajectorySpec spec;
    spec.waypoints = load_waypoints(c.trajectory.waypoints);
    spec.speed = c.trajectory.speed;
    spec.scan_period = c.trajectory.scan_period;
    poses = generate_trajectory(spec);
  }
};

/// Random stream of Monte Carlo trial t.
inline CounterRng trial_rng(std::uint64_t seed, std::size_t trial) {
  return CounterRng(seed).split("trial").split(static_cast<std::uint64_t>(trial));
}

/// All scans of one trial, in the sensor frame of each pose.
inline std::vector<SourceCloud> simulate_scans(const Scenario& scenario, const ExperimentConfig& c,
                                               std::size_t trial) {
  const auto rng = trial_rng(c.seed, trial).split("scan");
  const auto sensor = c.sensor.spec();
  const auto clutter = c.clutter.spec();
  std::vector<SourceCloud> scans;
  scans.reserve(scenario.poses.size());
  for (std::size_t k = 0; k < scenario.poses.size(); ++k) {
    scans.push_back(scan(scenario.map, scenario.poses[k], sensor, clutter, rng.split(static_cast<std::uint64_t>(k))));
  }
  return scans;
}

// -------------------------------------------------------------- benchmark

struct FrameRecord {
  std::size_t trial = 0;
  std::size_t frame = 0;  // k >= 1: source scan k against destination scan k - 1
  std::string method;
  Pose truth;
  Pose estimate;
  double e_trans = std::numeric_limits<double>::quiet_NaN();
  double e_rot = std::numeric_limits<double>::quiet_NaN();
  /// "ok", "stationary" (metrics undefined) or "failed: <reason>".
  std::string status = "ok";
  double seconds = 0.0;

  bool failed() const { return status.rfind("failed", 0) == 0; }
};

struct MethodSummary {
  std::string method;
  std::size_t evaluated = 0;   // frames with defined metrics
  std::size_t failures = 0;    // among evaluated
  std::size_t nan_count = 0;   // NaN errors excluded from quantiles
  std::map<std::string, std::map<int, double>> quantiles;  // metric -> q -> value (NaN if none)
  double seconds = 0.0;
  bool degraded = false;
};

struct BenchmarkReport {
  ExperimentConfig config;
  std::vector<std::string> methods;
  std::size_t trials = 0;
  std::size_t frames_per_trial = 0;
  std::size_t stationary_frames = 0;
  std::vector<FrameRecord> records;  // ordered by (trial, frame, method)
  std::vector<MethodSummary> summaries;
  /// Accumulated trajectories of trial 0, per method plus "truth".
  std::map<std::string, std::vector<Pose>> trajectories;
  bool degraded = false;
  double wall_seconds = 0.0;
  unsigned jobs = 1;

  const MethodSummary& summary(const std::string& method) const {
    for (const auto& s : summaries) {
      if (s.method == method) return s;
    }
    throw ContractViolation("method '" + method + "' not in report");
  }
};

inline constexpr int kQuantileLevels[] = {50, 95};
inline constexpr double kDegradedFailureRate = 0.10;

struct BenchmarkOptions {
  std::vector<std::string> methods;  // empty: config defaults
  unsigned jobs = 1;                 // 0: hardware concurrency
  std::function<void(std::size_t done, std::size_t total)> progress;
};

/// One scan pair with one method. Component errors become a failed record.
inline FrameRecord match_frame(const std::string& method, const SourceCloud& source, const SourceCloud& destination,
                               const SurfaceCloud& surface, const Pose& truth, const ExperimentConfig& c,
                               const InferenceConfig& inference, CounterRng rng) {
  FrameRecord r;
  r.method = method;
  r.truth = truth;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (method == "proposed") {
      r.estimate = match_scans(source, surface, inference, rng).map_pose;
    } else if (method == "ndt") {
      r.estimate = ndt_match(source, destination.points, Pose::identity(), c.ndt_options());
    } else {
      r.estimate = imls_match(source, surface, c.imls_config(), Pose::identity());
    }
    if (truth.translation().norm() > 0.0) {
      r.e_trans = translation_error(r.estimate, truth);
      r.e_rot = rotation_error(r.estimate, truth);
    } else {
      r.status = "stationary";
    }
  } catch (const Error& e) {
    r.estimate = Pose::identity();
    r.status = std::string("failed: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::vector<FrameRecord> run_trial(const Scenario& scenario, const ExperimentConfig& c,
                                          const std::vector<std::string>& methods, std::size_t trial) {
  const auto scans = simulate_scans(scenario, c, trial);
  const auto match_rng = trial_rng(c.seed, trial).split("match");
  const auto inference = c.inference_config();
  std::vector<FrameRecord> out;
  for (std::size_t k = 1; k < scans.size(); ++k) {
    const Pose truth = motion_between(scenario.poses[k - 1], scenario.poses[k]);
    const auto surface = estimate_normals(scans[k - 1].points, c.normal_options());
    for (const auto& m : methods) {
      auto r = match_frame(m, scans[k], scans[k - 1], surface, truth, c, inference,
                           match_rng.split(static_cast<std::uint64_t>(k)));
      r.trial = trial;
      r.frame = k;
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline void summarize(BenchmarkReport& report) {
  report.summaries.clear();
  report.stationary_frames = 0;
  report.degraded = false;
  for (const auto& m : report.methods) {
    MethodSummary s;
    s.method = m;
    std::vector<double> et, er;
    for (const auto& r : report.records) {
      if (r.method != m) continue;
      s.seconds += r.seconds;
      if (r.status == "stationary") {
        if (m == report.methods.front()) ++report.stationary_frames;
        continue;
      }
      ++s.evaluated;
      if (r.failed()) ++s.failures;
      et.push_back(r.e_trans);
      er.push_back(r.e_rot);
    }
    s.nan_count = count_nan(et);
    for (const auto& [metric, values] : {std::pair{"e_trans", &et}, std::pair{"e_rot", &er}}) {
      for (const int q : kQuantileLevels) {
        s.quantiles[metric][q] = values->size() > count_nan(*values) ? compute_quantile(*values, q)
                                                                     : std::numeric_limits<double>::quiet_NaN();
      }
    }
    s.degraded = s.evaluated == 0 ||
                 static_cast<double>(s.failures) > kDegradedFailureRate * static_cast<double>(s.evaluated);
    report.degraded = report.degraded || s.degraded;
    report.summaries.push_back(std::move(s));
  }
  // Trial-0 trajectories.
  report.trajectories.clear();
  std::vector<Pose> truth;
  for (const auto& r : report.records) {
    if (r.trial == 0 && r.method == report.methods.front()) truth.push_back(r.truth);
  }
  report.trajectories["truth"] = accumulate_trajectory(truth);
  for (const auto& m : report.methods) {
    std::vector<Pose> rel;
    for (const auto& r : report.records) {
      if (r.trial == 0 && r.method == m) rel.push_back(r.estimate);
    }
    report.trajectories[m] = accumulate_trajectory(rel);
  }
}

/// Monte Carlo benchmark. Trials run on `jobs` threads, each with its own
/// random stream, and are merged in trial order, so the report does not
/// depend on the job count.
inline BenchmarkReport run_benchmark(const ExperimentConfig& config, const BenchmarkOptions& options = {}) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  BenchmarkReport report;
  report.config = config;
  report.methods = options.methods.empty() ? config.default_methods() : options.methods;
  if (report.methods.empty()) throw ConfigError("no method selected");
  report.trials = config.n_mc;
  const Scenario scenario(config);
  if (scenario.poses.size() < 2) throw ConfigError("trajectory yields fewer than two scans");
  report.frames_per_trial = scenario.poses.size() - 1;

  unsigned jobs = options.jobs == 0 ? std::max(1u, std::thread::hardware_concurrency()) : options.jobs;
  jobs = static_cast<unsigned>(std::min<std::size_t>(jobs, config.n_mc));
  report.jobs = jobs;

  std::vector<std::vector<FrameRecord>> per_trial(config.n_mc);
  std::atomic<std::size_t> next{0};
  std::size_t done = 0;
  std::mutex mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (;;) {
      const std::size_t t = next.fetch_add(1);
      if (t >= config.n_mc) return;
      try {
        per_trial[t] = run_trial(scenario, config, report.methods, t);
      } catch (...) {
        const std::lock_guard lock(mutex);
        if (!error) error = std::current_exception();
        next = config.n_mc;
        return;
      }
      const std::lock_guard lock(mutex);
      ++done;
      if (options.progress) options.progress(done, config.n_mc);
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < jobs; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);

  for (auto& trial : per_trial) {
    for (auto& r : trial) report.records.push_back(std::move(r));
  }
  summarize(report);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ----------------------------------------------------------------- output

namespace detail {

inline nlohmann::json pose_json(const Pose& p) {
  const auto c = to_chart(p);
  return {c.x, c.y, c.theta};
}

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline std::string csv_number(double v) { return std::isnan(v) ? "nan" : text_io::format_double(v); }

}  // namespace detail

/// Deterministic part of the report (no timings).
inline nlohmann::json report_to_json(const BenchmarkReport& report) {
  using nlohmann::json;
  json methods = json::object();
  for (const auto& s : report.summaries) {
    json q = json::object();
    for (const auto& [metric, levels] : s.quantiles) {
      for (const auto& [level, value] : levels) q[metric][std::to_string(level)] = detail::number_or_null(value);
    }
    methods[s.method] = {{"label", method_label(s.method)},
                         {"evaluated_frames", s.evaluated},
                         {"failed_frames", s.failures},
                         {"nan_errors", s.nan_count},
                         {"degraded", s.degraded},
                         {"quantiles", q}};
  }
  json frames = json::array();
  for (const auto& r : report.records) {
    frames.push_back({{"trial", r.trial},
                      {"frame", r.frame},
                      {"method", r.method},
                      {"truth", detail::pose_json(r.truth)},
                      {"estimate", detail::pose_json(r.estimate)},
                      {"e_trans", detail::number_or_null(r.e_trans)},
                      {"e_rot", detail::number_or_null(r.e_rot)},
                      {"status", r.status}});
  }
  json trajectories = json::object();
  for (const auto& [name, poses] : report.trajectories) {
    json list = json::array();
    for (const auto& p : poses) list.push_back(detail::pose_json(p));
    trajectories[name] = list;
  }
  return {{"schema", kReportSchema},
          {"seed", report.config.seed},
          {"config", config_to_json(report.config)},
          {"methods_run", report.methods},
          {"trials", report.trials},
          {"frames_per_trial", report.frames_per_trial},
          {"stationary_frames", report.stationary_frames},
          {"degraded", report.degraded},
          {"quantile_convention", "lower empirical: smallest v with at least q% of errors <= v"},
          {"e_trans_unit", "ratio"},
          {"e_rot_unit", "rad/m"},
          {"methods", methods},
          {"trajectories", trajectories},
          {"frames", frames}};
}

inline nlohmann::json timing_to_json(const BenchmarkReport& report) {
  nlohmann::json per_method = nlohmann::json::object();
  for (const auto& s : report.summaries) {
    const double frames = static_cast<double>(report.trials * report.frames_per_trial);
    per_method[s.method] = {{"total_seconds", s.seconds}, {"seconds_per_frame", s.seconds / frames}};
  }
  return {{"wall_seconds", report.wall_seconds},
          {"jobs", report.jobs},
          {"hardware_threads", std::thread::hardware_concurrency()},
          {"methods", per_method}};
}

/// Writes report.json, errors.csv, quantiles.csv, trajectory_<name>.csv and
/// timing.json into out_dir (created if needed). Everything except
/// timing.json is a pure function of config and seed.
inline void emit_report(const BenchmarkReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create output directory '" + out_dir.string() + "': " + ec.message());

  text_io::write_file(out_dir / "report.json", report_to_json(report).dump(2) + "\n");

  std::ostringstream errors;
  errors << "trial,frame,method,e_trans,e_rot,status\n";
  for (const auto& r : report.records) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    errors << r.trial << ',' << r.frame << ',' << r.method << ',' << detail::csv_number(r.e_trans) << ','
           << detail::csv_number(r.e_rot) << ',' << status << '\n';
  }
  text_io::write_file(out_dir / "errors.csv", errors.str());

  std::ostringstream quantiles;
  quantiles << "method,metric,q,value\n";
  for (const auto& s : report.summaries) {
    for (const auto& [metric, levels] : s.quantiles) {
      for (const auto& [level, value] : levels) {
        quantiles << s.method << ',' << metric << ',' << level << ',' << detail::csv_number(value) << '\n';
      }
    }
  }
  text_io::write_file(out_dir / "quantiles.csv", quantiles.str());

  for (const auto& [name, poses] : report.trajectories) {
    std::ostringstream t;
    t << "k,x,y,theta\n";
    for (std::size_t k = 0; k < poses.size(); ++k) {
      const auto c = to_chart(poses[k]);
      t << k << ',' << text_io::format_double(c.x) << ',' << text_io::format_double(c.y) << ','
        << text_io::format_double(c.theta) << '\n';
    }
    text_io::write_file(out_dir / ("trajectory_" + name + ".csv"), t.str());
  }

  text_io::write_file(out_dir / "timing.json", timing_to_json(report).dump(2) + "\n");
}

}  // namespace bpsm
