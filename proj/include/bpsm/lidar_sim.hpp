#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bpsm/errors.hpp"
#include "bpsm/pointcloud.hpp"
#include "bpsm/pose.hpp"
#include "bpsm/rng.hpp"
#include "bpsm/text_io.hpp"

namespace bpsm {

inline double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

struct Segment {
  Vec2 a;
  Vec2 b;
};

/// Environment as a set of line segments.
class SegmentMap {
 public:
  SegmentMap() = default;

  explicit SegmentMap(std::vector<Segment> segments) : segments_(std::move(segments)) {
    for (const auto& s : segments_) {
      if (!((s.b - s.a).norm() > 0.0)) throw ContractViolation("map contains a zero-length segment");
    }
  }

  const std::vector<Segment>& segments() const { return segments_; }
  bool empty() const { return segments_.empty(); }

  /// Axis-aligned rectangle as four segments.
  static std::vector<Segment> rectangle(double x0, double y0, double x1, double y1) {
    return {{Vec2(x0, y0), Vec2(x1, y0)},
            {Vec2(x1, y0), Vec2(x1, y1)},
            {Vec2(x1, y1), Vec2(x0, y1)},
            {Vec2(x0, y1), Vec2(x0, y0)}};
  }

 private:
  std::vector<Segment> segments_;
};

struct SensorSpec {
  double angular_resolution = deg2rad(1.0);
  double max_range = 100.0;
  double sigma_range = 0.05;
  double sigma_bearing = deg2rad(0.5);

  std::size_t beam_count() const {
    return static_cast<std::size_t>(std::llround(2.0 * std::numbers::pi / angular_resolution));
  }

  void validate() const {
    if (!(angular_resolution > 0.0) || !(max_range > 0.0)) {
      throw ContractViolation("sensor resolution and range must be positive");
    }
    if (!(sigma_range >= 0.0) || !(sigma_bearing >= 0.0)) {
      throw ContractViolation("sensor noise must be non-negative");
    }
    const double beams = 2.0 * std::numbers::pi / angular_resolution;
    if (std::abs(beams - std::round(beams)) * angular_resolution > 1e-9) {
      throw ContractViolation("angular resolution must divide 2*pi");
    }
  }
};

/// Spurious returns: Poisson count, uniform in range x bearing.
struct ClutterSpec {
  double lambda_na = 1.0;
  double range_min = 0.0;
  double range_max = 100.0;
  double bearing_min = 0.0;
  double bearing_max = 2.0 * std::numbers::pi;

  void validate() const {
    if (!(lambda_na >= 0.0)) throw ContractViolation("clutter rate must be non-negative");
    if (!(range_max > range_min) || range_min < 0.0 || !(bearing_max > bearing_min)) {
      throw ContractViolation("clutter intervals must be non-empty");
    }
  }
};

struct TrajectorySpec {
  std::vector<Vec2> waypoints;
  double speed = 10.0;
  double scan_period = 0.08;
};

/// Distance along the ray to the nearest segment, if within max_range.
inline std::optional<double> raycast(const SegmentMap& map, const Vec2& origin, double bearing,
                                     double max_range) {
  const Vec2 dir(std::cos(bearing), std::sin(bearing));
  std::optional<double> best;
  for (const auto& seg : map.segments()) {
    const Vec2 e = seg.b - seg.a;
    const double denom = dir.x() * e.y() - dir.y() * e.x();
    if (denom == 0.0) continue;  // parallel
    const Vec2 w = seg.a - origin;
    const double t = (w.x() * e.y() - w.y() * e.x()) / denom;
    const double u = (w.x() * dir.y() - w.y() * dir.x()) / denom;
    if (t <= 0.0 || u < 0.0 || u > 1.0 || t > max_range) continue;
    if (!best || t < *best) best = t;
  }
  return best;
}

/// Simulated scan in the sensor frame of `sensor_pose`. One return per
/// beam that hits within max_range (beams reaching exactly max_range are
/// dropped), perturbed in range and bearing, followed by Poisson clutter.
inline SourceCloud scan(const SegmentMap& map, const Pose& sensor_pose, const SensorSpec& spec,
                        const ClutterSpec& clutter, CounterRng rng) {
  spec.validate();
  clutter.validate();
  SourceCloud cloud;
  std::normal_distribution<double> unit_normal(0.0, 1.0);
  const std::size_t beams = spec.beam_count();
  const double heading = sensor_pose.angle();
  for (std::size_t k = 0; k < beams; ++k) {
    const double bearing = static_cast<double>(k) * spec.angular_resolution;
    const auto hit = raycast(map, sensor_pose.translation(), heading + bearing, spec.max_range);
    if (!hit || *hit >= spec.max_range) continue;
    double range = *hit;
    double beam = bearing;
    if (spec.sigma_range > 0.0) range += spec.sigma_range * unit_normal(rng);
    if (spec.sigma_bearing > 0.0) beam += spec.sigma_bearing * unit_normal(rng);
    if (!(range > 0.0) || range >= spec.max_range) continue;
    cloud.points.emplace_back(range * std::cos(beam), range * std::sin(beam));
  }
  if (clutter.lambda_na > 0.0) {
    std::poisson_distribution<int> count_dist(clutter.lambda_na);
    const int count = count_dist(rng);
    for (int c = 0; c < count; ++c) {
      const double r = rng.uniform(clutter.range_min, clutter.range_max);
      const double b = rng.uniform(clutter.bearing_min, clutter.bearing_max);
      cloud.points.emplace_back(r * std::cos(b), r * std::sin(b));
    }
  }
  return cloud;
}

/// Sensor-to-world poses every speed * scan_period meters of arc length
/// along the waypoint polyline, heading tangent to the current segment.
/// A pose falling exactly on a vertex takes the outgoing heading.
inline std::vector<Pose> generate_trajectory(const TrajectorySpec& spec) {
  if (spec.waypoints.size() < 2) throw ContractViolation("trajectory needs at least two waypoints");
  if (!(spec.speed > 0.0) || !(spec.scan_period > 0.0)) {
    throw ContractViolation("speed and scan period must be positive");
  }
  struct Leg {
    Vec2 start;
    Vec2 dir;
    double begin;
    double length;
  };
  std::vector<Leg> legs;
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < spec.waypoints.size(); ++k) {
    const Vec2 d = spec.waypoints[k + 1] - spec.waypoints[k];
    const double len = d.norm();
    if (!(len > 0.0)) continue;
    legs.push_back({spec.waypoints[k], d / len, total, len});
    total += len;
  }
  if (legs.empty()) throw ContractViolation("degenerate trajectory polyline (zero length)");

  const double spacing = spec.speed * spec.scan_period;
  const auto count = static_cast<std::size_t>(std::floor(total / spacing + 1e-9)) + 1;
  std::vector<Pose> poses;
  poses.reserve(count);
  std::size_t leg = 0;
  for (std::size_t k = 0; k < count; ++k) {
    const double s = std::min(static_cast<double>(k) * spacing, total);
    while (leg + 1 < legs.size() && s >= legs[leg + 1].begin - 1e-9) ++leg;
    const auto& l = legs[leg];
    const Vec2 p = l.start + l.dir * std::min(s - l.begin, l.length);
    poses.push_back(Pose::from_xy_theta(p.x(), p.y(), std::atan2(l.dir.y(), l.dir.x())));
  }
  return poses;
}

// Map file: "# bp-scanmatch map v1", rows ax,ay,bx,by.
// Trajectory file: "# bp-scanmatch trajectory v1", rows x,y.

inline constexpr std::string_view kMapHeader = "# bp-scanmatch map v1";
inline constexpr std::string_view kTrajectoryHeader = "# bp-scanmatch trajectory v1";

inline SegmentMap parse_map(const std::string& text, const std::string& source = "<memory>") {
  const auto table = text_io::parse_table(text, kMapHeader, 4, source);
  std::vector<Segment> segs;
  for (const auto& r : table.rows) segs.push_back({Vec2(r[0], r[1]), Vec2(r[2], r[3])});
  return SegmentMap(std::move(segs));
}

inline SegmentMap load_map(const std::filesystem::path& path) {
  return parse_map(text_io::read_file(path), path.string());
}

inline void save_map(const SegmentMap& map, const std::filesystem::path& path) {
  std::string out = std::string(kMapHeader) + "\n";
  for (const auto& s : map.segments()) {
    out += text_io::format_double(s.a.x()) + "," + text_io::format_double(s.a.y()) + "," +
           text_io::format_double(s.b.x()) + "," + text_io::format_double(s.b.y()) + "\n";
  }
  text_io::write_file(path, out);
}

inline std::vector<Vec2> load_waypoints(const std::filesystem::path& path) {
  const auto table = text_io::read_table(path, kTrajectoryHeader, 2);
  std::vector<Vec2> pts;
  for (const auto& r : table.rows) pts.emplace_back(r[0], r[1]);
  return pts;
}

inline void save_waypoints(const std::vector<Vec2>& waypoints, const std::filesystem::path& path) {
  std::string out = std::string(kTrajectoryHeader) + "\n";
  for (const auto& p : waypoints) {
    out += text_io::format_double(p.x()) + "," + text_io::format_double(p.y()) + "\n";
  }
  text_io::write_file(path, out);
}

}  // namespace bpsm
