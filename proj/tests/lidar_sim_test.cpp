#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bpsm/lidar_sim.hpp"

namespace bpsm {
namespace {

constexpr double kPi = std::numbers::pi;

SensorSpec noiseless() {
  SensorSpec s;
  s.sigma_range = 0.0;
  s.sigma_bearing = 0.0;
  return s;
}

ClutterSpec no_clutter() {
  ClutterSpec c;
  c.lambda_na = 0.0;
  return c;
}

double distance_to_segment(const Vec2& p, const Segment& s) {
  const Vec2 e = s.b - s.a;
  const double t = std::clamp((p - s.a).dot(e) / e.squaredNorm(), 0.0, 1.0);
  return (p - (s.a + t * e)).norm();
}

double distance_to_map(const Vec2& p, const SegmentMap& map) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : map.segments()) best = std::min(best, distance_to_segment(p, s));
  return best;
}

TEST(Raycast, PerpendicularWall) {
  const SegmentMap map({{Vec2(10.0, -5.0), Vec2(10.0, 5.0)}});
  const auto hit = raycast(map, Vec2::Zero(), 0.0, 100.0);
  ASSERT_TRUE(hit.has_value());
  EXPECT_NEAR(*hit, 10.0, 1e-12);
}

TEST(Raycast, PointingAwayMisses) {
  const SegmentMap map({{Vec2(10.0, -5.0), Vec2(10.0, 5.0)}});
  EXPECT_FALSE(raycast(map, Vec2::Zero(), kPi, 100.0).has_value());
}

TEST(Raycast, NearestWallWins) {
  const SegmentMap map({{Vec2(8.0, -5.0), Vec2(8.0, 5.0)}, {Vec2(5.0, -5.0), Vec2(5.0, 5.0)}});
  const auto hit = raycast(map, Vec2::Zero(), 0.0, 100.0);
  ASSERT_TRUE(hit.has_value());
  EXPECT_NEAR(*hit, 5.0, 1e-12);
}

TEST(Raycast, BeyondMaxRangeMisses) {
  const SegmentMap map({{Vec2(10.0, -5.0), Vec2(10.0, 5.0)}});
  EXPECT_FALSE(raycast(map, Vec2::Zero(), 0.0, 9.0).has_value());
}

TEST(SegmentMap, RejectsZeroLengthSegment) {
  EXPECT_THROW(SegmentMap({{Vec2(1.0, 1.0), Vec2(1.0, 1.0)}}), ContractViolation);
}

TEST(Scan, EmptyMapNoClutterIsEmpty) {
  EXPECT_TRUE(scan(SegmentMap{}, Pose::identity(), SensorSpec{}, no_clutter(), CounterRng(1)).empty());
}

TEST(Scan, SquareRoomHitsEveryBeamOnAWall) {
  const SegmentMap map(SegmentMap::rectangle(-10.0, -10.0, 10.0, 10.0));
  const auto cloud = scan(map, Pose::identity(), noiseless(), no_clutter(), CounterRng(1));
  ASSERT_EQ(cloud.size(), 360u);
  for (std::size_t k = 0; k < cloud.size(); ++k) {
    const Vec2& p = cloud.points[k];
    EXPECT_NEAR(std::max(std::abs(p.x()), std::abs(p.y())), 10.0, 1e-9);
    const double bearing = static_cast<double>(k) * kPi / 180.0;
    EXPECT_NEAR(wrap_angle(std::atan2(p.y(), p.x()) - bearing), 0.0, 1e-12);
  }
}

TEST(Scan, NoiselessPointsLieOnMap) {
  const SegmentMap map({{Vec2(-20.0, -3.0), Vec2(20.0, -3.0)},
                        {Vec2(-20.0, 4.0), Vec2(20.0, 4.0)},
                        {Vec2(15.0, -3.0), Vec2(15.0, 4.0)}});
  const Pose pose = Pose::from_xy_theta(2.0, 0.5, 0.3);
  const auto cloud = scan(map, pose, noiseless(), no_clutter(), CounterRng(2));
  ASSERT_FALSE(cloud.empty());
  for (const auto& p : cloud.points) EXPECT_LE(distance_to_map(pose * p, map), 1e-9);
}

TEST(Scan, MaxRangeReturnsDropped) {
  const SegmentMap map({{Vec2(10.0, -5.0), Vec2(10.0, 5.0)}});
  SensorSpec spec = noiseless();
  spec.max_range = 10.0;
  const auto cloud = scan(map, Pose::identity(), spec, no_clutter(), CounterRng(3));
  for (const auto& p : cloud.points) EXPECT_LT(p.norm(), 10.0);
}

TEST(Scan, WorldFrameInvariance) {
  const SegmentMap map(SegmentMap::rectangle(-12.0, -7.0, 9.0, 11.0));
  auto world_points = [&](const Pose& pose) {
    const auto cloud = scan(map, pose, noiseless(), no_clutter(), CounterRng(4));
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : cloud.points) {
      const Vec2 w = pose * p;
      pts.emplace_back(std::round(w.x() * 1e6), std::round(w.y() * 1e6));
    }
    std::sort(pts.begin(), pts.end());
    return pts;
  };
  // Headings that are whole multiples of the angular resolution cast the same rays.
  const auto a = world_points(Pose::from_xy_theta(1.0, 2.0, 0.0));
  const auto b = world_points(Pose::from_xy_theta(1.0, 2.0, 37.0 * kPi / 180.0));
  const auto c = world_points(Pose::from_xy_theta(1.0, 2.0, -90.0 * kPi / 180.0));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(Scan, Deterministic) {
  const SegmentMap map(SegmentMap::rectangle(-10.0, -10.0, 10.0, 10.0));
  const Pose pose = Pose::from_xy_theta(1.0, -2.0, 0.4);
  const auto a = scan(map, pose, SensorSpec{}, ClutterSpec{}, CounterRng(77));
  const auto b = scan(map, pose, SensorSpec{}, ClutterSpec{}, CounterRng(77));
  EXPECT_EQ(a.points, b.points);
  const auto c = scan(map, pose, SensorSpec{}, ClutterSpec{}, CounterRng(78));
  EXPECT_NE(a.points, c.points);
}

TEST(Scan, ClutterCountIsPoisson) {
  const CounterRng root(5);
  const std::size_t trials = 100000;
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t k = 0; k < trials; ++k) {
    const auto n = static_cast<double>(scan(SegmentMap{}, Pose::identity(), SensorSpec{}, ClutterSpec{}, root.split(k)).size());
    sum += n;
    sum2 += n * n;
  }
  const double t = static_cast<double>(trials);
  const double mean = sum / t;
  const double var = (sum2 - t * mean * mean) / (t - 1.0);
  EXPECT_GE(mean, 0.99);
  EXPECT_LE(mean, 1.01);
  // Standard errors under Poisson(1): mean 1/sqrt(n), sample variance sqrt((mu4 - sigma^4)/n) = sqrt(3/n).
  EXPECT_NEAR(mean, 1.0, 3.0 / std::sqrt(t));
  EXPECT_NEAR(var, 1.0, 3.0 * std::sqrt(3.0 / t));
}

TEST(Scan, ClutterInsideSupport) {
  ClutterSpec c;
  c.lambda_na = 50.0;
  c.range_min = 2.0;
  c.range_max = 30.0;
  const auto cloud = scan(SegmentMap{}, Pose::identity(), SensorSpec{}, c, CounterRng(6));
  ASSERT_GT(cloud.size(), 10u);
  for (const auto& p : cloud.points) {
    EXPECT_GE(p.norm(), 2.0 - 1e-12);
    EXPECT_LT(p.norm(), 30.0);
  }
}

TEST(Trajectory, StraightSegmentSpacing) {
  const auto poses = generate_trajectory({{Vec2(0.0, 0.0), Vec2(8.0, 0.0)}, 10.0, 0.08});
  ASSERT_EQ(poses.size(), 11u);
  for (std::size_t k = 0; k < poses.size(); ++k) {
    EXPECT_NEAR(poses[k].translation().x(), 0.8 * static_cast<double>(k), 1e-12);
    EXPECT_NEAR(poses[k].translation().y(), 0.0, 1e-12);
    EXPECT_NEAR(poses[k].angle(), 0.0, 1e-12);
  }
}

TEST(Trajectory, CornerTurnsHeading) {
  const auto poses = generate_trajectory({{Vec2(0.0, 0.0), Vec2(4.0, 0.0), Vec2(4.0, 4.0)}, 10.0, 0.08});
  ASSERT_EQ(poses.size(), 11u);
  EXPECT_NEAR(poses[4].angle(), 0.0, 1e-12);
  EXPECT_NEAR(poses[5].translation().x(), 4.0, 1e-9);
  EXPECT_NEAR(poses[5].translation().y(), 0.0, 1e-9);
  EXPECT_NEAR(poses[5].angle(), kPi / 2.0, 1e-12);
  EXPECT_NEAR(poses[6].translation().y(), 0.8, 1e-9);
}

TEST(Trajectory, PoseCountFromArcLength) {
  const std::vector<Vec2> w{Vec2(0.0, 0.0), Vec2(13.0, 0.0), Vec2(13.0, 7.3), Vec2(-2.0, 7.3)};
  const double length = 13.0 + 7.3 + 15.0;
  const auto poses = generate_trajectory({w, 10.0, 0.08});
  EXPECT_EQ(poses.size(), static_cast<std::size_t>(std::floor(length / 0.8)) + 1);
  for (std::size_t k = 1; k < poses.size(); ++k) {
    EXPECT_LE((poses[k].translation() - poses[k - 1].translation()).norm(), 0.8 + 1e-9);
  }
}

TEST(Trajectory, DegenerateRejected) {
  EXPECT_THROW(generate_trajectory({{Vec2(1.0, 1.0)}, 10.0, 0.08}), ContractViolation);
  EXPECT_THROW(generate_trajectory({{Vec2(1.0, 1.0), Vec2(1.0, 1.0)}, 10.0, 0.08}), ContractViolation);
  EXPECT_THROW(generate_trajectory({{Vec2(0.0, 0.0), Vec2(1.0, 1.0)}, 0.0, 0.08}), ContractViolation);
}

TEST(MapIo, RoundTrip) {
  const SegmentMap map(SegmentMap::rectangle(-1.25, 0.1, 3.0, 7.77));
  const auto path = std::filesystem::temp_directory_path() / "bpsm_lidar_map.csv";
  save_map(map, path);
  const auto loaded = load_map(path);
  ASSERT_EQ(loaded.segments().size(), map.segments().size());
  for (std::size_t k = 0; k < map.segments().size(); ++k) {
    EXPECT_EQ(loaded.segments()[k].a, map.segments()[k].a);
    EXPECT_EQ(loaded.segments()[k].b, map.segments()[k].b);
  }
}

}  // namespace
}  // namespace bpsm
