#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include <Eigen/LU>

#include "bpsm/pose.hpp"
#include "bpsm/rng.hpp"

namespace bpsm {
namespace {

constexpr double kPi = std::numbers::pi;

Pose random_pose(CounterRng& rng) {
  return Pose::from_xy_theta(rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0), rng.uniform(-kPi, kPi));
}

void expect_pose_near(const Pose& a, const Pose& b, double tol) {
  EXPECT_LE((a.matrix() - b.matrix()).cwiseAbs().maxCoeff(), tol);
}

TEST(Compose, IdentityIsNeutral) {
  const Pose p = Pose::from_xy_theta(1.5, -2.0, 0.7);
  expect_pose_near(compose(Pose::identity(), p), p, 0.0);
  expect_pose_near(compose(p, Pose::identity()), p, 0.0);
}

TEST(Compose, InverseGivesIdentity) {
  const Pose p = Pose::from_xy_theta(3.0, 4.0, -1.2);
  expect_pose_near(compose(p, inverse(p)), Pose::identity(), 1e-12);
  expect_pose_near(compose(inverse(p), p), Pose::identity(), 1e-12);
}

TEST(Compose, RotationAfterTranslationMovesOrigin) {
  const Pose p = compose(Pose::pure_rotation(kPi / 2.0), Pose::pure_translation(1.0, 0.0));
  const Vec2 x = p * Vec2::Zero();
  EXPECT_NEAR(x.x(), 0.0, 1e-15);
  EXPECT_NEAR(x.y(), 1.0, 1e-15);
}

TEST(Compose, Associative) {
  CounterRng rng(7);
  for (int k = 0; k < 200; ++k) {
    const Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    expect_pose_near(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-9);
  }
}

TEST(Compose, LongChainStaysOrthogonal) {
  CounterRng rng(11);
  Pose p;
  for (int k = 0; k < 10000; ++k) {
    p = compose(p, Pose::from_xy_theta(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-kPi, kPi)));
    ASSERT_LE(p.chain_length(), Pose::kReorthonormalizeAfter);
  }
  const Mat2 r = p.rotation();
  EXPECT_LE((r.transpose() * r - Mat2::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_NEAR(r.determinant(), 1.0, 1e-9);
}

TEST(RelativePose, SelfIsIdentity) {
  const Pose p = Pose::from_xy_theta(-4.0, 2.5, 2.0);
  expect_pose_near(relative_pose(p, p), Pose::identity(), 1e-12);
}

TEST(RelativePose, FromIdentityIsDestination) {
  const Pose d = Pose::pure_translation(2.0, 0.0);
  expect_pose_near(relative_pose(Pose::identity(), d), d, 0.0);
}

TEST(RelativePose, RoundTrip) {
  CounterRng rng(3);
  for (int k = 0; k < 100; ++k) {
    const Pose s = random_pose(rng), d = random_pose(rng);
    expect_pose_near(compose(relative_pose(s, d), s), d, 1e-9);
  }
}

TEST(RelativePose, MotionBetweenMatchesRelativeOfInverses) {
  CounterRng rng(5);
  for (int k = 0; k < 50; ++k) {
    const Pose a = random_pose(rng), b = random_pose(rng);
    expect_pose_near(motion_between(a, b), relative_pose(inverse(b), inverse(a)), 1e-9);
  }
}

TEST(TransformPoint, IdentityLeavesPointUnchanged) {
  const auto pt = HomogeneousPoint::point(Vec2(3.0, -1.0));
  EXPECT_EQ(transform_point(Pose::identity(), pt).coords(), pt.coords());
}

TEST(TransformPoint, DirectionIgnoresTranslation) {
  const auto n = transform_point(Pose::pure_translation(1.0, 0.0), HomogeneousPoint::direction(Vec2(0.0, 1.0)));
  EXPECT_EQ(n.coords(), Vec3(0.0, 1.0, 0.0));
}

TEST(TransformPoint, QuarterTurn) {
  const auto p = transform_point(Pose::pure_rotation(kPi / 2.0), HomogeneousPoint::point(Vec2(1.0, 0.0)));
  EXPECT_NEAR(p.coords().x(), 0.0, 1e-15);
  EXPECT_NEAR(p.coords().y(), 1.0, 1e-15);
  EXPECT_EQ(p.coords().z(), 1.0);
}

TEST(TransformPoint, PreservesHomogeneousFlag) {
  CounterRng rng(9);
  for (int k = 0; k < 50; ++k) {
    const Pose p = random_pose(rng);
    const Vec2 v(rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0));
    EXPECT_TRUE(transform_point(p, HomogeneousPoint::point(v)).is_point());
    EXPECT_FALSE(transform_point(p, HomogeneousPoint::direction(v)).is_point());
  }
}

TEST(HomogeneousPoint, RejectsOtherLastComponent) {
  EXPECT_THROW(HomogeneousPoint(Vec3(1.0, 2.0, 0.5)), ContractViolation);
}

TEST(Chart, RoundTrip) {
  CounterRng rng(13);
  for (int k = 0; k < 1000; ++k) {
    const PoseChart c{rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0), rng.uniform(-kPi, kPi)};
    const PoseChart r = to_chart(from_chart(c));
    EXPECT_NEAR(r.x, c.x, 1e-12);
    EXPECT_NEAR(r.y, c.y, 1e-12);
    EXPECT_NEAR(r.theta, c.theta, 1e-12);
  }
}

TEST(Chart, WrapsAngle) {
  const PoseChart r = to_chart(from_chart({0.0, 0.0, 3.0 * kPi / 2.0}));
  EXPECT_NEAR(r.theta, -kPi / 2.0, 1e-12);
  EXPECT_NEAR(wrap_angle(-kPi), kPi, 1e-15);
}

TEST(TranslationError, Examples) {
  const Pose truth = Pose::pure_translation(1.0, 0.0);
  EXPECT_EQ(translation_error(truth, truth), 0.0);
  EXPECT_NEAR(translation_error(Pose::pure_translation(1.1, 0.0), truth), 0.1, 1e-12);
  EXPECT_NEAR(translation_error(Pose::identity(), Pose::pure_translation(2.0, 0.0)), 1.0, 1e-15);
}

TEST(TranslationError, ZeroTruthThrows) {
  EXPECT_THROW(translation_error(Pose::pure_translation(1.0, 0.0), Pose::identity()), UndefinedMetric);
  EXPECT_THROW(rotation_error(Pose::identity(), Pose::pure_rotation(0.3)), UndefinedMetric);
}

TEST(RotationError, Examples) {
  const Pose truth = Pose::pure_translation(1.0, 0.0);
  EXPECT_EQ(rotation_error(truth, truth), 0.0);
  EXPECT_NEAR(rotation_error(Pose::from_xy_theta(1.0, 0.0, kPi / 2.0), truth), kPi / 2.0, 1e-12);
  const Pose truth2 = Pose::pure_translation(2.0, 0.0);
  EXPECT_NEAR(rotation_error(Pose::from_xy_theta(2.0, 0.0, -kPi / 6.0), truth2), kPi / 12.0, 1e-12);
}

TEST(RotationError, SymmetricInSign) {
  const Pose truth = Pose::pure_translation(0.0, 3.0);
  for (const double theta : {0.01, 0.4, 1.3, 2.9}) {
    EXPECT_NEAR(rotation_error(Pose::from_xy_theta(0.0, 3.0, theta), truth),
                rotation_error(Pose::from_xy_theta(0.0, 3.0, -theta), truth), 1e-12);
  }
}

}  // namespace
}  // namespace bpsm
