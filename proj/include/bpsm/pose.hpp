#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bpsm/errors.hpp"

namespace bpsm {

/// Spatial dimension of every pose, point and normal in the library.
/// An SE(3) port changes this constant and the rotation storage below.
inline constexpr int kDim = 2;

using Vec2 = Eigen::Matrix<double, kDim, 1>;
using Mat2 = Eigen::Matrix<double, kDim, kDim>;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double angle) {
  double wrapped = std::remainder(angle, 2.0 * std::numbers::pi);
  if (wrapped <= -std::numbers::pi) wrapped += 2.0 * std::numbers::pi;
  return wrapped;
}

inline Mat2 rotation_matrix(double theta) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  Mat2 r;
  r << c, -s, s, c;
  return r;
}

/// Rigid transform in SE(2): x -> R x + t.
///
/// Rotation is kept as a matrix. Every composition increments a chain
/// counter; once a chain exceeds kReorthonormalizeAfter products the
/// rotation is projected back onto SO(2) (polar decomposition, which in
/// 2D reduces to re-extracting the angle).
class Pose {
 public:
  static constexpr int kReorthonormalizeAfter = 64;

  Pose() : rotation_(Mat2::Identity()), translation_(Vec2::Zero()) {}

  Pose(const Mat2& rotation, const Vec2& translation)
      : rotation_(rotation), translation_(translation) {}

  static Pose identity() { return {}; }

  static Pose from_xy_theta(double x, double y, double theta) {
    return {rotation_matrix(theta), Vec2(x, y)};
  }

  static Pose pure_translation(double x, double y) { return {Mat2::Identity(), Vec2(x, y)}; }

  static Pose pure_rotation(double theta) { return {rotation_matrix(theta), Vec2::Zero()}; }

  const Mat2& rotation() const { return rotation_; }
  const Vec2& translation() const { return translation_; }

  /// Heading in (-pi, pi], from the first rotation column.
  double angle() const { return wrap_angle(std::atan2(rotation_(1, 0), rotation_(0, 0))); }

  /// 3x3 homogeneous matrix [R t; 0 1].
  Mat3 matrix() const {
    Mat3 m = Mat3::Identity();
    m.topLeftCorner<2, 2>() = rotation_;
    m.topRightCorner<2, 1>() = translation_;
    return m;
  }

  Pose inverse() const {
    Pose out(rotation_.transpose(), -(rotation_.transpose() * translation_));
    out.chain_ = chain_;
    return out;
  }

  Vec2 operator*(const Vec2& point) const { return rotation_ * point + translation_; }

  friend Pose compose(const Pose& a, const Pose& b) {
    Pose out(a.rotation_ * b.rotation_, a.rotation_ * b.translation_ + a.translation_);
    out.chain_ = a.chain_ + b.chain_ + 1;
    if (out.chain_ > kReorthonormalizeAfter) {
      out.rotation_ = rotation_matrix(std::atan2(out.rotation_(1, 0) - out.rotation_(0, 1),
                                                 out.rotation_(0, 0) + out.rotation_(1, 1)));
      out.chain_ = 0;
    }
    return out;
  }

  Pose operator*(const Pose& other) const { return compose(*this, other); }

  int chain_length() const { return chain_; }

 private:
  Mat2 rotation_;
  Vec2 translation_;
  int chain_ = 0;
};

inline Pose inverse(const Pose& p) { return p.inverse(); }

/// Transform taking the source frame onto the destination frame:
/// dest * inverse(source), so compose(result, source) == dest.
inline Pose relative_pose(const Pose& source, const Pose& dest) {
  return compose(dest, source.inverse());
}

/// Relative motion between two sensor-to-world poses, expressed as the
/// transform mapping points of the later frame into the earlier frame.
/// Equivalent to relative_pose(inverse(later), inverse(earlier)).
inline Pose motion_between(const Pose& earlier, const Pose& later) {
  return compose(earlier.inverse(), later);
}

/// Point (w = 1) or direction (w = 0) in homogeneous coordinates.
class HomogeneousPoint {
 public:
  explicit HomogeneousPoint(const Vec3& coords) : coords_(coords) {
    if (coords_.z() != 0.0 && coords_.z() != 1.0) {
      throw ContractViolation("homogeneous coordinate must be 0 or 1");
    }
  }

  static HomogeneousPoint point(const Vec2& p) { return HomogeneousPoint(Vec3(p.x(), p.y(), 1.0)); }
  static HomogeneousPoint direction(const Vec2& v) {
    return HomogeneousPoint(Vec3(v.x(), v.y(), 0.0));
  }

  const Vec3& coords() const { return coords_; }
  Vec2 xy() const { return coords_.head<2>(); }
  bool is_point() const { return coords_.z() == 1.0; }

 private:
  Vec3 coords_;
};

inline HomogeneousPoint transform_point(const Pose& p, const HomogeneousPoint& pt) {
  Vec3 out;
  out.head<2>() = p.rotation() * pt.xy() + pt.coords().z() * p.translation();
  out.z() = pt.coords().z();
  return HomogeneousPoint(out);
}

/// (x, y, theta) parametrization used by the optimizers.
struct PoseChart {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;

  Eigen::Vector3d vector() const { return {x, y, theta}; }
  static PoseChart from_vector(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }
};

inline PoseChart to_chart(const Pose& p) {
  return {p.translation().x(), p.translation().y(), p.angle()};
}

inline Pose from_chart(const PoseChart& c) { return Pose::from_xy_theta(c.x, c.y, c.theta); }

/// ||t_est - t_true|| / ||t_true||. Throws UndefinedMetric when the true
/// translation is zero.
inline double translation_error(const Pose& est, const Pose& truth) {
  const double norm = truth.translation().norm();
  if (!(norm > 0.0)) throw UndefinedMetric("translation_error: zero ground-truth translation");
  return (est.translation() - truth.translation()).norm() / norm;
}

/// Geodesic angle between the rotations (radians) per meter of true travel.
/// Uses arccos((Tr(R_est^-1 R_true) - 1) / 2) on the 3x3 embedding
/// diag(R, 1), whose trace is 2 cos(theta) + 1.
inline double rotation_error(const Pose& est, const Pose& truth) {
  const double norm = truth.translation().norm();
  if (!(norm > 0.0)) throw UndefinedMetric("rotation_error: zero ground-truth translation");
  Mat3 delta = Mat3::Identity();
  delta.topLeftCorner<2, 2>() = est.rotation().transpose() * truth.rotation();
  const double c = std::clamp((delta.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) / norm;
}

}  // namespace bpsm
