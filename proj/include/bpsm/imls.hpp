#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <vector>

#include "bpsm/errors.hpp"
#include "bpsm/pointcloud.hpp"
#include "bpsm/pose.hpp"

namespace bpsm {

struct ImlsConfig {
  double h = 2.0;
  /// Destination points farther than cutoff * h from the query are ignored
  /// (their weight is below exp(-cutoff^2)).
  double cutoff = 3.0;
  int max_iters = 50;
  double step_tol = 1e-6;

  void validate() const {
    if (!(h > 0.0)) throw ContractViolation("IMLS h must be positive");
    if (!(cutoff > 0.0)) throw ContractViolation("IMLS cutoff must be positive");
  }
};

struct ImlsValue {
  double value = 0.0;
  Vec2 gradient = Vec2::Zero();
};

/// Implicit surface I(x) = sum_i w_i n_i.(x - d_i) / sum_i w_i,
/// w_i = exp(-||x - d_i||^2 / h^2), over the valid destination points.
class ImlsSurface {
 public:
  ImlsSurface(const SurfaceCloud& destination, const ImlsConfig& config = {})
      : surface_(destination.valid_subset()), config_(config), grid_(surface_.points, config.h * config.cutoff) {
    config_.validate();
    if (surface_.points.empty()) throw ContractViolation("IMLS needs destination points with valid normals");
  }
  // The neighbor grid refers into surface_.
  ImlsSurface(const ImlsSurface&) = delete;
  ImlsSurface& operator=(const ImlsSurface&) = delete;

  /// I(x) and its gradient, or nothing when no destination point is in reach.
  std::optional<ImlsValue> evaluate(const Vec2& x) const {
    const auto idx = grid_.query(x);
    if (idx.empty()) return std::nullopt;
    const double inv_h2 = 1.0 / (config_.h * config_.h);
    double sw = 0.0, swr = 0.0;
    Vec2 dsw = Vec2::Zero(), dswr = Vec2::Zero();
    for (const auto i : idx) {
      const Vec2 diff = x - surface_.points[i];
      const double w = std::exp(-diff.squaredNorm() * inv_h2);
      const double r = surface_.normals[i].dot(diff);
      const Vec2 dw = -2.0 * inv_h2 * w * diff;
      sw += w;
      swr += w * r;
      dsw += dw;
      dswr += dw * r + w * surface_.normals[i];
    }
    if (!(sw > 0.0)) return std::nullopt;
    return ImlsValue{swr / sw, (dswr * sw - swr * dsw) / (sw * sw)};
  }

 private:
  SurfaceCloud surface_;
  ImlsConfig config_;
  NeighborGrid grid_;
};

struct ImlsResult {
  Pose pose;
  double cost = 0.0;
  double initial_cost = 0.0;
  std::size_t used_points = 0;
  int iterations = 0;
  bool converged = false;
};

/// Gauss-Newton on sum_j I(T(s_j))^2 over the chart, with step halving.
/// The search runs in the principal frame of the valid destination points,
/// so the result moves with any rigid motion applied to both inputs.
inline ImlsResult imls_register(const SourceCloud& source_in, const SurfaceCloud& destination_in,
                                const Pose& initial, const ImlsConfig& config = {}) {
  config.validate();
  SurfaceCloud destination = destination_in.valid_subset();
  if (destination.points.empty()) throw ContractViolation("IMLS needs destination points with valid normals");
  const Pose frame = principal_frame(destination.points);
  const Pose to_local = frame.inverse();
  for (std::size_t i = 0; i < destination.points.size(); ++i) {
    destination.points[i] = to_local * destination.points[i];
    destination.normals[i] = to_local.rotation() * destination.normals[i];
  }
  SourceCloud source;
  source.points.reserve(source_in.size());
  for (const auto& s : source_in.points) source.points.push_back(to_local * s);
  const ImlsSurface surface(destination, config);

  struct Linearization {
    double cost = 0.0;
    std::size_t used = 0;
    Mat3 jtj = Mat3::Zero();
    Vec3 jtr = Vec3::Zero();
  };
  auto linearize = [&](const PoseChart& c) {
    Linearization lin;
    const double cs = std::cos(c.theta), sn = std::sin(c.theta);
    for (const auto& s : source.points) {
      const Vec2 x(cs * s.x() - sn * s.y() + c.x, sn * s.x() + cs * s.y() + c.y);
      const auto v = surface.evaluate(x);
      if (!v) continue;
      ++lin.used;
      const Vec2 dth(-sn * s.x() - cs * s.y(), cs * s.x() - sn * s.y());
      const Vec3 j(v->gradient.x(), v->gradient.y(), v->gradient.dot(dth));
      lin.cost += v->value * v->value;
      lin.jtj += j * j.transpose();
      lin.jtr += j * v->value;
    }
    return lin;
  };

  PoseChart x = to_chart(compose(compose(to_local, initial), frame));
  Linearization lin = linearize(x);
  if (lin.used == 0) throw NoOverlap("no source point within reach of the IMLS surface");
  ImlsResult result;
  result.initial_cost = lin.cost;
  for (int iter = 0; iter < config.max_iters; ++iter) {
    result.iterations = iter + 1;
    const Mat3 a = lin.jtj + 1e-12 * std::max(1.0, lin.jtj.trace()) * Mat3::Identity();
    Vec3 step = -a.ldlt().solve(lin.jtr);
    if (!step.allFinite()) break;
    bool accepted = false;
    for (int halvings = 0; halvings < 30; ++halvings) {
      const PoseChart trial{x.x + step(0), x.y + step(1), wrap_angle(x.theta + step(2))};
      Linearization tl = linearize(trial);
      if (tl.used > 0 && tl.cost < lin.cost) {
        x = trial;
        lin = std::move(tl);
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted || step.norm() < config.step_tol) {
      result.converged = true;
      break;
    }
  }
  result.pose = compose(compose(frame, from_chart(x)), to_local);
  result.cost = lin.cost;
  result.used_points = lin.used;
  return result;
}

inline Pose imls_match(const SourceCloud& source, const SurfaceCloud& destination, const ImlsConfig& config,
                       const Pose& initial) {
  return imls_register(source, destination, initial, config).pose;
}

}  // namespace bpsm
