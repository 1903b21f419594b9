#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <unordered_map>
#include <vector>

#include "bpsm/errors.hpp"
#include "bpsm/pose.hpp"

namespace bpsm {

/// Raw scan points in the sensor frame.
struct SourceCloud {
  std::vector<Vec2> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Destination scan points with unit surface normals. Points whose normal
/// could not be estimated carry valid = false and are dropped before
/// inference.
struct SurfaceCloud {
  std::vector<Vec2> points;
  std::vector<Vec2> normals;
  std::vector<bool> valid;

  std::size_t size() const { return points.size(); }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
  }

  /// Copy holding only the valid points.
  SurfaceCloud valid_subset() const {
    SurfaceCloud out;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!valid[i]) continue;
      out.points.push_back(points[i]);
      out.normals.push_back(normals[i]);
      out.valid.push_back(true);
    }
    return out;
  }
};

/// Uniform grid over a point list for exact fixed-radius queries.
/// The cell size equals the query radius, so a query only visits the 3x3
/// block of cells around the query point.
class NeighborGrid {
 public:
  NeighborGrid(std::span<const Vec2> points, double radius) : points_(points), radius_(radius) {
    if (!(radius > 0.0) || !std::isfinite(radius)) {
      throw ContractViolation("neighbor radius must be positive and finite");
    }
    for (std::size_t i = 0; i < points_.size(); ++i) {
      cells_[key(cell_of(points_[i]))].push_back(static_cast<std::uint32_t>(i));
    }
  }

  /// Indices within radius of `query` (inclusive), ascending.
  std::vector<std::size_t> query(const Vec2& query) const {
    std::vector<std::size_t> out;
    const auto [cx, cy] = cell_of(query);
    const double r2 = radius_ * radius_;
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        const auto it = cells_.find(key({cx + dx, cy + dy}));
        if (it == cells_.end()) continue;
        for (const auto idx : it->second) {
          if ((points_[idx] - query).squaredNorm() <= r2) out.push_back(idx);
        }
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Neighbors of the stored point `i`, including i itself.
  std::vector<std::size_t> neighbors_of(std::size_t i) const {
    if (i >= points_.size()) throw ContractViolation("neighbor query index out of range");
    return query(points_[i]);
  }

 private:
  struct Cell {
    std::int64_t x;
    std::int64_t y;
  };

  Cell cell_of(const Vec2& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x() / radius_)),
            static_cast<std::int64_t>(std::floor(p.y() / radius_))};
  }

  static std::uint64_t key(Cell c) {
    return (static_cast<std::uint64_t>(c.x) << 32) ^ (static_cast<std::uint64_t>(c.y) & 0xffffffffULL);
  }

  std::span<const Vec2> points_;
  double radius_;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells_;
};

/// All indices i' with ||p[i'] - p[i]|| <= d_th, including i.
inline std::vector<std::size_t> neighbors(std::span<const Vec2> cloud, std::size_t i, double d_th) {
  if (i >= cloud.size()) throw ContractViolation("neighbor query index out of range");
  return NeighborGrid(cloud, d_th).neighbors_of(i);
}

/// Eigen-decomposition of a symmetric 2x2 matrix [[a, b], [b, c]].
struct SymmetricEigen2 {
  double minor_value;
  double major_value;
  Vec2 minor_vector;  // unit
};

inline SymmetricEigen2 symmetric_eigen2(double a, double b, double c) {
  const double mean = 0.5 * (a + c);
  const double radius = std::hypot(0.5 * (a - c), b);
  // Major axis angle; the minor axis is perpendicular.
  const double phi = 0.5 * std::atan2(2.0 * b, a - c);
  return {mean - radius, mean + radius, Vec2(-std::sin(phi), std::cos(phi))};
}

/// Frame attached to a point set: origin at the centroid, first axis along
/// the major principal direction with its sign fixed by the third moment.
/// Falls back to the input axes when the spread is isotropic. Moving the
/// points by a rigid motion g moves the frame by g.
inline Pose principal_frame(std::span<const Vec2> points) {
  if (points.empty()) throw ContractViolation("principal frame of an empty point set");
  Vec2 origin = Vec2::Zero();
  for (const auto& p : points) origin += p;
  origin /= static_cast<double>(points.size());
  double a = 0.0, b = 0.0, c = 0.0;
  for (const auto& p : points) {
    const Vec2 d = p - origin;
    a += d.x() * d.x();
    b += d.x() * d.y();
    c += d.y() * d.y();
  }
  const auto eig = symmetric_eigen2(a, b, c);
  if (!(eig.major_value - eig.minor_value > 1e-9 * std::max(eig.major_value, 1e-300))) {
    return Pose::pure_translation(origin.x(), origin.y());
  }
  Vec2 u(eig.minor_vector.y(), -eig.minor_vector.x());
  double m3 = 0.0;
  for (const auto& p : points) m3 += std::pow(u.dot(p - origin), 3);
  if (m3 < 0.0) u = -u;
  return Pose::from_xy_theta(origin.x(), origin.y(), std::atan2(u.y(), u.x()));
}

struct NormalEstimationOptions {
  double d_th = 2.0;
  std::size_t min_neighbors = 3;
  /// Normals are flipped to face this point (the destination sensor origin).
  Vec2 viewpoint = Vec2::Zero();
};

/// PCA normals: smallest-eigenvalue eigenvector of the sample covariance of
/// each point's d_th neighborhood (centroid-centered). Points with fewer
/// than min_neighbors neighbors, or an isotropic or zero covariance, are
/// flagged invalid.
inline SurfaceCloud estimate_normals(std::span<const Vec2> points,
                                     const NormalEstimationOptions& options = {}) {
  SurfaceCloud out;
  out.points.assign(points.begin(), points.end());
  out.normals.assign(points.size(), Vec2::Zero());
  out.valid.assign(points.size(), false);
  if (points.empty()) return out;

  const NeighborGrid grid(points, options.d_th);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto nbrs = grid.neighbors_of(i);
    if (nbrs.size() < options.min_neighbors) continue;

    Vec2 centroid = Vec2::Zero();
    for (const auto k : nbrs) centroid += points[k];
    centroid /= static_cast<double>(nbrs.size());
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (const auto k : nbrs) {
      const Vec2 d = points[k] - centroid;
      sxx += d.x() * d.x();
      sxy += d.x() * d.y();
      syy += d.y() * d.y();
    }
    const double denom = static_cast<double>(nbrs.size() - 1);
    sxx /= denom;
    sxy /= denom;
    syy /= denom;

    const auto eig = symmetric_eigen2(sxx, sxy, syy);
    const double scale = std::max(eig.major_value, 0.0);
    if (!(scale > 0.0)) continue;                                   // rank 0
    if (eig.major_value - eig.minor_value <= 1e-12 * scale) continue;  // isotropic

    Vec2 n = eig.minor_vector.normalized();
    if (n.dot(options.viewpoint - points[i]) < 0.0) n = -n;
    out.normals[i] = n;
    out.valid[i] = true;
  }
  return out;
}

}  // namespace bpsm
