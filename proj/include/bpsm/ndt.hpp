#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "bpsm/errors.hpp"
#include "bpsm/pointcloud.hpp"
#include "bpsm/pose.hpp"

namespace bpsm {

struct NdtOptions {
  double cell_size = 2.0;
  std::size_t min_points = 3;
  int max_iters = 100;
  /// Stop when the Newton step (meters, radians) is shorter than this.
  double step_tol = 1e-6;
};

struct NdtCell {
  Vec2 mean = Vec2::Zero();
  Mat2 covariance = Mat2::Zero();
  Mat2 information = Mat2::Zero();
  std::size_t count = 0;
};

/// Four overlapping grids of normal distributions built from destination
/// points. The grids are laid out in a frame attached to the data (origin
/// at the centroid, axes along the principal directions) so that the
/// construction commutes with rigid motions of the input.
class NdtGrid {
 public:
  NdtGrid(std::span<const Vec2> points, const NdtOptions& options = {}) : cell_size_(options.cell_size) {
    if (points.empty()) throw ContractViolation("NDT needs a non-empty destination");
    if (!(cell_size_ > 0.0)) throw ContractViolation("NDT cell size must be positive");
    set_frame(points);
    const double floor = 1e-4 * cell_size_ * cell_size_;
    for (int g = 0; g < 4; ++g) {
      std::unordered_map<std::uint64_t, std::vector<std::size_t>> members;
      for (std::size_t k = 0; k < points.size(); ++k) members[key(g, points[k])].push_back(k);
      for (auto& [cell_key, idx] : members) {
        if (idx.size() < options.min_points) continue;
        NdtCell cell;
        cell.count = idx.size();
        for (const auto k : idx) cell.mean += points[k];
        cell.mean /= static_cast<double>(idx.size());
        for (const auto k : idx) {
          const Vec2 d = points[k] - cell.mean;
          cell.covariance += d * d.transpose();
        }
        cell.covariance /= static_cast<double>(idx.size() - 1);
        const auto eig = symmetric_eigen2(cell.covariance(0, 0), cell.covariance(0, 1), cell.covariance(1, 1));
        const Vec2 minor = eig.minor_vector;
        const Vec2 major(-minor.y(), minor.x());
        const double lo = std::max(eig.minor_value, floor);
        const double hi = std::max(eig.major_value, floor);
        cell.covariance = lo * minor * minor.transpose() + hi * major * major.transpose();
        cell.information = minor * minor.transpose() / lo + major * major.transpose() / hi;
        grids_[static_cast<std::size_t>(g)].emplace(cell_key, cell);
      }
    }
  }

  double cell_size() const { return cell_size_; }

  /// Cell of grid g (0..3) containing x, or nullptr.
  const NdtCell* cell_at(int g, const Vec2& x) const {
    const auto& grid = grids_[static_cast<std::size_t>(g)];
    const auto it = grid.find(key(g, x));
    return it == grid.end() ? nullptr : &it->second;
  }

  std::size_t cell_count() const {
    std::size_t n = 0;
    for (const auto& g : grids_) n += g.size();
    return n;
  }

 private:
  void set_frame(std::span<const Vec2> points) {
    const Pose frame = principal_frame(points);
    origin_ = frame.translation();
    axes_ = frame.rotation();
  }

  std::uint64_t key(int g, const Vec2& x) const {
    const Vec2 local = axes_.transpose() * (x - origin_);
    const double shift_x = (g & 1) ? 0.5 : 0.0;
    const double shift_y = (g & 2) ? 0.5 : 0.0;
    const auto ix = static_cast<std::int64_t>(std::floor(local.x() / cell_size_ + shift_x));
    const auto iy = static_cast<std::int64_t>(std::floor(local.y() / cell_size_ + shift_y));
    return (static_cast<std::uint64_t>(ix) << 32) ^ (static_cast<std::uint64_t>(iy) & 0xffffffffULL);
  }

  double cell_size_;
  Vec2 origin_ = Vec2::Zero();
  Mat2 axes_ = Mat2::Identity();
  std::array<std::unordered_map<std::uint64_t, NdtCell>, 4> grids_;
};

struct NdtEvaluation {
  double score = 0.0;
  Vec3 gradient = Vec3::Zero();  // of the score
  Mat3 hessian = Mat3::Zero();   // of the score
  std::size_t overlapping = 0;   // source points that hit at least one cell
};

/// NDT score sum_j sum_grids exp(-1/2 q^T Sigma^-1 q), q = T(s_j) - mu_cell,
/// with analytic derivatives over the (x, y, theta) chart.
inline NdtEvaluation ndt_evaluate(const NdtGrid& grid, std::span<const Vec2> source, const PoseChart& c,
                                  bool derivatives = true) {
  NdtEvaluation out;
  const double cs = std::cos(c.theta), sn = std::sin(c.theta);
  for (const auto& s : source) {
    const Vec2 x(cs * s.x() - sn * s.y() + c.x, sn * s.x() + cs * s.y() + c.y);
    // d x / d theta and d^2 x / d theta^2
    const Vec2 dth(-sn * s.x() - cs * s.y(), cs * s.x() - sn * s.y());
    const Vec2 dth2(-cs * s.x() + sn * s.y(), -sn * s.x() - cs * s.y());
    bool hit = false;
    for (int g = 0; g < 4; ++g) {
      const NdtCell* cell = grid.cell_at(g, x);
      if (cell == nullptr) continue;
      hit = true;
      const Vec2 q = x - cell->mean;
      const Vec2 iq = cell->information * q;
      const double e = std::exp(-0.5 * q.dot(iq));
      out.score += e;
      if (!derivatives) continue;
      Eigen::Matrix<double, 2, 3> jac;
      jac << 1.0, 0.0, dth.x(), 0.0, 1.0, dth.y();
      const Vec3 gq = jac.transpose() * iq;  // d(1/2 q^T I q)/dp
      out.gradient -= e * gq;
      Mat3 h = -(gq * gq.transpose()) + jac.transpose() * cell->information * jac;
      h(2, 2) += iq.dot(dth2);
      out.hessian -= e * h;
    }
    out.overlapping += hit ? 1 : 0;
  }
  return out;
}

struct NdtResult {
  Pose pose;
  double score = 0.0;
  double initial_score = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Newton ascent on the NDT score with step halving, from `initial`. The
/// search runs in the destination's principal frame, so the result moves
/// with any rigid motion applied to both inputs.
inline NdtResult ndt_register(const SourceCloud& source, std::span<const Vec2> destination, const Pose& initial,
                              const NdtOptions& options = {}) {
  if (destination.empty()) throw ContractViolation("NDT needs a non-empty destination");
  const Pose frame = principal_frame(destination);
  const Pose to_local = frame.inverse();
  std::vector<Vec2> local_destination, local_source;
  local_destination.reserve(destination.size());
  local_source.reserve(source.size());
  for (const auto& d : destination) local_destination.push_back(to_local * d);
  for (const auto& s : source.points) local_source.push_back(to_local * s);
  const NdtGrid grid(local_destination, options);
  const std::span<const Vec2> src(local_source);
  PoseChart x = to_chart(compose(compose(to_local, initial), frame));
  NdtEvaluation ev = ndt_evaluate(grid, src, x);
  if (ev.overlapping == 0) throw NoOverlap("no source point falls in a populated NDT cell");

  NdtResult result;
  result.initial_score = ev.score;
  for (int iter = 0; iter < options.max_iters; ++iter) {
    result.iterations = iter + 1;
    // Newton on the negative score; shift the Hessian until it is positive definite.
    Mat3 h = -ev.hessian;
    const Vec3 g = -ev.gradient;
    double shift = 0.0;
    Eigen::LLT<Mat3> llt;
    for (int k = 0; k < 60; ++k) {
      llt.compute(h + shift * Mat3::Identity());
      if (llt.info() == Eigen::Success) break;
      shift = shift == 0.0 ? 1e-6 * std::max(1.0, h.diagonal().cwiseAbs().maxCoeff()) : shift * 10.0;
    }
    if (llt.info() != Eigen::Success) break;
    Vec3 step = -llt.solve(g);
    if (!step.allFinite()) break;

    bool accepted = false;
    for (int halvings = 0; halvings < 40; ++halvings) {
      const PoseChart trial{x.x + step(0), x.y + step(1), wrap_angle(x.theta + step(2))};
      const NdtEvaluation tv = ndt_evaluate(grid, src, trial);
      if (tv.score > ev.score) {
        x = trial;
        ev = ndt_evaluate(grid, src, x);
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted || step.norm() < options.step_tol) {
      result.converged = true;
      break;
    }
  }
  result.pose = compose(compose(frame, from_chart(x)), to_local);
  result.score = ev.score;
  return result;
}

inline Pose ndt_match(const SourceCloud& source, std::span<const Vec2> destination, const Pose& initial,
                      const NdtOptions& options = {}) {
  return ndt_register(source, destination, initial, options).pose;
}

}  // namespace bpsm
