#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "bpsm/errors.hpp"
#include "bpsm/pose.hpp"

namespace bpsm {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(exp(a) + exp(b)) without overflow; handles -inf operands.
inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

/// Zero-mean Gaussian point-to-plane error.
struct ErrorModel {
  double sigma_e = 0.03;

  void validate() const {
    if (!(sigma_e > 0.0)) throw ContractViolation("sigma_e must be positive");
  }
  double log_pdf(double residual) const {
    return -0.5 * (residual * residual) / (sigma_e * sigma_e) - std::log(sigma_e) -
           0.5 * std::log(2.0 * std::numbers::pi);
  }
  double pdf(double residual) const { return std::exp(log_pdf(residual)); }
};

/// Probability that a destination surface point has a source partner.
struct AssociabilityModel {
  double f_a = 0.8;

  void validate() const {
    if (!(f_a >= 0.0 && f_a < 1.0)) throw ContractViolation("f_A must lie in [0, 1)");
  }
};

/// Non-associable source points: Poisson count with mean lambda_na, each
/// uniform in (range, bearing) over the stated intervals. The Cartesian
/// density carries the polar Jacobian 1/r and does not depend on the pose.
struct ClutterModel {
  double lambda_na = 1.0;
  double range_min = 0.0;
  double range_max = 100.0;
  double bearing_min = 0.0;
  double bearing_max = 2.0 * std::numbers::pi;

  void validate() const {
    if (!(lambda_na > 0.0)) throw ContractViolation("model clutter rate must be positive");
    if (!(range_max > range_min) || range_min < 0.0 || !(bearing_max > bearing_min)) {
      throw ContractViolation("clutter intervals must be non-empty");
    }
  }
};

struct MeasurementModel {
  ErrorModel error;
  AssociabilityModel associability;
  ClutterModel clutter;

  void validate() const {
    error.validate();
    associability.validate();
    clutter.validate();
  }
};

struct SupportedDensity {
  double value = 0.0;
  bool support_violation = false;
};

/// n . (d - dP s), signed.
inline double point_to_plane_residual(const Vec2& d, const Vec2& n, const Vec2& s, const Pose& delta_p) {
  return n.dot(d - delta_p * s);
}

inline double pair_likelihood(const Vec2& d, const Vec2& n, const Vec2& s, const Pose& delta_p,
                              const ErrorModel& em) {
  return em.pdf(point_to_plane_residual(d, n, s, delta_p));
}

/// Log clutter density at a source point, or -inf outside the support.
inline double log_clutter_density(const Vec2& s, const ClutterModel& cm) {
  const double r = s.norm();
  if (!(r > 0.0) || r < cm.range_min || r > cm.range_max) return kNegInf;
  double bearing = std::atan2(s.y(), s.x());
  if (bearing < cm.bearing_min) bearing += 2.0 * std::numbers::pi;
  if (bearing < cm.bearing_min || bearing > cm.bearing_max) return kNegInf;
  return -std::log((cm.range_max - cm.range_min) * (cm.bearing_max - cm.bearing_min) * r);
}

/// f_NA(s | dP). The pose argument is accepted for generality; the
/// uniform-polar model ignores it.
inline SupportedDensity clutter_density(const Vec2& s, const Pose& /*delta_p*/, const ClutterModel& cm) {
  const double ld = log_clutter_density(s, cm);
  if (ld == kNegInf) return {0.0, true};
  return {std::exp(ld), false};
}

/// Destination surface point i: position and unit normal.
struct SurfacePoint {
  Vec2 d;
  Vec2 n;
};

/// log q_i(dP, a_i; z_i). a_i = 0 means "not associated", a_i = j in
/// 1..N_S pairs the destination point with source j (1-based).
inline double log_q_factor(const Pose& delta_p, std::size_t a_i, const SurfacePoint& z_i,
                           std::span<const Vec2> sources, const MeasurementModel& m) {
  const double f_a = m.associability.f_a;
  if (a_i == 0) return std::log1p(-f_a);
  if (a_i > sources.size()) throw ContractViolation("association value out of range");
  if (f_a == 0.0) return kNegInf;
  const Vec2& s = sources[a_i - 1];
  const double log_fna = log_clutter_density(s, m.clutter);
  if (log_fna == kNegInf) throw ContractViolation("source point outside the clutter support");
  return std::log(f_a) + m.error.log_pdf(point_to_plane_residual(z_i.d, z_i.n, s, delta_p)) -
         std::log(m.clutter.lambda_na) - log_fna;
}

inline double q_factor(const Pose& delta_p, std::size_t a_i, const SurfacePoint& z_i,
                       std::span<const Vec2> sources, const MeasurementModel& m) {
  return std::exp(log_q_factor(delta_p, a_i, z_i, sources, m));
}

/// log v(dP; s) = sum_j log f_NA(s_j | dP); -inf if any point is out of support.
inline double log_clutter_product(const Pose& /*delta_p*/, std::span<const Vec2> sources,
                                  const ClutterModel& cm) {
  double sum = 0.0;
  for (const auto& s : sources) sum += log_clutter_density(s, cm);
  return sum;
}

inline SupportedDensity clutter_product(const Pose& delta_p, std::span<const Vec2> sources,
                                        const ClutterModel& cm) {
  const double l = log_clutter_product(delta_p, sources, cm);
  if (l == kNegInf) return {0.0, true};
  return {std::exp(l), false};
}

/// 1 when no nonzero association value repeats, else 0.
inline int validity_psi(std::span<const std::size_t> a) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0) continue;
    for (std::size_t k = i + 1; k < a.size(); ++k) {
      if (a[k] == a[i]) return 0;
    }
  }
  return 1;
}

/// Unnormalized exact log f(z, a, N_S | dP):
///   Psi(a) lambda^(N_S-|D_a|)/N_S! e^-lambda prod_j f_NA(s_j)
///   prod_{i in D_a} f_A f(z^(i,a_i)) / f_NA(s_{a_i}) prod_{i notin D_a} (1 - f_A)
/// Returns -inf for invalid a. Meant for enumeration oracles at toy sizes.
inline double log_joint_density_exact(const Pose& delta_p, std::span<const std::size_t> a,
                                      std::span<const SurfacePoint> destination,
                                      std::span<const Vec2> sources, const MeasurementModel& m) {
  if (a.size() != destination.size()) throw ContractViolation("association vector length mismatch");
  if (validity_psi(a) == 0) return kNegInf;
  const double n_s = static_cast<double>(sources.size());
  const double lambda = m.clutter.lambda_na;
  const double f_a = m.associability.f_a;
  std::size_t associated = 0;
  double log_value = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0) {
      log_value += std::log1p(-f_a);
      continue;
    }
    if (a[i] > sources.size()) throw ContractViolation("association value out of range");
    ++associated;
    const Vec2& s = sources[a[i] - 1];
    log_value += std::log(f_a) +
                 m.error.log_pdf(point_to_plane_residual(destination[i].d, destination[i].n, s, delta_p)) -
                 log_clutter_density(s, m.clutter);
  }
  log_value += (n_s - static_cast<double>(associated)) * std::log(lambda) - std::lgamma(n_s + 1.0) - lambda;
  log_value += log_clutter_product(delta_p, sources, m.clutter);
  return log_value;
}

inline double joint_density_exact(const Pose& delta_p, std::span<const std::size_t> a,
                                  std::span<const SurfacePoint> destination, std::span<const Vec2> sources,
                                  const MeasurementModel& m) {
  return std::exp(log_joint_density_exact(delta_p, a, destination, sources, m));
}

}  // namespace bpsm
