#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bpsm/association.hpp"
#include "bpsm/measurement_model.hpp"
#include "bpsm/posterior.hpp"
#include "bpsm/rng.hpp"

namespace bpsm {

/// Outcome of one enumeration-oracle comparison.
struct OracleOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// ------------------------------------------------------- BP on trees

/// Random belief table with N_D = 1 or N_S = 1 (a tree-shaped graph).
inline BeliefTable random_tree_beliefs(CounterRng& rng, std::size_t max_other = 6) {
  const bool single_destination = rng.uniform01() < 0.5;
  const auto other = 1 + static_cast<std::size_t>(rng.uniform01() * static_cast<double>(max_other));
  const std::size_t n_d = single_destination ? 1 : other;
  const std::size_t n_s = single_destination ? other : 1;
  Eigen::MatrixXd log_w(static_cast<Eigen::Index>(n_d), static_cast<Eigen::Index>(n_s + 1));
  for (Eigen::Index i = 0; i < log_w.rows(); ++i) {
    for (Eigen::Index a = 0; a < log_w.cols(); ++a) log_w(i, a) = rng.uniform(-8.0, 8.0);
  }
  return BeliefTable::from_log_weights(log_w);
}

/// run_bp against brute_force_marginals on random tree instances.
inline OracleOutcome check_bp_trees(std::size_t instances, std::uint64_t seed, double tol = 1e-9) {
  const auto t0 = std::chrono::steady_clock::now();
  CounterRng rng = CounterRng(seed).split("bp-trees");
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    const auto beliefs = random_tree_beliefs(rng);
    const auto bp = run_bp(beliefs);
    const auto exact = brute_force_marginals(beliefs);
    worst = std::max(worst, (bp.marginals - exact).cwiseAbs().maxCoeff());
  }
  OracleOutcome out;
  out.name = "bp-tree-exactness";
  out.passed = worst <= tol;
  std::ostringstream detail;
  detail << instances << " instances, max |bp - exact| = " << worst;
  out.detail = detail.str();
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ------------------------------------------- posterior vs enumeration

/// A small matching problem whose exact posterior can be enumerated.
struct ToyInstance {
  std::vector<Vec2> sources;
  std::vector<SurfacePoint> destination;
  Pose truth;
  MeasurementModel model;
  PosePrior prior;
};

struct ToyOptions {
  std::size_t max_points = 3;
  /// Fixed number of destination points; 0 draws it from 1..max_points.
  std::size_t destination_points = 0;
  double sigma_e = 0.1;
  double f_a = 0.8;
  double lambda_na = 1.0;
  double clutter_range = 100.0;
  double destination_range = 8.0;
  PosePrior prior{-1.0, 1.0, -1.0, 1.0, -std::numbers::pi / 6.0, std::numbers::pi / 6.0};
};

/// Draws an instance from the measurement model: destination points with
/// random normals, each associated with probability f_A to a source whose
/// residual is N(0, sigma_e^2) at the true pose, plus Poisson clutter in
/// the clutter support. Draws with more than max_points sources, or none,
/// are rejected. Sources are shuffled.
inline ToyInstance make_toy_instance(CounterRng& rng, const ToyOptions& options = {}) {
  std::normal_distribution<double> unit_normal(0.0, 1.0);
  std::poisson_distribution<int> clutter_count(options.lambda_na);
  for (;;) {
    ToyInstance t;
    t.prior = options.prior;
    t.model.error.sigma_e = options.sigma_e;
    t.model.associability.f_a = options.f_a;
    t.model.clutter.lambda_na = options.lambda_na;
    t.model.clutter.range_max = options.clutter_range;
    const auto n_d = options.destination_points > 0
                         ? options.destination_points
                         : 1 + static_cast<std::size_t>(rng.uniform01() * static_cast<double>(options.max_points));
    // True pose uniform over the central 80% of the prior box.
    const auto central = [&](double lo, double hi) { return 0.5 * (lo + hi) + 0.8 * (hi - lo) * (rng.uniform01() - 0.5); };
    t.truth = Pose::from_xy_theta(central(t.prior.x_min, t.prior.x_max), central(t.prior.y_min, t.prior.y_max),
                                  central(t.prior.theta_min, t.prior.theta_max));
    const Pose to_source = t.truth.inverse();
    for (std::size_t i = 0; i < n_d; ++i) {
      const double r = rng.uniform(1.0, options.destination_range);
      const double b = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const Vec2 d(r * std::cos(b), r * std::sin(b));
      const Vec2 n(std::cos(phi), std::sin(phi));
      t.destination.push_back({d, n});
      if (rng.uniform01() < options.f_a) {
        const Vec2 tangent(-n.y(), n.x());
        const Vec2 x = d + options.sigma_e * unit_normal(rng) * n + rng.uniform(-0.5, 0.5) * tangent;
        t.sources.push_back(to_source * x);
      }
    }
    const int clutter = clutter_count(rng);
    for (int c = 0; c < clutter; ++c) {
      const double r = rng.uniform(0.0, options.clutter_range);
      const double b = rng.uniform(0.0, 2.0 * std::numbers::pi);
      t.sources.emplace_back(r * std::cos(b), r * std::sin(b));
    }
    if (t.sources.empty() || t.sources.size() > options.max_points) continue;
    const bool inside = std::all_of(t.sources.begin(), t.sources.end(), [&](const Vec2& s) {
      return s.norm() > 0.0 && s.norm() < options.clutter_range;
    });
    if (!inside) continue;
    for (std::size_t j = t.sources.size(); j > 1; --j) {
      const auto k = static_cast<std::size_t>(rng.uniform01() * static_cast<double>(j));
      std::swap(t.sources[j - 1], t.sources[std::min(k, j - 1)]);
    }
    return t;
  }
}

/// log sum over valid a of the exact joint, plus the log prior.
inline double exact_log_posterior(const ToyInstance& t, const Pose& p) {
  const std::size_t n_d = t.destination.size();
  const std::size_t n_s = t.sources.size();
  std::vector<std::size_t> a(n_d, 0);
  double acc = kNegInf;
  auto recurse = [&](auto&& self, std::size_t i) -> void {
    if (i == n_d) {
      acc = log_add(acc, log_joint_density_exact(p, a, t.destination, t.sources, t.model));
      return;
    }
    for (std::size_t v = 0; v <= n_s; ++v) {
      a[i] = v;
      self(self, i + 1);
    }
  };
  recurse(recurse, 0);
  return t.prior.log_density(p) + acc;
}

struct GridComparison {
  double max_relative = 0.0;  // max |approx - exact| / |exact| over normalized log densities
  bool argmax_match = false;
};

/// Compares the message-passing posterior with the enumerated one on a
/// grid x grid x grid lattice of cell centers, after normalizing both over
/// the lattice.
inline GridComparison compare_on_grid(const ToyInstance& t, std::size_t n_p, std::size_t grid, CounterRng rng) {
  SourceCloud source{t.sources};
  SurfaceCloud surface;
  for (const auto& z : t.destination) {
    surface.points.push_back(z.d);
    surface.normals.push_back(z.n);
    surface.valid.push_back(true);
  }
  const MatchProblem problem(source, surface, t.model);
  PruningOptions no_pruning;
  no_pruning.enabled = false;
  const auto samples = draw_samples(t.prior, n_p, rng);
  const auto beliefs = compute_q_messages(samples, problem, no_pruning);
  const auto bp = run_bp(beliefs);
  const auto posterior = marginal_out_messages(problem, t.prior, bp.messages, no_pruning);

  std::vector<double> approx, exact;
  const auto g = static_cast<double>(grid);
  for (std::size_t ix = 0; ix < grid; ++ix) {
    for (std::size_t iy = 0; iy < grid; ++iy) {
      for (std::size_t it = 0; it < grid; ++it) {
        const auto at = [&](double lo, double hi, std::size_t k) {
          return lo + (hi - lo) * (static_cast<double>(k) + 0.5) / g;
        };
        const Pose p = Pose::from_xy_theta(at(t.prior.x_min, t.prior.x_max, ix), at(t.prior.y_min, t.prior.y_max, iy),
                                           at(t.prior.theta_min, t.prior.theta_max, it));
        approx.push_back(evaluate_log_posterior(p, posterior));
        exact.push_back(exact_log_posterior(t, p));
      }
    }
  }
  auto normalize = [](std::vector<double>& v) {
    double total = kNegInf;
    for (const double x : v) total = log_add(total, x);
    for (double& x : v) x -= total;
  };
  normalize(approx);
  normalize(exact);
  GridComparison out;
  for (std::size_t k = 0; k < approx.size(); ++k) {
    out.max_relative = std::max(out.max_relative, std::abs(approx[k] - exact[k]) / std::abs(exact[k]));
  }
  const auto am = std::max_element(approx.begin(), approx.end()) - approx.begin();
  const auto em = std::max_element(exact.begin(), exact.end()) - exact.begin();
  out.argmax_match = am == em;
  return out;
}

inline OracleOutcome check_posterior_enumeration(std::size_t instances, std::size_t n_p, std::size_t grid,
                                                 std::uint64_t seed, double tol = 0.07,
                                                 const ToyOptions& options = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  CounterRng rng = CounterRng(seed).split("posterior-enumeration");
  double worst = 0.0;
  double worst_single = 0.0;  // instances with one destination point, where the approximation is exact
  std::size_t argmax_mismatches = 0;
  std::size_t within = 0;
  for (std::size_t k = 0; k < instances; ++k) {
    const auto toy = make_toy_instance(rng, options);
    const auto cmp = compare_on_grid(toy, n_p, grid, rng.split(static_cast<std::uint64_t>(k)));
    worst = std::max(worst, cmp.max_relative);
    if (toy.destination.size() == 1) worst_single = std::max(worst_single, cmp.max_relative);
    argmax_mismatches += cmp.argmax_match ? 0 : 1;
    within += cmp.max_relative <= tol && cmp.argmax_match ? 1 : 0;
  }
  OracleOutcome out;
  out.name = "posterior-vs-enumeration";
  out.passed = worst <= tol && argmax_mismatches == 0;
  std::ostringstream detail;
  detail << within << "/" << instances << " instances within " << tol << " on a " << grid << "^3 grid; max relative log error "
         << worst << " (single destination point: " << worst_single << "); argmax mismatches " << argmax_mismatches;
  out.detail = detail.str();
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace bpsm
