#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace bpsm {

struct OptimizeResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  /// Best objective value after each iteration (non-decreasing).
  std::vector<double> trace;
};

/// Nelder-Mead maximization. `project` maps every trial point back into
/// the feasible set before evaluation (used to keep reflections inside a
/// box). Converges when the simplex diameter, measured after dividing each
/// coordinate by `scale`, falls below xtol.
template <class Objective, class Project>
OptimizeResult nelder_mead_maximize(Objective&& f, Project&& project, const Eigen::VectorXd& x0,
                                    const Eigen::VectorXd& step, const Eigen::VectorXd& scale,
                                    int max_iters, double xtol) {
  const auto n = x0.size();
  std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(n + 1));
  std::vector<double> vals(static_cast<std::size_t>(n + 1));
  pts[0] = project(x0);
  vals[0] = f(pts[0]);
  for (Eigen::Index k = 0; k < n; ++k) {
    Eigen::VectorXd p = x0;
    p(k) += step(k);
    p = project(p);
    if ((p - pts[0]).cwiseQuotient(scale).norm() == 0.0) {
      // Clamped onto the start: step the other way.
      p = x0;
      p(k) -= step(k);
      p = project(p);
    }
    pts[static_cast<std::size_t>(k + 1)] = p;
    vals[static_cast<std::size_t>(k + 1)] = f(p);
  }

  OptimizeResult result;
  std::vector<std::size_t> order(pts.size());
  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), 0);
    // Descending by value; ties keep the earlier vertex first.
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return vals[a] > vals[b]; });
    std::vector<Eigen::VectorXd> p2;
    std::vector<double> v2;
    for (auto o : order) {
      p2.push_back(pts[o]);
      v2.push_back(vals[o]);
    }
    pts = std::move(p2);
    vals = std::move(v2);
  };
  auto diameter = [&] {
    double d = 0.0;
    for (std::size_t k = 1; k < pts.size(); ++k) d = std::max(d, (pts[k] - pts[0]).cwiseQuotient(scale).norm());
    return d;
  };

  sort_simplex();
  for (int iter = 0; iter < max_iters; ++iter) {
    if (diameter() < xtol) {
      result.converged = true;
      break;
    }
    result.iterations = iter + 1;
    const std::size_t worst = pts.size() - 1;
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < worst; ++k) centroid += pts[k];
    centroid /= static_cast<double>(worst);

    const Eigen::VectorXd xr = project(centroid + (centroid - pts[worst]));
    const double fr = f(xr);
    if (fr > vals[0]) {
      const Eigen::VectorXd xe = project(centroid + 2.0 * (centroid - pts[worst]));
      const double fe = f(xe);
      if (fe > fr) {
        pts[worst] = xe;
        vals[worst] = fe;
      } else {
        pts[worst] = xr;
        vals[worst] = fr;
      }
    } else if (fr > vals[worst - 1]) {
      pts[worst] = xr;
      vals[worst] = fr;
    } else {
      const bool outside = fr > vals[worst];
      const Eigen::VectorXd xc = outside ? project(centroid + 0.5 * (xr - centroid))
                                         : project(centroid + 0.5 * (pts[worst] - centroid));
      const double fc = f(xc);
      if (fc > (outside ? fr : vals[worst])) {
        pts[worst] = xc;
        vals[worst] = fc;
      } else {
        for (std::size_t k = 1; k < pts.size(); ++k) {
          pts[k] = project(pts[0] + 0.5 * (pts[k] - pts[0]));
          vals[k] = f(pts[k]);
        }
      }
    }
    sort_simplex();
    result.trace.push_back(vals[0]);
  }
  if (!result.converged && diameter() < xtol) result.converged = true;
  result.x = pts[0];
  result.value = vals[0];
  return result;
}

/// Quasi-Newton (BFGS) ascent with central finite differences and
/// backtracking, in coordinates scaled by `scale`.
template <class Objective, class Project>
OptimizeResult gradient_ascent_maximize(Objective&& f, Project&& project, const Eigen::VectorXd& x0,
                                        const Eigen::VectorXd& scale, int max_iters, double fd_step,
                                        double xtol) {
  OptimizeResult result;
  Eigen::VectorXd x = project(x0);
  double fx = f(x);
  const auto n = x.size();
  // Ascent gradient in scaled coordinates z = x / scale.
  const auto gradient = [&](const Eigen::VectorXd& at) {
    Eigen::VectorXd g(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      Eigen::VectorXd xp = at, xm = at;
      const double h = fd_step * scale(k);
      xp(k) += h;
      xm(k) -= h;
      g(k) = (f(xp) - f(xm)) / (2.0 * fd_step);
    }
    return g;
  };
  Eigen::VectorXd g = gradient(x);
  Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(n, n);
  double step = 1.0;  // length of the first trial step along a steepest direction
  bool fresh = true;
  for (int iter = 0; iter < max_iters; ++iter) {
    result.iterations = iter + 1;
    if (!g.allFinite() || !(g.norm() > 0.0)) {
      result.converged = true;
      break;
    }
    Eigen::VectorXd dir = h_inv * g;
    if (!(dir.dot(g) > 0.0)) {
      h_inv.setIdentity();
      dir = g;
      fresh = true;
    }
    double t = fresh ? step / dir.norm() : 1.0;
    bool accepted = false;
    Eigen::VectorXd trial;
    double ft = fx;
    int halvings = 0;
    for (; halvings < 60; ++halvings) {
      trial = project(x + t * dir.cwiseProduct(scale));
      ft = f(trial);
      if (ft > fx) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      if (fresh) {
        result.converged = true;
        result.trace.push_back(fx);
        break;
      }
      // Retry once from a steepest step before giving up.
      h_inv.setIdentity();
      fresh = true;
      result.trace.push_back(fx);
      continue;
    }
    const Eigen::VectorXd s = (trial - x).cwiseQuotient(scale);
    const Eigen::VectorXd g_new = gradient(trial);
    const Eigen::VectorXd y = g - g_new;  // curvature of -f
    const double gain = ft - fx;
    x = trial;
    fx = ft;
    result.trace.push_back(fx);
    const bool newton_step = !fresh && halvings == 0;
    if (fresh) step = halvings == 0 ? 2.0 * step : std::max(s.norm(), 1e-300);
    // Short steps are common on ill-conditioned ridges while the curvature
    // model is still poor; require an untruncated quasi-Newton step that
    // also gains next to nothing.
    if (s.norm() < xtol && newton_step && gain <= 1e-10 * (1.0 + std::abs(fx))) {
      result.converged = true;
      break;
    }
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (fresh) h_inv *= sy / y.squaredNorm();
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n, n) - rho * s * y.transpose();
      h_inv = m * h_inv * m.transpose() + rho * s * s.transpose();
      fresh = false;
    } else {
      h_inv.setIdentity();
      fresh = true;
    }
    g = g_new;
  }
  result.x = x;
  result.value = fx;
  return result;
}

}  // namespace bpsm
