#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <vector>

#include "bpsm/errors.hpp"
#include "bpsm/measurement_model.hpp"

namespace bpsm {

/// Unary association evidence beta_i(a_i), one row per destination point,
/// column 0 for "not associated" and column j for source j (1-based).
///
/// Stored as row-wise scaled weights: beta_i(a) = weights(i, a) * exp(log_scale(i)).
/// Scaling a row never changes the association marginals, so only
/// `weights` enters message passing.
struct BeliefTable {
  Eigen::MatrixXd weights;
  Eigen::VectorXd log_scale;

  std::size_t n_destination() const { return static_cast<std::size_t>(weights.rows()); }
  std::size_t n_source() const { return weights.cols() == 0 ? 0 : static_cast<std::size_t>(weights.cols() - 1); }

  static BeliefTable from_weights(const Eigen::MatrixXd& w) {
    return {w, Eigen::VectorXd::Zero(w.rows())};
  }

  /// Builds a table from log weights, normalizing each row by its maximum.
  static BeliefTable from_log_weights(const Eigen::MatrixXd& log_w) {
    BeliefTable t{Eigen::MatrixXd::Zero(log_w.rows(), log_w.cols()), Eigen::VectorXd::Zero(log_w.rows())};
    for (Eigen::Index i = 0; i < log_w.rows(); ++i) {
      const double mx = log_w.row(i).maxCoeff();
      t.log_scale(i) = mx;
      if (mx == kNegInf) continue;
      for (Eigen::Index a = 0; a < log_w.cols(); ++a) t.weights(i, a) = std::exp(log_w(i, a) - mx);
    }
    return t;
  }

  double log_beta(std::size_t i, std::size_t a) const {
    return std::log(weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a))) +
           log_scale(static_cast<Eigen::Index>(i));
  }

  void validate() const {
    for (Eigen::Index i = 0; i < weights.rows(); ++i) {
      bool positive = false;
      for (Eigen::Index a = 0; a < weights.cols(); ++a) {
        const double w = weights(i, a);
        if (!std::isfinite(w) || w < 0.0) {
          throw DegenerateEvidence("belief weights must be finite and non-negative", static_cast<std::size_t>(i));
        }
        positive = positive || w > 0.0;
      }
      if (!positive) throw DegenerateEvidence("belief row has no positive entry", static_cast<std::size_t>(i));
    }
  }
};

/// Messages between the a- and b-variables of the association graph.
/// mu(i, j): a_i -> b_j (N_D x N_S); nu(j, i): b_j -> a_i (N_S x N_D).
struct MessageState {
  Eigen::MatrixXd mu;
  Eigen::MatrixXd nu;
  int iterations = 0;

  /// Message product arriving at a_i, as weights over a_i in {0..N_S}:
  /// 1 for a_i = 0 and nu(j, i) for a_i = j.
  Eigen::RowVectorXd incoming(std::size_t i) const {
    Eigen::RowVectorXd w(nu.rows() + 1);
    w(0) = 1.0;
    for (Eigen::Index j = 0; j < nu.rows(); ++j) w(j + 1) = nu(j, static_cast<Eigen::Index>(i));
    return w;
  }
};

struct BpOptions {
  int max_iters = 200;
  double tol = 1e-8;
  double damping = 0.0;  // in [0, 1); 0 = undamped
};

struct BpResult {
  Eigen::MatrixXd marginals;  // N_D x (N_S + 1), rows sum to 1
  MessageState messages;
  bool converged = false;
  /// Largest relative message change of each sweep.
  std::vector<double> residuals;
};

/// The pairwise consistency factor psi_{i,j}(a_i, b_j). i and j are 1-based.
inline int pair_indicator(std::size_t a_i, std::size_t b_j, std::size_t i, std::size_t j) {
  if (a_i == j && b_j != i) return 0;
  if (b_j == i && a_i != j) return 0;
  return 1;
}

namespace detail {

using RowMajorArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Leave-one-out sums of non-negative terms, written as
//   rest + (top - t),
// where top is the largest term and rest the sum of all the others. Both
// parts are non-negative, so there is no cancellation even when one term
// dominates its row or column.

/// out(j) = sum over j' != j of t(j').
inline void leave_one_out(const Eigen::ArrayXd& t, Eigen::ArrayXd& out) {
  if (t.size() == 0) {
    out.resize(0);
    return;
  }
  const double total = t.sum();
  const double top = t.maxCoeff();
  double rest = total - top;
  if (top > 0.5 * total) {
    Eigen::Index k = 0;
    while (t(k) != top) ++k;
    rest = t.head(k).sum() + t.tail(t.size() - k - 1).sum();
  }
  out = rest + (top - t);
}

/// Column statistics for leave-one-out sums down the columns of a matrix
/// that is streamed one row at a time.
struct ColumnSums {
  Eigen::ArrayXd top;   // largest entry seen
  Eigen::ArrayXd rest;  // sum of all other entries

  void reset(Eigen::Index cols) {
    top = Eigen::ArrayXd::Zero(cols);
    rest = Eigen::ArrayXd::Zero(cols);
  }
  void add(const Eigen::ArrayXd& row) {
    rest += row.min(top);
    top = top.max(row);
  }
  /// Sum of each column without `own`, which must be one of its entries.
  void leave_one_out(const Eigen::ArrayXd& own, Eigen::ArrayXd& out) const { out = rest + (top - own); }
};

inline double relative_change(double old_v, double new_v) {
  if (old_v == new_v) return 0.0;
  return std::abs(new_v - old_v) / std::max(std::abs(old_v), std::abs(new_v));
}

/// Largest elementwise relative_change between two equally shaped arrays.
template <class A>
double max_relative_change(const A& old_v, const A& new_v) {
  if (old_v.size() == 0) return 0.0;
  // Both zero gives 0 / tiny = 0.
  const auto scale = old_v.abs().max(new_v.abs()).max(std::numeric_limits<double>::min());
  return ((new_v - old_v).abs() / scale).maxCoeff();
}

}  // namespace detail

/// Loopy sum-product over the bipartite association graph:
///   mu_{i->j} = beta_i(j) / (beta_i(0) + sum_{j' != j} beta_i(j') nu_{j'->i})
///   nu_{j->i} = 1 / (1 + sum_{i' != i} mu_{i'->j})
/// starting from nu = 1, until the largest relative message change drops
/// below tol or max_iters sweeps have run.
inline BpResult run_bp(const BeliefTable& beliefs, const BpOptions& options = {}) {
  beliefs.validate();
  if (!(options.damping >= 0.0 && options.damping < 1.0)) throw ContractViolation("damping must lie in [0, 1)");
  using RowMajor = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto n_d = static_cast<Eigen::Index>(beliefs.n_destination());
  const auto n_s = static_cast<Eigen::Index>(beliefs.n_source());
  const Eigen::MatrixXd& w = beliefs.weights;

  // Row-major working copies; nu_t(i, j) holds nu_{j->i}. A sweep is one
  // streaming pass over the rows: row i of nu only needs row i of mu plus
  // column sums of mu, and row i of the next mu only needs row i of nu.
  const RowMajor pair_w = w.rightCols(n_s).array();
  const Eigen::ArrayXd none_w = w.col(0).array();
  RowMajor mu = RowMajor::Zero(n_d, n_s);
  RowMajor mu_next = RowMajor::Zero(n_d, n_s);
  RowMajor nu_t = RowMajor::Ones(n_d, n_s);
  detail::ColumnSums sums, sums_next;
  Eigen::ArrayXd terms, loo, row_pw, fresh, old;

  // a -> b update of row i from the current nu; returns the largest relative change.
  auto update_mu_row = [&](Eigen::Index i, RowMajor& target, detail::ColumnSums& acc, int sweep) {
    row_pw = pair_w.row(i).transpose();
    terms = row_pw * nu_t.row(i).transpose();
    detail::leave_one_out(terms, loo);
    fresh = row_pw / (none_w(i) + loo);
    if (!std::isfinite(fresh.sum())) throw NumericFailure("non-finite a->b message", sweep);
    old = mu.row(i).transpose();
    target.row(i) = fresh.transpose();
    acc.add(fresh);
    return detail::max_relative_change(old, fresh);
  };

  BpResult result;
  int iterations = 0;
  if (n_s > 0 && n_d > 0) {
    double change_mu = 0.0;
    sums.reset(n_s);
    for (Eigen::Index i = 0; i < n_d; ++i) change_mu = std::max(change_mu, update_mu_row(i, mu, sums, 1));

    for (int iter = 1; iter <= options.max_iters; ++iter) {
      const bool last = iter == options.max_iters;
      double change_nu = 0.0;
      double change_next = 0.0;
      sums_next.reset(n_s);
      for (Eigen::Index i = 0; i < n_d; ++i) {
        // b -> a for row i.
        old = mu.row(i).transpose();
        sums.leave_one_out(old, loo);
        fresh = (1.0 - options.damping) / (1.0 + loo) + options.damping * nu_t.row(i).transpose();
        if (!std::isfinite(fresh.sum())) throw NumericFailure("non-finite b->a message", iter);
        old = nu_t.row(i).transpose();
        change_nu = std::max(change_nu, detail::max_relative_change(old, fresh));
        nu_t.row(i) = fresh.transpose();
        if (!last) change_next = std::max(change_next, update_mu_row(i, mu_next, sums_next, iter + 1));
      }
      const double change = std::max(change_mu, change_nu);
      result.residuals.push_back(change);
      iterations = iter;
      // The first sweep always changes mu from its zero initialization, so
      // convergence is judged from the second sweep on.
      if (iter > 1 && change < options.tol) {
        result.converged = true;
        break;
      }
      if (last) break;
      mu.swap(mu_next);
      std::swap(sums, sums_next);
      change_mu = change_next;
    }
  } else {
    result.converged = true;
  }
  result.messages.mu = mu.matrix();
  result.messages.nu = nu_t.matrix().transpose();
  result.messages.iterations = iterations;

  result.marginals = Eigen::MatrixXd::Zero(n_d, n_s + 1);
  for (Eigen::Index i = 0; i < n_d; ++i) {
    result.marginals(i, 0) = w(i, 0);
    for (Eigen::Index j = 0; j < n_s; ++j) result.marginals(i, j + 1) = w(i, j + 1) * nu_t(i, j);
    const double total = result.marginals.row(i).sum();
    if (!(total > 0.0) || !std::isfinite(total)) {
      throw NumericFailure("association marginal not normalizable", iterations);
    }
    result.marginals.row(i) /= total;
  }
  return result;
}

/// Exact association marginals by enumerating every valid a, weighted by
/// Psi(a) prod_i beta_i(a_i). Test oracle; requires (N_S+1)^N_D <= 1e6.
inline Eigen::MatrixXd brute_force_marginals(const BeliefTable& beliefs) {
  const std::size_t n_d = beliefs.n_destination();
  const std::size_t n_s = beliefs.n_source();
  double space = 1.0;
  for (std::size_t i = 0; i < n_d; ++i) space *= static_cast<double>(n_s + 1);
  if (space > 1e6) throw SizeError("enumeration space exceeds 1e6 hypotheses");

  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_d), static_cast<Eigen::Index>(n_s + 1));
  std::vector<std::size_t> a(n_d, 0);
  std::vector<bool> used(n_s + 1, false);
  double total = 0.0;
  // Depth-first over destination points, skipping already-used sources.
  auto recurse = [&](auto&& self, std::size_t i, double weight) -> void {
    if (weight == 0.0) return;
    if (i == n_d) {
      total += weight;
      for (std::size_t k = 0; k < n_d; ++k) {
        acc(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(a[k])) += weight;
      }
      return;
    }
    for (std::size_t v = 0; v <= n_s; ++v) {
      if (v != 0 && used[v]) continue;
      a[i] = v;
      if (v != 0) used[v] = true;
      self(self, i + 1, weight * beliefs.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(v)));
      if (v != 0) used[v] = false;
    }
  };
  recurse(recurse, 0, 1.0);
  if (!(total > 0.0)) throw DegenerateEvidence("no valid association with positive weight", 0);
  return acc / total;
}

}  // namespace bpsm
