#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "bpsm/association.hpp"
#include "bpsm/errors.hpp"
#include "bpsm/measurement_model.hpp"
#include "bpsm/optimize.hpp"
#include "bpsm/pointcloud.hpp"
#include "bpsm/pose.hpp"
#include "bpsm/rng.hpp"

namespace bpsm {

/// Uniform prior over a box in (x, y, theta).
struct PosePrior {
  double x_min = -10.0;
  double x_max = 10.0;
  double y_min = -10.0;
  double y_max = 10.0;
  double theta_min = -std::numbers::pi / 2.0;
  double theta_max = std::numbers::pi / 2.0;

  void validate() const {
    if (!(x_max >= x_min) || !(y_max >= y_min) || !(theta_max >= theta_min)) {
      throw ContractViolation("pose prior box is empty");
    }
    if (theta_min < -std::numbers::pi || theta_max > std::numbers::pi) {
      throw ContractViolation("pose prior rotation interval must lie within [-pi, pi]");
    }
  }

  bool contains(const PoseChart& c) const {
    constexpr double kSlack = 1e-12;
    return c.x >= x_min - kSlack && c.x <= x_max + kSlack && c.y >= y_min - kSlack && c.y <= y_max + kSlack &&
           c.theta >= theta_min - kSlack && c.theta <= theta_max + kSlack;
  }

  PoseChart clamp(const PoseChart& c) const {
    return {std::clamp(c.x, x_min, x_max), std::clamp(c.y, y_min, y_max),
            std::clamp(c.theta, theta_min, theta_max)};
  }

  double volume() const { return (x_max - x_min) * (y_max - y_min) * (theta_max - theta_min); }

  /// Log density on the support, -inf outside. A degenerate box is treated
  /// as an unnormalized indicator (log density 0).
  double log_density(const Pose& p) const {
    if (!contains(to_chart(p))) return kNegInf;
    const double v = volume();
    return v > 0.0 ? -std::log(v) : 0.0;
  }
};

struct PoseSampleSet {
  std::vector<Pose> poses;
  /// log f(dP^(p)) - log proposal(dP^(p)); zero when drawing from the uniform prior.
  std::vector<double> log_importance;

  std::size_t size() const { return poses.size(); }
};

/// n_p i.i.d. draws from the uniform prior box.
inline PoseSampleSet draw_samples(const PosePrior& prior, std::size_t n_p, CounterRng rng) {
  prior.validate();
  if (n_p == 0) throw ContractViolation("need at least one pose sample");
  PoseSampleSet set;
  set.poses.reserve(n_p);
  for (std::size_t p = 0; p < n_p; ++p) {
    const double x = rng.uniform(prior.x_min, prior.x_max);
    const double y = rng.uniform(prior.y_min, prior.y_max);
    const double theta = rng.uniform(prior.theta_min, prior.theta_max);
    set.poses.push_back(Pose::from_xy_theta(x, y, theta));
  }
  set.log_importance.assign(n_p, 0.0);
  return set;
}

/// Source and destination data prepared for inference: invalid destination
/// normals and source points outside the clutter support are dropped, and
/// coordinates are kept in flat arrays for the inner loops.
class MatchProblem {
 public:
  MatchProblem(const SourceCloud& source, const SurfaceCloud& destination, const MeasurementModel& model)
      : model_(model) {
    model_.validate();
    for (std::size_t i = 0; i < destination.size(); ++i) {
      if (!destination.valid[i]) continue;
      const double norm = destination.normals[i].norm();
      if (std::abs(norm - 1.0) > 1e-9) throw ContractViolation("destination normal is not unit length");
      dest_.push_back({destination.points[i], destination.normals[i]});
    }
    const double log_lambda = std::log(model_.clutter.lambda_na);
    for (const auto& s : source.points) {
      const double lf = log_clutter_density(s, model_.clutter);
      if (lf == kNegInf || !s.allFinite()) {
        ++dropped_sources_;
        continue;
      }
      sources_.push_back(s);
      sx_.push_back(s.x());
      sy_.push_back(s.y());
      log_gain_.push_back(-log_lambda - lf);
      log_clutter_ += lf;
    }
  }

  std::span<const SurfacePoint> destination() const { return dest_; }
  std::span<const Vec2> sources() const { return sources_; }
  const MeasurementModel& model() const { return model_; }
  std::size_t n_destination() const { return dest_.size(); }
  std::size_t n_source() const { return sources_.size(); }
  std::size_t dropped_sources() const { return dropped_sources_; }

  std::span<const double> source_x() const { return sx_; }
  std::span<const double> source_y() const { return sy_; }
  /// -log(lambda_NA f_NA(s_j)), the clutter-cancelling gain of an association.
  double log_gain(std::size_t j) const { return log_gain_[j]; }
  /// log v(dP; s). The uniform-polar clutter model makes it pose independent.
  double log_clutter() const { return log_clutter_; }

 private:
  MeasurementModel model_;
  std::vector<SurfacePoint> dest_;
  std::vector<Vec2> sources_;
  std::vector<double> sx_, sy_, log_gain_;
  double log_clutter_ = 0.0;
  std::size_t dropped_sources_ = 0;
};

struct PruningOptions {
  /// Skip (pair, pose) terms whose residual exceeds cutoff_sigmas * sigma_e.
  bool enabled = true;
  double cutoff_sigmas = 6.0;

  double cutoff_q() const {
    return enabled ? 0.5 * cutoff_sigmas * cutoff_sigmas : std::numeric_limits<double>::infinity();
  }
};

namespace detail {

/// Calls visit(j, q_j) for every source j with q_j <= cutoff_q, where
///   q_j = (c - (mx sx_j + my sy_j))^2 * inv_2s2
/// is the scaled squared point-to-plane residual. Blocks of eight are
/// screened with a vectorized minimum, since almost every term is pruned
/// at realistic error scales.
template <class Visit>
void for_each_close_source(double c, double mx, double my, std::span<const double> sx, std::span<const double> sy,
                           double inv_2s2, double cutoff_q, Visit&& visit) {
  using Block = Eigen::Array<double, 8, 1>;
  const std::size_t n = sx.size();
  std::size_t j0 = 0;
  for (; j0 + 8 <= n; j0 += 8) {
    const Block r = c - (mx * Eigen::Map<const Block>(sx.data() + j0) + my * Eigen::Map<const Block>(sy.data() + j0));
    const Block q = r.square() * inv_2s2;
    if (!(q.minCoeff() <= cutoff_q)) continue;
    for (int l = 0; l < 8; ++l) {
      if (q[l] <= cutoff_q) visit(j0 + static_cast<std::size_t>(l), q[l]);
    }
  }
  for (std::size_t j = j0; j < n; ++j) {
    const double r = c - (mx * sx[j] + my * sy[j]);
    const double q = r * r * inv_2s2;
    if (q <= cutoff_q) visit(j, q);
  }
}

/// Running log-sum-exp.
struct LogSumExp {
  double max = kNegInf;
  double sum = 0.0;

  void add(double x) {
    if (x == kNegInf) return;
    if (x > max) {
      sum = sum * std::exp(max - x) + 1.0;
      max = x;
    } else {
      sum += std::exp(x - max);
    }
  }
  double value() const { return max == kNegInf ? kNegInf : max + std::log(sum); }
};

}  // namespace detail

/// Monte Carlo approximation of the messages q_i -> a_i:
///   beta_i(a_i) = sum_p q_i(dP^(p), a_i; z_i) v(dP^(p); s)
/// accumulated in log space.
inline BeliefTable compute_q_messages(const PoseSampleSet& samples, const MatchProblem& problem,
                                      const PruningOptions& pruning = {}) {
  const std::size_t n_d = problem.n_destination();
  const std::size_t n_s = problem.n_source();
  const auto& m = problem.model();
  const double sigma = m.error.sigma_e;
  const double inv_2s2 = 0.5 / (sigma * sigma);
  const double cutoff_q = pruning.cutoff_q();
  const double log_fa = m.associability.f_a > 0.0 ? std::log(m.associability.f_a) : kNegInf;
  const double log_norm = -std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);

  detail::LogSumExp none_acc;
  std::vector<detail::LogSumExp> pair_acc(n_d * n_s);
  const auto sx = problem.source_x();
  const auto sy = problem.source_y();

  for (std::size_t p = 0; p < samples.size(); ++p) {
    const Pose& pose = samples.poses[p];
    const double log_v = problem.log_clutter() + samples.log_importance[p];
    none_acc.add(log_v);
    if (log_fa == kNegInf) continue;
    const Mat2& r = pose.rotation();
    const Vec2& t = pose.translation();
    for (std::size_t i = 0; i < n_d; ++i) {
      const auto& z = problem.destination()[i];
      // n . (d - R s - t) = c - m . s with m = R^T n.
      const Vec2 mv = r.transpose() * z.n;
      const double c = z.n.dot(z.d - t);
      auto* row = pair_acc.data() + i * n_s;
      detail::for_each_close_source(c, mv.x(), mv.y(), sx, sy, inv_2s2, cutoff_q,
                                    [&](std::size_t j, double q) { row[j].add(log_v - q); });
    }
  }

  Eigen::MatrixXd log_beta(static_cast<Eigen::Index>(n_d), static_cast<Eigen::Index>(n_s + 1));
  const double log_none = std::log1p(-m.associability.f_a) + none_acc.value();
  for (std::size_t i = 0; i < n_d; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    log_beta(ii, 0) = log_none;
    for (std::size_t j = 0; j < n_s; ++j) {
      const double acc = pair_acc[i * n_s + j].value();
      log_beta(ii, static_cast<Eigen::Index>(j + 1)) =
          acc == kNegInf ? kNegInf : log_fa + log_norm + problem.log_gain(j) + acc;
    }
    if (log_beta.row(ii).maxCoeff() == kNegInf) throw DegenerateEvidence("all association evidence vanished", i);
  }
  return BeliefTable::from_log_weights(log_beta);
}

/// The approximate marginal posterior
///   f(dP | z) ~ f(dP) v(dP; s) prod_i mu_{q_i -> dP}(dP),
///   mu_{q_i -> dP}(dP) = sum_{a_i} q_i(dP, a_i; z_i) w_i(a_i),
/// where w_i is the message product the association layer sends to q_i.
/// Each mixture is evaluated in closed form at any pose.
class MarginalPosterior {
 public:
  MarginalPosterior(const MatchProblem& problem, const PosePrior& prior, const MessageState& messages,
                    const PruningOptions& pruning = {})
      : problem_(&problem), prior_(prior), pruning_(pruning), sigma_(problem.model().error.sigma_e) {
    const std::size_t n_d = problem.n_destination();
    const std::size_t n_s = problem.n_source();
    log_w_.resize(n_d * (n_s + 1));
    for (std::size_t i = 0; i < n_d; ++i) {
      const auto w = n_s > 0 ? messages.incoming(i) : Eigen::RowVectorXd::Ones(1);
      for (std::size_t a = 0; a <= n_s; ++a) log_w_[i * (n_s + 1) + a] = std::log(w(static_cast<Eigen::Index>(a)));
    }
    rows_.resize(n_d);
    for (std::size_t i = 0; i < n_d; ++i) rows_[i] = i;
    rebuild();
  }

  /// Same messages, different error scale. Used for graduated refinement.
  MarginalPosterior with_sigma(double sigma) const {
    MarginalPosterior out = *this;
    out.sigma_ = sigma;
    out.rebuild();
    return out;
  }

  /// Restricted to every `stride`-th destination point (cheap coarse ranking).
  MarginalPosterior subsampled(std::size_t stride) const {
    MarginalPosterior out = *this;
    out.rows_.clear();
    for (std::size_t k = 0; k < rows_.size(); k += std::max<std::size_t>(stride, 1)) out.rows_.push_back(rows_[k]);
    out.rebuild();
    return out;
  }

  double sigma() const { return sigma_; }
  const PosePrior& prior() const { return prior_; }
  const MatchProblem& problem() const { return *problem_; }
  std::span<const std::size_t> rows() const { return rows_; }

  /// Incoming association weight w_i(a) (a = 0 for "not associated").
  double log_incoming(std::size_t i, std::size_t a) const {
    return log_w_[i * (problem_->n_source() + 1) + a];
  }

  /// log mu_{q_i -> dP}(dP) for destination point i.
  double log_message(std::size_t i, const Pose& pose) const {
    const auto k = static_cast<std::size_t>(std::find(rows_.begin(), rows_.end(), i) - rows_.begin());
    if (k == rows_.size()) throw ContractViolation("destination index not part of this posterior");
    return row_log_message(k, pose);
  }

  /// log of the unnormalized marginal posterior; -inf outside the prior.
  double log_density(const Pose& pose) const {
    const double lp = prior_.log_density(pose);
    if (lp == kNegInf) return kNegInf;
    double total = lp + problem_->log_clutter();
    for (std::size_t k = 0; k < rows_.size(); ++k) total += row_log_message(k, pose);
    return total;
  }

 private:
  void rebuild() {
    const std::size_t n_s = problem_->n_source();
    const auto& m = problem_->model();
    const double log_fa = m.associability.f_a > 0.0 ? std::log(m.associability.f_a) : kNegInf;
    const double log_norm = -std::log(sigma_) - 0.5 * std::log(2.0 * std::numbers::pi);
    const double log_none = std::log1p(-m.associability.f_a);
    coef_.assign(rows_.size() * n_s, 0.0);
    row_scale_.assign(rows_.size(), kNegInf);
    row_none_.assign(rows_.size(), kNegInf);
    for (std::size_t k = 0; k < rows_.size(); ++k) {
      const std::size_t i = rows_[k];
      row_none_[k] = log_none + log_incoming(i, 0);
      double mx = kNegInf;
      for (std::size_t j = 0; j < n_s; ++j) {
        const double a = log_fa + log_norm + problem_->log_gain(j) + log_incoming(i, j + 1);
        coef_[k * n_s + j] = a;
        mx = std::max(mx, a);
      }
      row_scale_[k] = mx;
      for (std::size_t j = 0; j < n_s; ++j) {
        coef_[k * n_s + j] = mx == kNegInf ? 0.0 : std::exp(coef_[k * n_s + j] - mx);
      }
    }
  }

  double row_log_message(std::size_t k, const Pose& pose) const {
    const std::size_t n_s = problem_->n_source();
    const auto& z = problem_->destination()[rows_[k]];
    if (n_s == 0 || row_scale_[k] == kNegInf) return row_none_[k];
    const double inv_2s2 = 0.5 / (sigma_ * sigma_);
    const double cutoff_q = pruning_.cutoff_q();
    const Vec2 mv = pose.rotation().transpose() * z.n;
    const double c = z.n.dot(z.d - pose.translation());
    const double* coef = coef_.data() + k * n_s;
    // With pruning off every term is kept; exp underflow of a single term is
    // harmless because the "not associated" floor is always positive.
    double sum = 0.0;
    detail::for_each_close_source(c, mv.x(), mv.y(), problem_->source_x(), problem_->source_y(), inv_2s2, cutoff_q,
                                  [&](std::size_t j, double q) { sum += coef[j] * std::exp(-q); });
    const double assoc = sum > 0.0 ? row_scale_[k] + std::log(sum) : kNegInf;
    return log_add(row_none_[k], assoc);
  }

  const MatchProblem* problem_;
  PosePrior prior_;
  PruningOptions pruning_;
  double sigma_;
  std::vector<double> log_w_;
  std::vector<std::size_t> rows_;
  std::vector<double> coef_;
  std::vector<double> row_scale_;
  std::vector<double> row_none_;
};

/// The per-point pose functions mu_{q_i -> dP} assembled from BP's
/// incoming messages, packaged as an evaluable posterior.
inline MarginalPosterior marginal_out_messages(const MatchProblem& problem, const PosePrior& prior,
                                               const MessageState& messages, const PruningOptions& pruning = {}) {
  return MarginalPosterior(problem, prior, messages, pruning);
}

/// log of the unnormalized marginal posterior at delta_p; -inf outside the prior.
inline double evaluate_log_posterior(const Pose& delta_p, const MarginalPosterior& posterior) {
  return posterior.log_density(delta_p);
}

struct InitialGuess {
  std::size_t index = 0;
  Pose pose;
  double log_posterior = kNegInf;
};

/// The pose sample with the largest posterior; ties go to the lowest index.
template <class Posterior>
InitialGuess initial_guess(const PoseSampleSet& samples, const Posterior& posterior) {
  if (samples.size() == 0) throw ContractViolation("empty pose sample set");
  InitialGuess best{0, samples.poses[0], posterior.log_density(samples.poses[0])};
  for (std::size_t p = 1; p < samples.size(); ++p) {
    const double v = posterior.log_density(samples.poses[p]);
    if (v > best.log_posterior) best = {p, samples.poses[p], v};
  }
  return best;
}

enum class RefineMethod { kNelderMead, kGradientAscent };

struct RefineOptions {
  RefineMethod method = RefineMethod::kNelderMead;
  /// Iteration cap per stage.
  int max_iters = 100;
  /// Error scales (meters) of the graduated stages run before the final
  /// stage at sigma_e; values not above sigma_e are skipped.
  std::vector<double> anneal_sigmas = {1.0, 0.3, 0.1};
  /// Graduated stages use at most this many destination points (evenly
  /// strided); 0 uses all of them. The final stage always uses all.
  std::size_t anneal_points = 96;
  /// Meters per radian when measuring simplex size and initial steps.
  double angle_scale = 10.0;
  /// Convergence threshold on the scaled simplex diameter (or step),
  /// relative to the stage sigma, for the final and graduated stages.
  double xtol = 1e-4;
  double anneal_xtol = 1e-2;
  double fd_step = 1e-6;
};

struct RefineResult {
  Pose pose;
  double log_posterior = kNegInf;
  double start_log_posterior = kNegInf;
  int iterations = 0;
  bool converged = false;
  /// Best value per iteration of the final (sigma_e) stage.
  std::vector<double> trace;
};

namespace detail {

inline OptimizeResult maximize_stage(const MarginalPosterior& staged, const Eigen::VectorXd& x0, double xtol,
                                     const RefineOptions& options) {
  const PosePrior& prior = staged.prior();
  const Eigen::Vector3d scale(1.0, 1.0, options.angle_scale);
  auto project = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    return prior.clamp(PoseChart::from_vector(v)).vector();
  };
  auto objective = [&](const Eigen::VectorXd& v) { return staged.log_density(from_chart(PoseChart::from_vector(v))); };
  const double sigma = staged.sigma();
  if (options.method == RefineMethod::kNelderMead) {
    const double step_m = 2.0 * sigma;
    const Eigen::Vector3d step(step_m, step_m, step_m / options.angle_scale);
    return nelder_mead_maximize(objective, project, x0, step, scale, options.max_iters, xtol * sigma);
  }
  return gradient_ascent_maximize(objective, project, x0, scale, options.max_iters, options.fd_step, xtol * sigma);
}

/// Runs the graduated stages only (coarse to fine), returning the chart
/// point reached and the iterations spent.
inline std::pair<Eigen::VectorXd, int> anneal(const Pose& start, const MarginalPosterior& posterior,
                                              const RefineOptions& options) {
  std::vector<double> sigmas;
  for (const double s : options.anneal_sigmas) {
    if (s > posterior.sigma()) sigmas.push_back(s);
  }
  std::sort(sigmas.begin(), sigmas.end(), std::greater<>());
  Eigen::VectorXd x = to_chart(start).vector();
  int iterations = 0;
  if (sigmas.empty()) return {x, 0};
  const std::size_t n = posterior.rows().size();
  const std::size_t stride = options.anneal_points == 0 || n <= options.anneal_points
                                 ? 1
                                 : (n + options.anneal_points - 1) / options.anneal_points;
  const MarginalPosterior reduced = posterior.subsampled(stride);
  for (const double s : sigmas) {
    const auto stage = maximize_stage(reduced.with_sigma(s), x, options.anneal_xtol, options);
    iterations += stage.iterations;
    x = stage.x;
  }
  return {x, iterations};
}

}  // namespace detail

/// Local maximization of the posterior over the (x, y, theta) chart,
/// clamped to the prior box. Optional graduated stages first run the same
/// search on the posterior at larger error scales, each starting from the
/// previous optimum. The returned value is never below the start's.
inline RefineResult refine_map(const Pose& start, const MarginalPosterior& posterior,
                               const RefineOptions& options = {}) {
  const double start_value = posterior.log_density(start);
  if (!std::isfinite(start_value)) throw ContractViolation("posterior is not finite at the refinement start");
  RefineResult result;
  result.start_log_posterior = start_value;
  auto [x, coarse_iterations] = detail::anneal(start, posterior, options);
  const auto stage = detail::maximize_stage(posterior, x, options.xtol, options);
  result.iterations = coarse_iterations + stage.iterations;
  result.converged = stage.converged;
  result.trace = stage.trace;
  result.pose = from_chart(PoseChart::from_vector(stage.x));
  result.log_posterior = stage.value;
  if (!(result.log_posterior >= start_value)) {
    result.pose = start;
    result.log_posterior = start_value;
  }
  return result;
}

struct InferenceConfig {
  MeasurementModel model;
  PosePrior prior;
  std::size_t n_p = 2000;
  BpOptions bp;
  RefineOptions refine;
  PruningOptions pruning;
  /// Number of coarse-ranked pose samples refined besides the initial guess.
  std::size_t global_candidates = 4;
  /// Destination points used for the coarse ranking.
  std::size_t coarse_points = 64;
};

struct MatchDiagnostics {
  std::size_t n_destination = 0;
  std::size_t n_source = 0;
  std::size_t dropped_sources = 0;
  int bp_iterations = 0;
  bool bp_converged = false;
  int refinement_iterations = 0;
  bool refinement_converged = false;
  std::size_t initial_sample_index = 0;
  double initial_log_posterior = kNegInf;
  /// Effective sample size of the posterior weights over the pose samples.
  double sample_ess = 0.0;
  std::size_t candidates_refined = 0;
};

struct MatchResult {
  Pose map_pose;
  double log_posterior_at_map = kNegInf;
  Pose initial_pose;
  Eigen::MatrixXd association_marginals;
  MatchDiagnostics diagnostics;
};

/// Full pipeline: sample the prior, send q-messages to the association
/// layer, run loopy BP, assemble the marginal posterior, pick the best
/// sample and refine it.
///
/// Besides the best sample, the `global_candidates` samples ranking highest
/// under the posterior at the coarsest graduated error scale are carried
/// through the graduated stages. The candidate with the highest posterior
/// (at sigma_e) afterwards gets the final refinement. The result never
/// scores below the best sample.
inline MatchResult match_scans(const SourceCloud& source, const SurfaceCloud& destination,
                               const InferenceConfig& config, CounterRng rng) {
  if (destination.valid_count() == 0) throw ContractViolation("destination has no valid surface point");
  const MatchProblem problem(source, destination, config.model);
  const auto samples = draw_samples(config.prior, config.n_p, rng.split("pose-samples"));
  const auto beliefs = compute_q_messages(samples, problem, config.pruning);
  const auto bp = run_bp(beliefs, config.bp);
  const auto posterior = marginal_out_messages(problem, config.prior, bp.messages, config.pruning);

  MatchResult out;
  out.association_marginals = bp.marginals;
  auto& diag = out.diagnostics;
  diag.n_destination = problem.n_destination();
  diag.n_source = problem.n_source();
  diag.dropped_sources = problem.dropped_sources();
  diag.bp_iterations = bp.messages.iterations;
  diag.bp_converged = bp.converged;

  std::vector<double> values(samples.size());
  std::size_t best = 0;
  for (std::size_t p = 0; p < samples.size(); ++p) {
    values[p] = evaluate_log_posterior(samples.poses[p], posterior);
    if (values[p] > values[best]) best = p;
  }
  diag.initial_sample_index = best;
  diag.initial_log_posterior = values[best];
  out.initial_pose = samples.poses[best];
  {
    double s1 = 0.0, s2 = 0.0;
    for (const double v : values) {
      const double w = std::exp(v - values[best]);
      s1 += w;
      s2 += w * w;
    }
    diag.sample_ess = s2 > 0.0 ? s1 * s1 / s2 : 0.0;
  }

  std::vector<std::size_t> starts{best};
  const auto& anneal = config.refine.anneal_sigmas;
  const double coarse_sigma = anneal.empty() ? 0.0 : *std::max_element(anneal.begin(), anneal.end());
  if (config.global_candidates > 0 && coarse_sigma > posterior.sigma()) {
    const std::size_t n = problem.n_destination();
    const std::size_t limit = std::max<std::size_t>(config.coarse_points, 1);
    const std::size_t stride = n <= limit ? 1 : (n + limit - 1) / limit;
    const auto coarse = posterior.with_sigma(coarse_sigma).subsampled(stride);
    std::vector<double> coarse_values(samples.size());
    for (std::size_t p = 0; p < samples.size(); ++p) coarse_values[p] = coarse.log_density(samples.poses[p]);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t k = std::min(config.global_candidates, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return coarse_values[a] > coarse_values[b] || (coarse_values[a] == coarse_values[b] && a < b);
                      });
    for (std::size_t c = 0; c < k; ++c) {
      if (order[c] != best) starts.push_back(order[c]);
    }
  }

  Eigen::VectorXd chosen;
  double chosen_value = kNegInf;
  for (const auto p : starts) {
    auto [x, iterations] = detail::anneal(samples.poses[p], posterior, config.refine);
    diag.refinement_iterations += iterations;
    const double v = posterior.log_density(from_chart(PoseChart::from_vector(x)));
    if (v > chosen_value || chosen.size() == 0) {
      chosen = x;
      chosen_value = v;
    }
  }
  diag.candidates_refined = starts.size();

  RefineOptions final_only = config.refine;
  final_only.anneal_sigmas.clear();
  const Pose from = std::isfinite(chosen_value) ? from_chart(PoseChart::from_vector(chosen)) : out.initial_pose;
  const auto refined = refine_map(from, posterior, final_only);
  diag.refinement_iterations += refined.iterations;
  diag.refinement_converged = refined.converged;
  out.map_pose = refined.pose;
  out.log_posterior_at_map = refined.log_posterior;
  if (!(out.log_posterior_at_map >= values[best])) {
    out.map_pose = out.initial_pose;
    out.log_posterior_at_map = values[best];
  }
  return out;
}

}  // namespace bpsm
