#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "flowmatch/core.hpp"
#include "flowmatch/coupling.hpp"
#include "flowmatch/integrate.hpp"
#include "flowmatch/net.hpp"
#include "flowmatch/paths.hpp"
#include "flowmatch/rng.hpp"
#include "flowmatch/trainer.hpp"

namespace flowmatch {

struct MetricReport {
  double w2_sq = 0.0;
  double path_energy = 0.0;
  double npe = 0.0;
  std::optional<double> mmd;
  double nfe_mean = 0.0;
  std::vector<std::pair<double, double>> per_time_errors;
};

/// Squared 2-Wasserstein distance between two empirical measures (exact OT).
inline double w2_squared(const Batch& a, const Batch& b) { return exact_ot_plan(a, b).cost; }

inline double w2_squared(const Matrix& a, const Matrix& b) { return w2_squared(Batch(a), Batch(b)); }

struct PathEnergy {
  double pe = 0.0;
  double npe = 0.0;
  std::size_t nfe = 0;
  Matrix endpoints;
};

/// Mean integral of ||v||^2 along trajectories from `source`, and |PE - W2^2| / W2^2.
inline PathEnergy path_energy_and_npe(const Field& field, const Matrix& source, double w2_ref,
                                      const IntegratorSettings& settings) {
  if (!(w2_ref > 0.0)) throw InvalidInput("reference W2^2 must be positive");
  RecordOptions record;
  record.path_energy = true;
  Trajectory traj = integrate(field, source, 0.0, 1.0, settings, record);
  PathEnergy out;
  for (double e : traj.path_energy) out.pe += e;
  out.pe /= static_cast<double>(source.rows());
  out.npe = std::abs(out.pe - w2_ref) / w2_ref;
  out.nfe = traj.nfe;
  out.endpoints = traj.final_state();
  return out;
}

inline PathEnergy path_energy_and_npe(const FieldModel& model, const Matrix& source, double w2_ref,
                                      const IntegratorSettings& settings) {
  return path_energy_and_npe(model_field(model), source, w2_ref, settings);
}

/// Biased (V-statistic) MMD^2 with kernel exp(-||x - y||^2 / (2 bandwidth_sq)).
inline double mmd(const Matrix& a, const Matrix& b, double bandwidth_sq) {
  if (!(bandwidth_sq > 0.0)) throw InvalidInput("bandwidth must be positive");
  if (a.cols() != b.cols()) throw ShapeError("mmd inputs differ in dimension");
  if (a.rows() == 0 || b.rows() == 0) throw InvalidInput("mmd inputs must be non-empty");
  auto mean_kernel = [&](const Matrix& p, const Matrix& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < q.rows(); ++j)
        s += std::exp(-squared_distance(p.row(i), q.row(j)) / (2.0 * bandwidth_sq));
    return s / (static_cast<double>(p.rows()) * static_cast<double>(q.rows()));
  };
  return std::max(0.0, mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b));
}

/// Reference field evaluated at per-row times.
using TimeField = std::function<Matrix(const Vector& t, const Matrix& x)>;

inline TimeField model_time_field(const FieldModel& model) {
  return [&model](const Vector& t, const Matrix& x) { return forward(model, t, x); };
}

/// Exact marginal field of a finite-support conditioning distribution.
inline TimeField oracle_time_field(const PathSpec& spec, std::vector<WeightedCondition> support) {
  return [spec, support = std::move(support)](const Vector& t, const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const Vector u = marginal_field_oracle(spec, support, t[i], x.row(i));
      std::copy(u.begin(), u.end(), out.row(i).begin());
    }
    return out;
  };
}

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

/// Monte-Carlo E ||u_t(x|z) - u_ref(t, x)||^2 with (t, z, x) drawn exactly as in training.
inline McEstimate objective_variance(const TrainConfig& config, const Sampler& source, const Sampler& target,
                                     const TimeField& reference, std::size_t n_samples, Rng& rng) {
  if (n_samples == 0) throw InvalidInput("objective variance needs at least one sample");
  double sum = 0.0, sum_sq = 0.0;
  std::size_t count = 0;
  while (count < n_samples) {
    const std::size_t bs = std::min(config.batch_size, n_samples - count);
    const Batch s = source(bs, rng);
    const Batch t = target(bs, rng);
    const RegressionBatch b = make_regression_batch(config, s, t, rng);
    const Matrix ref = reference(b.t, b.x);
    for (std::size_t i = 0; i < bs; ++i) {
      double sq = 0.0;
      for (std::size_t k = 0; k < ref.cols(); ++k) {
        const double r = b.u(i, k) - ref(i, k);
        sq += r * r;
      }
      sum += sq;
      sum_sq += sq * sq;
    }
    count += bs;
  }
  McEstimate e;
  e.samples = count;
  e.mean = sum / static_cast<double>(count);
  const double var = std::max(0.0, sum_sq / static_cast<double>(count) - e.mean * e.mean);
  e.std_error = std::sqrt(var / static_cast<double>(count));
  return e;
}

/// Static Schrodinger-bridge coupling between two empirical measures.
inline CouplingPlan sb_plan(const Batch& q0, const Batch& q1, double sigma, const SinkhornOptions& options = {}) {
  if (!(sigma > 0.0)) throw InvalidInput("bridge sigma must be positive");
  return sinkhorn_plan(q0, q1, {}, {}, 2.0 * sigma * sigma, options);
}

/// n draws from the time-t marginal of the bridge: (x0, x1) ~ plan, then
/// N(t x1 + (1 - t) x0, sigma^2 t (1 - t) I).
inline Matrix sb_ground_truth_sample(const CouplingPlan& plan, double sigma, double t, std::size_t n, Rng& rng) {
  check_time(t);
  const PairSample pairs = sample_pairs(plan, n, rng);
  const double std = sigma * std::sqrt(t * (1.0 - t));
  Matrix out(n, pairs.x0.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < out.cols(); ++k) {
      double v = t * pairs.x1(i, k) + (1.0 - t) * pairs.x0(i, k);
      if (std > 0.0) v += std * rng.normal();
      out(i, k) = v;
    }
  return out;
}

inline Matrix sb_ground_truth_sample(const Batch& q0, const Batch& q1, double sigma, double t, std::size_t n, Rng& rng,
                                     const SinkhornOptions& options = {}) {
  return sb_ground_truth_sample(sb_plan(q0, q1, sigma, options), sigma, t, n, rng);
}

struct SbCurve {
  std::vector<std::pair<double, double>> errors;  // (t, W2^2) at interior grid times
  double mean = 0.0;
  std::size_t nfe = 0;
};

/// Pushes n_samples source points through the field, records a uniform grid of
/// n_timepoints times and compares each interior time with the ground-truth bridge.
inline SbCurve sb_error_curve(const Field& field, const Batch& q0, const Batch& q1, double sigma,
                              std::size_t n_timepoints, std::size_t n_samples, const IntegratorSettings& settings,
                              Rng& rng, const SinkhornOptions& options = {}) {
  if (n_timepoints < 3) throw InvalidInput("need at least three timepoints");
  if (n_samples == 0 || n_samples > q0.size()) throw InvalidInput("n_samples must lie in [1, |q0|]");
  const CouplingPlan plan = sb_plan(q0, q1, sigma, options);
  Matrix start(n_samples, q0.dim());
  std::copy(q0.points.values().begin(), q0.points.values().begin() + static_cast<std::ptrdiff_t>(n_samples * q0.dim()),
            start.values().begin());
  RecordOptions record;
  record.grid_points = n_timepoints;
  const Trajectory traj = integrate(field, start, 0.0, 1.0, settings, record);
  SbCurve curve;
  curve.nfe = traj.nfe;
  for (std::size_t k = 1; k + 1 < n_timepoints; ++k) {
    const double t = traj.times[k];
    const Matrix truth = sb_ground_truth_sample(plan, sigma, t, n_samples, rng);
    const double e = w2_squared(traj.states[k], truth);
    curve.errors.emplace_back(t, e);
    curve.mean += e;
  }
  curve.mean /= static_cast<double>(curve.errors.size());
  return curve;
}

struct LogPartition {
  double log_z = 0.0;
  std::size_t nfe = 0;
};

/// log (1/K) sum_i R(x1_i) / N(x0_i; 0, I) |det dx1/dx0|, with x1 the flow of x0.
inline LogPartition log_partition_estimate(const Field& field, const LogDensity& log_r, const Matrix& x0,
                                           const IntegratorSettings& settings, double h = 1e-4) {
  const std::size_t k = x0.rows(), d = x0.cols();
  if (k == 0) throw InvalidInput("log-partition estimate needs K >= 1");
  const LogDetResult flow = integrate_with_logdet(field, x0, 0.0, 1.0, settings, h);
  Vector logw(k);
  const double log_norm = -0.5 * static_cast<double>(d) * kLog2Pi;
  for (std::size_t i = 0; i < k; ++i) {
    const double log_q0 = log_norm - 0.5 * squared_norm(x0.row(i));
    logw[i] = log_r(flow.x_end.row(i)) - log_q0 + flow.log_det[i];
  }
  return {log_sum_exp(logw) - std::log(static_cast<double>(k)), flow.nfe};
}

inline LogPartition log_partition_estimate(const Field& field, const LogDensity& log_r, std::size_t d, std::size_t k,
                                           const IntegratorSettings& settings, Rng& rng, double h = 1e-4) {
  return log_partition_estimate(field, log_r, rng.normal_matrix(k, d), settings, h);
}

}  // namespace flowmatch
