#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowmatch/core.hpp"
#include "flowmatch/rng.hpp"

namespace flowmatch {

enum class PathVariant { fm_gaussian, icfm, otcfm, sbcfm, icfm_gaussian_source };

inline std::string_view to_string(PathVariant v) {
  switch (v) {
    case PathVariant::fm_gaussian: return "fm_gaussian";
    case PathVariant::icfm: return "icfm";
    case PathVariant::otcfm: return "otcfm";
    case PathVariant::sbcfm: return "sbcfm";
    case PathVariant::icfm_gaussian_source: return "icfm_gaussian_source";
  }
  return "unknown";
}

/// Gaussian conditional probability path N(mu_t(z), sigma_t^2 I).
struct PathSpec {
  PathVariant variant = PathVariant::icfm;
  double sigma = 0.1;
};

inline void validate(const PathSpec& spec) {
  if (!(spec.sigma >= 0.0) || !std::isfinite(spec.sigma)) throw InvalidConfig("sigma must be finite and >= 0");
  if (spec.variant == PathVariant::sbcfm && !(spec.sigma > 0.0))
    throw InvalidConfig("sbcfm requires sigma > 0");
  if (spec.variant == PathVariant::fm_gaussian && !(spec.sigma < 1.0))
    throw InvalidConfig("fm_gaussian requires sigma in [0, 1)");
}

/// Conditioning variable. fm_gaussian only reads x1; every other variant uses the pair.
struct Condition {
  Vector x0;
  Vector x1;
};

struct WeightedCondition {
  Condition z;
  double mass = 1.0;
};

struct MeanStd {
  Vector mu;
  double std = 0.0;
};

inline bool uses_source(PathVariant v) noexcept { return v != PathVariant::fm_gaussian; }

inline void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("path time must lie in [0, 1], got " + std::to_string(t));
}

/// sigma_t; identical for every condition at a given time.
inline double path_std(const PathSpec& spec, double t) {
  check_time(t);
  const double s = spec.sigma;
  switch (spec.variant) {
    case PathVariant::fm_gaussian: return t * s - t + 1.0;
    case PathVariant::icfm:
    case PathVariant::otcfm: return s;
    case PathVariant::sbcfm: return s * std::sqrt(t * (1.0 - t));
    case PathVariant::icfm_gaussian_source: return std::sqrt((s * t) * (s * t) + 2.0 * s * t * (1.0 - t));
  }
  return 0.0;
}

/// mu_t(z) written into `out`. x0 is ignored for fm_gaussian.
inline void path_mean(const PathSpec& spec, std::span<const double> x0, std::span<const double> x1, double t,
                      std::span<double> out) {
  if (spec.variant == PathVariant::fm_gaussian) {
    for (std::size_t k = 0; k < x1.size(); ++k) out[k] = t * x1[k];
  } else {
    for (std::size_t k = 0; k < x1.size(); ++k) out[k] = t * x1[k] + (1.0 - t) * x0[k];
  }
}

/// u_t(x | z) written into `out`.
inline void cond_field_into(const PathSpec& spec, std::span<const double> x0, std::span<const double> x1, double t,
                            std::span<const double> x, std::span<double> out) {
  check_time(t);
  const std::size_t d = x1.size();
  const double s = spec.sigma;
  switch (spec.variant) {
    case PathVariant::fm_gaussian: {
      const double denom = 1.0 - (1.0 - s) * t;
      if (!(denom > 0.0)) throw DomainError("fm_gaussian field is singular at t = 1 when sigma = 0");
      for (std::size_t k = 0; k < d; ++k) out[k] = (x1[k] - (1.0 - s) * x[k]) / denom;
      return;
    }
    case PathVariant::icfm:
    case PathVariant::otcfm:
      for (std::size_t k = 0; k < d; ++k) out[k] = x1[k] - x0[k];
      return;
    case PathVariant::sbcfm: {
      if (t <= 0.0 || t >= 1.0) throw DomainError("sbcfm field is singular at t = 0 and t = 1");
      const double c = (1.0 - 2.0 * t) / (2.0 * t * (1.0 - t));
      for (std::size_t k = 0; k < d; ++k) {
        const double mu = t * x1[k] + (1.0 - t) * x0[k];
        out[k] = c * (x[k] - mu) + (x1[k] - x0[k]);
      }
      return;
    }
    case PathVariant::icfm_gaussian_source: {
      const double var = (s * t) * (s * t) + 2.0 * s * t * (1.0 - t);
      double c = 0.0;
      if (s > 0.0) {
        if (!(var > 0.0)) throw DomainError("icfm_gaussian_source field is singular at t = 0");
        c = (s * s * t + s * (1.0 - 2.0 * t)) / var;
      }
      for (std::size_t k = 0; k < d; ++k) {
        const double mu = t * x1[k] + (1.0 - t) * x0[k];
        out[k] = c * (x[k] - mu) + (x1[k] - x0[k]);
      }
      return;
    }
  }
}

inline void check_condition(const PathSpec& spec, const Condition& z) {
  if (z.x1.empty()) throw ShapeError("condition needs a target point");
  if (uses_source(spec.variant) && z.x0.size() != z.x1.size())
    throw ShapeError("condition source and target dimensions differ");
}

inline MeanStd mean_std(const PathSpec& spec, const Condition& z, double t) {
  check_condition(spec, z);
  MeanStd r;
  r.std = path_std(spec, t);
  r.mu.resize(z.x1.size());
  path_mean(spec, z.x0, z.x1, t, r.mu);
  return r;
}

/// x ~ p_t(x | z). A zero standard deviation returns the mean exactly.
inline Vector sample_xt(const PathSpec& spec, const Condition& z, double t, Rng& rng) {
  MeanStd ms = mean_std(spec, z, t);
  if (ms.std > 0.0)
    for (double& v : ms.mu) v += ms.std * rng.normal();
  return ms.mu;
}

inline Vector cond_field(const PathSpec& spec, const Condition& z, double t, std::span<const double> x) {
  check_condition(spec, z);
  if (x.size() != z.x1.size()) throw ShapeError("point dimension does not match condition");
  Vector out(x.size());
  cond_field_into(spec, z.x0, z.x1, t, x, out);
  return out;
}

/// Posterior-weighted average sum_z u_t(x|z) p_t(x|z) q(z) / sum_z p_t(x|z) q(z),
/// computed in the log domain. Shared by the marginal-field oracle and the
/// batch-aggregated target.
inline Vector mixture_field(const PathSpec& spec, std::span<const WeightedCondition> support, double t,
                            std::span<const double> x) {
  if (support.empty()) throw InvalidInput("conditioning set is empty");
  const std::size_t d = x.size();
  const double s = path_std(spec, t);
  Vector logw(support.size());
  Vector mu(d), u(d), out(d, 0.0);
  double max_log_density = -INFINITY;

  if (s == 0.0) {
    // Degenerate conditionals: only components whose mean is exactly x carry density.
    double total = 0.0;
    for (const auto& wc : support) {
      check_condition(spec, wc.z);
      path_mean(spec, wc.z.x0, wc.z.x1, t, mu);
      if (squared_distance(mu, x) != 0.0 || !(wc.mass > 0.0)) continue;
      cond_field_into(spec, wc.z.x0, wc.z.x1, t, x, u);
      for (std::size_t k = 0; k < d; ++k) out[k] += wc.mass * u[k];
      total += wc.mass;
    }
    if (!(total > 0.0)) throw DegenerateError("marginal density is zero at the query point");
    for (double& v : out) v /= total;
    return out;
  }

  const double log_norm = -static_cast<double>(d) * std::log(s) - 0.5 * static_cast<double>(d) * kLog2Pi;
  for (std::size_t i = 0; i < support.size(); ++i) {
    const auto& wc = support[i];
    check_condition(spec, wc.z);
    if (wc.z.x1.size() != d) throw ShapeError("point dimension does not match condition");
    path_mean(spec, wc.z.x0, wc.z.x1, t, mu);
    const double log_density = -0.5 * squared_distance(mu, x) / (s * s) + log_norm;
    max_log_density = std::max(max_log_density, log_density);
    logw[i] = wc.mass > 0.0 ? log_density + std::log(wc.mass) : -INFINITY;
  }
  if (max_log_density < -745.0) throw DegenerateError("all conditional densities underflow at the query point");
  const double lse = log_sum_exp(logw);
  if (!std::isfinite(lse)) throw DegenerateError("conditioning set carries no mass");
  for (std::size_t i = 0; i < support.size(); ++i) {
    const double w = std::exp(logw[i] - lse);
    if (w == 0.0) continue;
    cond_field_into(spec, support[i].z.x0, support[i].z.x1, t, x, u);
    for (std::size_t k = 0; k < d; ++k) out[k] += w * u[k];
  }
  return out;
}

/// Exact marginal field u_t(x) for a finitely supported q(z).
inline Vector marginal_field_oracle(const PathSpec& spec, std::span<const WeightedCondition> support, double t,
                                    std::span<const double> x) {
  double total = 0.0;
  for (const auto& wc : support) total += wc.mass;
  if (std::abs(total - 1.0) > 1e-9) throw InvalidInput("support masses must sum to 1");
  return mixture_field(spec, support, t, x);
}

/// Target conditioned on a set of pairs z-bar instead of a single pair.
inline Vector aggregated_target(const PathSpec& spec, std::span<const WeightedCondition> zbar, double t,
                                std::span<const double> x) {
  return mixture_field(spec, zbar, t, x);
}

}  // namespace flowmatch
