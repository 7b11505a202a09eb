#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "flowmatch/core.hpp"
#include "flowmatch/net.hpp"

namespace flowmatch {

/// Batched vector field: row i of the result is v(t, x.row(i)).
using Field = std::function<Matrix(double t, const Matrix& x)>;

inline Field model_field(const FieldModel& model) {
  return [&model](double t, const Matrix& x) { return forward(model, t, x); };
}

enum class Method { euler, rk4, dopri5 };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::euler: return "euler";
    case Method::rk4: return "rk4";
    case Method::dopri5: return "dopri5";
  }
  return "unknown";
}

inline Method parse_method(const std::string& name) {
  if (name == "euler") return Method::euler;
  if (name == "rk4") return Method::rk4;
  if (name == "dopri5" || name == "adaptive") return Method::dopri5;
  throw InvalidConfig("unknown integrator: " + name);
}

struct RecordOptions {
  bool path_energy = false;
  bool log_det = false;
  /// Number of uniformly spaced output times including both ends; 0 keeps only the endpoints.
  std::size_t grid_points = 0;
  /// Central-difference step for the divergence when log_det is recorded.
  double divergence_h = 1e-4;
};

struct AdaptiveOptions {
  double atol = 1e-5;
  double rtol = 1e-5;
  double initial_step_fraction = 1e-3;
  double safety = 0.9;
  double min_factor = 0.2;
  double max_factor = 10.0;
  double min_step = 1e-12;
  std::size_t max_steps = 1000000;
};

struct IntegratorSettings {
  Method method = Method::rk4;
  std::size_t n_steps = 100;
  AdaptiveOptions adaptive;
};

struct Trajectory {
  Vector times;
  std::vector<Matrix> states;
  std::size_t nfe = 0;
  std::size_t accepted_steps = 0;
  std::size_t rejected_steps = 0;
  /// Per-sample integral of ||v||^2 dt (when recorded).
  Vector path_energy;
  /// Per-sample integral of div v dt (when recorded).
  Vector log_det;

  const Matrix& final_state() const { return states.back(); }
};

/// sum_i [v_i(t, x + h e_i) - v_i(t, x - h e_i)] / (2h) for every row of x.
inline Vector divergence_batch(const Field& field, double t, const Matrix& x, double h, std::size_t* nfe = nullptr) {
  if (!(h > 0.0)) throw InvalidInput("divergence step must be positive");
  const std::size_t n = x.rows(), d = x.cols();
  Vector div(n, 0.0);
  Matrix probe = x;
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t i = 0; i < n; ++i) probe(i, k) = x(i, k) + h;
    const Matrix plus = field(t, probe);
    for (std::size_t i = 0; i < n; ++i) probe(i, k) = x(i, k) - h;
    const Matrix minus = field(t, probe);
    for (std::size_t i = 0; i < n; ++i) {
      div[i] += (plus(i, k) - minus(i, k)) / (2.0 * h);
      probe(i, k) = x(i, k);
    }
  }
  if (nfe) *nfe += 2 * d;
  return div;
}

inline double divergence(const Field& field, double t, std::span<const double> x, double h) {
  Matrix m(1, x.size(), Vector(x.begin(), x.end()));
  return divergence_batch(field, t, m, h)[0];
}

namespace detail {

// One field evaluation together with the scalar rates integrated alongside the state.
struct Stage {
  Matrix k;
  Vector energy;
  Vector div;
};

class StageEvaluator {
 public:
  StageEvaluator(const Field& field, const RecordOptions& record) : field_(field), record_(record) {}

  Stage operator()(double t, const Matrix& x) {
    Stage s;
    s.k = field_(t, x);
    ++nfe;
    if (s.k.rows() != x.rows() || s.k.cols() != x.cols()) throw ShapeError("field output shape does not match state");
    if (record_.path_energy) {
      s.energy.resize(x.rows());
      for (std::size_t i = 0; i < x.rows(); ++i) s.energy[i] = squared_norm(s.k.row(i));
    }
    if (record_.log_det) s.div = divergence_batch(field_, t, x, record_.divergence_h, &nfe);
    return s;
  }

  std::size_t nfe = 0;

 private:
  const Field& field_;
  const RecordOptions& record_;
};

inline void check_finite_state(const Matrix& x, double t) {
  if (!all_finite(x.values()))
    throw NumericError("integration diverged: non-finite state at t = " + std::to_string(t));
}

// Appends grid samples falling in (ta, tb] by linear interpolation between two states.
class GridRecorder {
 public:
  GridRecorder(Trajectory& traj, double t0, double t1, std::size_t points, const Matrix& x0)
      : traj_(traj), t0_(t0), t1_(t1), points_(points) {
    traj_.times.push_back(t0);
    traj_.states.push_back(x0);
    next_ = 1;
  }

  void step(double ta, const Matrix& xa, double tb, const Matrix& xb, bool last) {
    if (points_ < 2) {
      if (last) {
        traj_.times.push_back(t1_);
        traj_.states.push_back(xb);
      }
      return;
    }
    while (next_ < points_) {
      const bool final_point = next_ + 1 == points_;
      const double tg = final_point ? t1_ : t0_ + (t1_ - t0_) * static_cast<double>(next_) / (points_ - 1);
      if (!(final_point ? last : tg <= tb)) break;
      if (final_point || tg == tb) {
        traj_.states.push_back(xb);
      } else {
        const double w = (tg - ta) / (tb - ta);
        Matrix xi = xa;
        for (std::size_t j = 0; j < xi.size(); ++j) xi.values()[j] = (1.0 - w) * xa.values()[j] + w * xb.values()[j];
        traj_.states.push_back(std::move(xi));
      }
      traj_.times.push_back(tg);
      ++next_;
    }
  }

 private:
  Trajectory& traj_;
  double t0_, t1_;
  std::size_t points_;
  std::size_t next_ = 1;
};

inline void check_interval(double t0, double t1) {
  if (!(t1 > t0) || !std::isfinite(t0) || !std::isfinite(t1))
    throw InvalidInput("integration interval must satisfy t_start < t_end");
}

}  // namespace detail

/// Fixed-step explicit Euler or classical RK4.
inline Trajectory integrate_fixed(const Field& field, const Matrix& x0, double t_start, double t_end,
                                  std::size_t n_steps, Method method, const RecordOptions& record = {}) {
  if (n_steps == 0) throw InvalidInput("n_steps must be at least 1");
  if (method == Method::dopri5) throw InvalidInput("integrate_fixed supports euler and rk4 only");
  detail::check_interval(t_start, t_end);
  const std::size_t n = x0.rows();
  Trajectory traj;
  if (record.path_energy) traj.path_energy.assign(n, 0.0);
  if (record.log_det) traj.log_det.assign(n, 0.0);
  detail::StageEvaluator eval(field, record);
  detail::GridRecorder grid(traj, t_start, t_end, record.grid_points, x0);

  const double h = (t_end - t_start) / static_cast<double>(n_steps);
  Matrix x = x0;
  for (std::size_t s = 0; s < n_steps; ++s) {
    const double t = t_start + h * static_cast<double>(s);
    const double t_next = s + 1 == n_steps ? t_end : t_start + h * static_cast<double>(s + 1);
    Matrix x_next = x;
    if (method == Method::euler) {
      const detail::Stage k1 = eval(t, x);
      for (std::size_t j = 0; j < x.size(); ++j) x_next.values()[j] += h * k1.k.values()[j];
      for (std::size_t i = 0; i < n && record.path_energy; ++i) traj.path_energy[i] += h * k1.energy[i];
      for (std::size_t i = 0; i < n && record.log_det; ++i) traj.log_det[i] += h * k1.div[i];
    } else {
      const detail::Stage k1 = eval(t, x);
      Matrix tmp = x;
      for (std::size_t j = 0; j < x.size(); ++j) tmp.values()[j] = x.values()[j] + 0.5 * h * k1.k.values()[j];
      const detail::Stage k2 = eval(t + 0.5 * h, tmp);
      for (std::size_t j = 0; j < x.size(); ++j) tmp.values()[j] = x.values()[j] + 0.5 * h * k2.k.values()[j];
      const detail::Stage k3 = eval(t + 0.5 * h, tmp);
      for (std::size_t j = 0; j < x.size(); ++j) tmp.values()[j] = x.values()[j] + h * k3.k.values()[j];
      const detail::Stage k4 = eval(t + h, tmp);
      for (std::size_t j = 0; j < x.size(); ++j)
        x_next.values()[j] +=
            h / 6.0 * (k1.k.values()[j] + 2.0 * k2.k.values()[j] + 2.0 * k3.k.values()[j] + k4.k.values()[j]);
      for (std::size_t i = 0; i < n && record.path_energy; ++i)
        traj.path_energy[i] += h / 6.0 * (k1.energy[i] + 2.0 * k2.energy[i] + 2.0 * k3.energy[i] + k4.energy[i]);
      for (std::size_t i = 0; i < n && record.log_det; ++i)
        traj.log_det[i] += h / 6.0 * (k1.div[i] + 2.0 * k2.div[i] + 2.0 * k3.div[i] + k4.div[i]);
    }
    detail::check_finite_state(x_next, t_next);
    grid.step(t, x, t_next, x_next, s + 1 == n_steps);
    x = std::move(x_next);
    ++traj.accepted_steps;
  }
  traj.nfe = eval.nfe;
  return traj;
}

/// Adaptive Dormand-Prince 5(4) with FSAL, PI step control and sup-norm error test.
/// Path energy and divergence are integrated with the same fifth-order weights as the state.
inline Trajectory integrate_dopri5(const Field& field, const Matrix& x0, double t_start, double t_end,
                                   const AdaptiveOptions& opt = {}, const RecordOptions& record = {}) {
  if (!(opt.atol > 0.0) || !(opt.rtol > 0.0)) throw InvalidInput("atol and rtol must be positive");
  detail::check_interval(t_start, t_end);

  // Butcher tableau.
  constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  constexpr double a21 = 1.0 / 5;
  constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                   a65 = -5103.0 / 18656;
  constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  // Difference between the fifth- and fourth-order weights.
  constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                   e6 = 22.0 / 525, e7 = -1.0 / 40;

  const std::size_t n = x0.rows();
  const std::size_t sz = x0.size();
  Trajectory traj;
  if (record.path_energy) traj.path_energy.assign(n, 0.0);
  if (record.log_det) traj.log_det.assign(n, 0.0);
  detail::StageEvaluator eval(field, record);
  detail::GridRecorder grid(traj, t_start, t_end, record.grid_points, x0);

  const double span = t_end - t_start;
  double h = opt.initial_step_fraction * span;
  double t = t_start;
  Matrix x = x0;
  detail::Stage k1 = eval(t, x);
  double prev_ratio = 1e-4;
  Matrix tmp(x.rows(), x.cols());
  auto combine = [&](std::initializer_list<std::pair<double, const Matrix*>> terms, double hh) {
    for (std::size_t j = 0; j < sz; ++j) {
      double acc = 0.0;
      for (const auto& [c, m] : terms) acc += c * m->values()[j];
      tmp.values()[j] = x.values()[j] + hh * acc;
    }
  };

  std::size_t steps = 0;
  while (t < t_end) {
    if (++steps > opt.max_steps) throw NumericError("dopri5 exceeded the maximum number of steps");
    bool last = false;
    if (t + h >= t_end) {
      h = t_end - t;
      last = true;
    }
    if (h < opt.min_step) throw NumericError("dopri5 step size underflow at t = " + std::to_string(t) + " (stiff?)");

    combine({{a21, &k1.k}}, h);
    const detail::Stage k2 = eval(t + c2 * h, tmp);
    combine({{a31, &k1.k}, {a32, &k2.k}}, h);
    const detail::Stage k3 = eval(t + c3 * h, tmp);
    combine({{a41, &k1.k}, {a42, &k2.k}, {a43, &k3.k}}, h);
    const detail::Stage k4 = eval(t + c4 * h, tmp);
    combine({{a51, &k1.k}, {a52, &k2.k}, {a53, &k3.k}, {a54, &k4.k}}, h);
    const detail::Stage k5 = eval(t + c5 * h, tmp);
    combine({{a61, &k1.k}, {a62, &k2.k}, {a63, &k3.k}, {a64, &k4.k}, {a65, &k5.k}}, h);
    const detail::Stage k6 = eval(last ? t_end : t + h, tmp);
    combine({{b1, &k1.k}, {b3, &k3.k}, {b4, &k4.k}, {b5, &k5.k}, {b6, &k6.k}}, h);
    Matrix x_new = tmp;
    const double t_new = last ? t_end : t + h;
    detail::check_finite_state(x_new, t_new);
    detail::Stage k7 = eval(t_new, x_new);

    double ratio = 0.0;
    for (std::size_t j = 0; j < sz; ++j) {
      const double err = h * (e1 * k1.k.values()[j] + e3 * k3.k.values()[j] + e4 * k4.k.values()[j] +
                              e5 * k5.k.values()[j] + e6 * k6.k.values()[j] + e7 * k7.k.values()[j]);
      const double scale = opt.atol + opt.rtol * std::max(std::abs(x.values()[j]), std::abs(x_new.values()[j]));
      ratio = std::max(ratio, std::abs(err) / scale);
    }
    if (!std::isfinite(ratio)) throw NumericError("dopri5 error estimate is not finite at t = " + std::to_string(t));

    if (ratio <= 1.0) {
      auto accumulate = [&](Vector& total, const Vector detail::Stage::*rate) {
        for (std::size_t i = 0; i < n; ++i)
          total[i] += h * (b1 * (k1.*rate)[i] + b3 * (k3.*rate)[i] + b4 * (k4.*rate)[i] + b5 * (k5.*rate)[i] +
                           b6 * (k6.*rate)[i]);
      };
      if (record.path_energy) accumulate(traj.path_energy, &detail::Stage::energy);
      if (record.log_det) accumulate(traj.log_det, &detail::Stage::div);
      grid.step(t, x, t_new, x_new, last);
      t = t_new;
      x = std::move(x_new);
      k1 = std::move(k7);
      ++traj.accepted_steps;
      double factor = ratio == 0.0 ? opt.max_factor
                                   : opt.safety * std::pow(ratio, -0.17) * std::pow(std::max(prev_ratio, 1e-4), 0.04);
      factor = std::clamp(factor, opt.min_factor, opt.max_factor);
      prev_ratio = std::max(ratio, 1e-4);
      h *= factor;
    } else {
      ++traj.rejected_steps;
      const double factor = std::clamp(opt.safety * std::pow(ratio, -0.2), opt.min_factor, 1.0);
      h *= factor;
    }
  }
  traj.nfe = eval.nfe;
  return traj;
}

inline Trajectory integrate(const Field& field, const Matrix& x0, double t_start, double t_end,
                            const IntegratorSettings& settings, const RecordOptions& record = {}) {
  if (settings.method == Method::dopri5)
    return integrate_dopri5(field, x0, t_start, t_end, settings.adaptive, record);
  return integrate_fixed(field, x0, t_start, t_end, settings.n_steps, settings.method, record);
}

struct LogDetResult {
  Matrix x_end;
  Vector log_det;
  std::size_t nfe = 0;
};

/// Pushes x0 through the flow and accumulates log|det dx_end/dx0| = integral of div v dt.
inline LogDetResult integrate_with_logdet(const Field& field, const Matrix& x0, double t_start, double t_end,
                                          const IntegratorSettings& settings, double h = 1e-4) {
  RecordOptions record;
  record.log_det = true;
  record.divergence_h = h;
  Trajectory traj = integrate(field, x0, t_start, t_end, settings, record);
  return {traj.final_state(), std::move(traj.log_det), traj.nfe};
}

}  // namespace flowmatch
