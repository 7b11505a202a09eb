#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "flowmatch/core.hpp"
#include "flowmatch/coupling.hpp"
#include "flowmatch/data.hpp"
#include "flowmatch/net.hpp"
#include "flowmatch/paths.hpp"
#include "flowmatch/rng.hpp"

namespace flowmatch {

struct TrainConfig {
  PathSpec path;
  CouplingKind coupling = CouplingKind::independent;
  /// Entropic regularization for the sinkhorn coupling; unset means 2 sigma^2.
  std::optional<double> sinkhorn_epsilon;
  SinkhornOptions sinkhorn;
  std::size_t batch_size = 512;
  /// Coupling is solved on chunks of this size inside each minibatch; unset means batch_size.
  std::optional<std::size_t> ot_batch_size;
  std::size_t max_epochs = 1000;
  /// 0 means ceil(10^4 / batch_size).
  std::size_t steps_per_epoch = 0;
  /// Epochs between validation checks; 0 disables validation and early stopping.
  std::size_t val_interval = 10;
  std::size_t patience = 3;
  AdamWConfig optimizer;
  std::vector<std::size_t> hidden{64, 64, 64};
  std::uint64_t seed = 0;
  std::size_t aggregation_m = 1;
  std::optional<double> wall_clock_limit_seconds;

  double epsilon() const { return sinkhorn_epsilon.value_or(2.0 * path.sigma * path.sigma); }
  std::size_t ot_chunk() const { return ot_batch_size.value_or(batch_size); }
  std::size_t epoch_steps() const {
    return steps_per_epoch ? steps_per_epoch : (10000 + batch_size - 1) / batch_size;
  }
};

inline void validate(const TrainConfig& c) {
  validate(c.path);
  if (c.batch_size == 0) throw InvalidConfig("batch_size must be at least 1");
  if (c.ot_batch_size && *c.ot_batch_size == 0) throw InvalidConfig("ot_batch_size must be at least 1");
  if (c.aggregation_m == 0) throw InvalidConfig("aggregation_m must be at least 1");
  if (c.hidden.empty()) throw InvalidConfig("hidden layer list is empty");
  if (c.val_interval > 0 && c.patience == 0) throw InvalidConfig("patience must be at least 1");
  if (c.coupling == CouplingKind::entropic_ot && !(c.epsilon() > 0.0))
    throw InvalidConfig("sinkhorn coupling needs epsilon > 0");
  if (c.path.variant == PathVariant::sbcfm && c.coupling != CouplingKind::entropic_ot)
    throw InvalidConfig("sbcfm requires the sinkhorn coupling");
  if (c.path.variant == PathVariant::otcfm && c.coupling != CouplingKind::exact_ot)
    throw InvalidConfig("otcfm requires the exact_ot coupling");
}

/// Draws n fresh points.
using Sampler = std::function<Batch(std::size_t n, Rng& rng)>;

inline Sampler dataset_sampler(DatasetSpec spec) {
  return [spec](std::size_t n, Rng& rng) { return sample_dataset(spec, n, rng); };
}

/// Minibatches without replacement from a fixed point set, reshuffled after every pass.
inline Sampler finite_sampler(Batch data) {
  if (data.size() == 0) throw InvalidInput("finite sampler needs at least one point");
  struct State {
    Batch data;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };
  auto state = std::make_shared<State>();
  state->data = std::move(data);
  state->order.resize(state->data.size());
  state->cursor = state->data.size();
  return [state](std::size_t n, Rng& rng) {
    const std::size_t total = state->data.size(), d = state->data.dim();
    Matrix out(n, d);
    Vector weights;
    if (state->data.weighted()) weights.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (state->cursor == total) {
        for (std::size_t i = 0; i < total; ++i) state->order[i] = i;
        for (std::size_t i = total; i > 1; --i) std::swap(state->order[i - 1], state->order[rng.below(i)]);
        state->cursor = 0;
      }
      const std::size_t src = state->order[state->cursor++];
      const auto r = state->data.points.row(src);
      std::copy(r.begin(), r.end(), out.row(k).begin());
      if (!weights.empty()) weights[k] = state->data.weights[src];
    }
    if (!weights.empty()) {
      double s = 0.0;
      for (double w : weights) s += w;
      for (double& w : weights) w /= s;
    }
    return Batch(std::move(out), std::move(weights));
  };
}

/// Times, inputs, regression targets and loss weights for one optimization step.
struct RegressionBatch {
  Vector t;
  Matrix x;
  Matrix u;
  Vector weights;  // empty means uniform
};

/// Global time window covered by a training leg. Local path time s in [0, 1)
/// maps to t_start + s (t_end - t_start) and targets are rescaled accordingly.
struct TimeWindow {
  double t_start = 0.0;
  double t_end = 1.0;
};

inline double sample_time(const PathSpec& spec, Rng& rng) {
  if (spec.variant == PathVariant::sbcfm) return 0.01 + 0.98 * rng.uniform();
  double t = rng.uniform();
  // The Gaussian-source path has zero width at t = 0.
  while (spec.variant == PathVariant::icfm_gaussian_source && t == 0.0) t = rng.uniform();
  return t;
}

namespace detail {

inline Batch slice(const Batch& b, std::size_t begin, std::size_t end) {
  const std::size_t d = b.dim();
  Matrix m(end - begin, d);
  std::copy(b.points.values().begin() + static_cast<std::ptrdiff_t>(begin * d),
            b.points.values().begin() + static_cast<std::ptrdiff_t>(end * d), m.values().begin());
  Vector w;
  if (b.weighted()) {
    w.assign(b.weights.begin() + static_cast<std::ptrdiff_t>(begin), b.weights.begin() + static_cast<std::ptrdiff_t>(end));
    double s = 0.0;
    for (double v : w) s += v;
    if (!(s > 0.0)) throw DegenerateError("minibatch chunk carries no target mass");
    for (double& v : w) v /= s;
  }
  return Batch(std::move(m), std::move(w));
}

}  // namespace detail

/// Couples the minibatch, samples pairs, times and points, and computes targets.
inline RegressionBatch make_regression_batch(const TrainConfig& config, const Batch& source, const Batch& target,
                                             Rng& rng, const TimeWindow& window = {}) {
  if (source.size() != target.size()) throw ShapeError("source and target minibatches differ in size");
  if (source.dim() != target.dim()) throw ShapeError("source and target dimensions differ");
  const std::size_t n = source.size(), d = source.dim();
  if (n == 0) throw InvalidInput("empty minibatch");
  const double span = window.t_end - window.t_start;
  if (!(span > 0.0)) throw InvalidInput("time window must have positive length");

  Matrix x0(n, d), x1(n, d);
  Vector loss_weights;
  const std::size_t chunk = std::min(config.ot_chunk(), n);
  if (config.coupling == CouplingKind::independent) {
    x0 = source.points;
    x1 = target.points;
    if (target.weighted()) {
      loss_weights = target.weights;
      double s = 0.0;
      for (double v : loss_weights) s += v;
      if (!(s > 0.0)) throw DegenerateError("target minibatch carries no mass");
      for (double& v : loss_weights) v /= s;
    }
  } else {
    for (std::size_t begin = 0; begin < n; begin += chunk) {
      const std::size_t end = std::min(n, begin + chunk);
      const Batch s = detail::slice(source, begin, end);
      const Batch t = detail::slice(target, begin, end);
      CouplingPlan plan = config.coupling == CouplingKind::exact_ot
                              ? exact_ot_plan(s, t, {}, t.weights)
                              : sinkhorn_plan(s, t, {}, t.weights, config.epsilon(), config.sinkhorn);
      const PairSample pairs = sample_pairs(plan, end - begin, rng);
      std::copy(pairs.x0.values().begin(), pairs.x0.values().end(),
                x0.values().begin() + static_cast<std::ptrdiff_t>(begin * d));
      std::copy(pairs.x1.values().begin(), pairs.x1.values().end(),
                x1.values().begin() + static_cast<std::ptrdiff_t>(begin * d));
    }
  }

  RegressionBatch out;
  out.t.resize(n);
  out.x = Matrix(n, d);
  out.u = Matrix(n, d);
  out.weights = loss_weights;
  const std::size_t m = std::min(config.aggregation_m, n);
  std::vector<WeightedCondition> zbar;
  Vector xi(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = sample_time(config.path, rng);
    const Condition z{Vector(x0.row(i).begin(), x0.row(i).end()), Vector(x1.row(i).begin(), x1.row(i).end())};
    xi = sample_xt(config.path, z, s, rng);
    Vector u;
    if (m <= 1) {
      u = cond_field(config.path, z, s, xi);
    } else {
      // Pair i and the next m - 1 pairs (cyclically) form the conditioning set.
      zbar.clear();
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t j = (i + k) % n;
        const double mass = loss_weights.empty() ? 1.0 / static_cast<double>(m) : loss_weights[j];
        zbar.push_back({{Vector(x0.row(j).begin(), x0.row(j).end()), Vector(x1.row(j).begin(), x1.row(j).end())},
                        mass});
      }
      u = aggregated_target(config.path, zbar, s, xi);
    }
    out.t[i] = window.t_start + s * span;
    std::copy(xi.begin(), xi.end(), out.x.row(i).begin());
    for (std::size_t k = 0; k < d; ++k) out.u(i, k) = u[k] / span;
  }
  return out;
}

/// sum_i w_i ||v(t_i, x_i) - u_i||^2 without gradients.
inline double regression_loss(const FieldModel& model, const RegressionBatch& b) {
  const Matrix v = forward(model, b.t, b.x);
  const std::size_t n = b.x.rows();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t k = 0; k < v.cols(); ++k) {
      const double r = v(i, k) - b.u(i, k);
      sq += r * r;
    }
    loss += (b.weights.empty() ? 1.0 / static_cast<double>(n) : b.weights[i]) * sq;
  }
  return loss;
}

/// One optimizer step on a freshly coupled minibatch. Returns the pre-step loss.
inline double train_step(FieldModel& model, OptimState& opt, const TrainConfig& config, const Batch& source,
                         const Batch& target, Rng& rng, const TimeWindow& window = {}) {
  const RegressionBatch b = make_regression_batch(config, source, target, rng, window);
  LossAndGrad lg = loss_and_grad(model, b.t, b.x, b.u, b.weights);
  optimizer_step(model, opt, lg.grads);
  return lg.loss;
}

/// A segment of the time axis with its own endpoint distributions.
struct TrainLeg {
  Sampler source;
  Sampler target;
  Batch val_source;
  Batch val_target;
  TimeWindow window;
};

struct HistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double elapsed_s = 0.0;
};

struct TrainResult {
  FieldModel model;
  std::vector<HistoryRow> history;
  double initial_val_loss = std::numeric_limits<double>::quiet_NaN();
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  std::size_t failed_steps = 0;
  std::string stop_reason;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Mean CFM loss over the validation sets, chunked like training minibatches.
/// The randomness is a fixed function of `seed`, so repeated calls agree.
inline double validation_loss(const FieldModel& model, const TrainConfig& config, const std::vector<TrainLeg>& legs,
                              std::uint64_t seed) {
  Rng rng = Rng(seed).split("validation");
  double total = 0.0;
  std::size_t rows = 0;
  for (const TrainLeg& leg : legs) {
    const std::size_t n = std::min(leg.val_source.size(), leg.val_target.size());
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      const RegressionBatch b = make_regression_batch(config, detail::slice(leg.val_source, begin, end),
                                                      detail::slice(leg.val_target, begin, end), rng, leg.window);
      total += regression_loss(model, b) * static_cast<double>(end - begin);
      rows += end - begin;
    }
  }
  if (rows == 0) throw InvalidInput("validation sets are empty");
  return total / static_cast<double>(rows);
}

/// Trains one model across all legs (steps cycle through the legs), with early
/// stopping on the validation loss. Returns the best-validation model.
inline TrainResult train(const TrainConfig& config, const std::vector<TrainLeg>& legs) {
  validate(config);
  if (legs.empty()) throw InvalidInput("no training legs");
  const std::size_t d = legs.front().val_source.dim();
  if (d == 0) throw InvalidInput("validation set defines the dimension and must not be empty");

  const auto started = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count(); };

  TrainResult result;
  result.model = init_model(d, config.hidden, config.seed);
  if (config.max_epochs == 0) {
    result.stop_reason = "max_epochs";
    return result;
  }
  OptimState opt = make_optimizer(result.model, config.optimizer);
  Rng root(config.seed);
  Rng data_rng = root.split("data");
  Rng step_rng = root.split("step");
  const bool validating = config.val_interval > 0;
  if (validating) result.initial_val_loss = validation_loss(result.model, config, legs, config.seed);

  double best = std::numeric_limits<double>::infinity();
  FieldModel best_model = result.model;
  std::size_t bad_checks = 0;
  double epoch_loss_sum = 0.0;
  std::size_t epoch_loss_count = 0;
  const std::size_t steps = config.epoch_steps();

  auto check = [&](std::size_t epoch) {
    const double val = validation_loss(result.model, config, legs, config.seed);
    const double train_loss = epoch_loss_count ? epoch_loss_sum / static_cast<double>(epoch_loss_count)
                                               : std::numeric_limits<double>::quiet_NaN();
    result.history.push_back({epoch, train_loss, val, elapsed()});
    if (val < best) {
      best = val;
      best_model = result.model;
      bad_checks = 0;
    } else {
      ++bad_checks;
    }
  };

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    epoch_loss_sum = 0.0;
    epoch_loss_count = 0;
    std::size_t failures = 0;
    std::string last_failure;
    for (std::size_t s = 0; s < steps; ++s) {
      const TrainLeg& leg = legs[result.steps % legs.size()];
      const Batch source = leg.source(config.batch_size, data_rng);
      const Batch target = leg.target(config.batch_size, data_rng);
      ++result.steps;
      try {
        epoch_loss_sum += train_step(result.model, opt, config, source, target, step_rng, leg.window);
        ++epoch_loss_count;
      } catch (const ConvergenceError& e) {
        ++failures;
        ++result.failed_steps;
        last_failure = e.what();
      }
    }
    result.epochs_run = epoch;
    if (failures == steps) throw TrainingError("every step of epoch " + std::to_string(epoch) + " failed: " + last_failure);

    if (!validating) {
      result.history.push_back(
          {epoch, epoch_loss_sum / static_cast<double>(epoch_loss_count), std::numeric_limits<double>::quiet_NaN(), elapsed()});
    } else if (epoch % config.val_interval == 0) {
      check(epoch);
      if (bad_checks >= config.patience) {
        result.stop_reason = "early_stopping";
        break;
      }
    }
    if (config.wall_clock_limit_seconds && elapsed() >= *config.wall_clock_limit_seconds) {
      result.stop_reason = "wall_clock";
      break;
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "max_epochs";

  if (validating) {
    if (result.history.empty() || result.history.back().epoch != result.epochs_run) check(result.epochs_run);
    result.model = std::move(best_model);
    result.best_val_loss = best;
  }
  return result;
}

inline TrainResult train(const TrainConfig& config, Sampler source, Sampler target, Batch val_source,
                         Batch val_target) {
  std::vector<TrainLeg> legs(1);
  legs[0].source = std::move(source);
  legs[0].target = std::move(target);
  legs[0].val_source = std::move(val_source);
  legs[0].val_target = std::move(val_target);
  return train(config, legs);
}

/// Self-normalized importance weights of N(0, I) proposals against an unnormalized density.
inline Batch rwis_batch(const std::function<double(std::span<const double>)>& log_density, std::size_t d,
                        std::size_t batch_size, Rng& rng) {
  if (batch_size == 0 || d == 0) throw InvalidInput("rwis needs positive batch size and dimension");
  Matrix x = rng.normal_matrix(batch_size, d);
  Vector logw(batch_size);
  const double log_norm = -0.5 * static_cast<double>(d) * kLog2Pi;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const double lr = log_density(x.row(i));
    if (std::isnan(lr)) throw NumericError("log density is NaN at a proposal sample");
    logw[i] = lr - (log_norm - 0.5 * squared_norm(x.row(i)));
  }
  const double lse = log_sum_exp(logw);
  if (!std::isfinite(lse)) throw DegenerateError("all importance weights underflow");
  Vector w(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) w[i] = std::exp(logw[i] - lse);
  return Batch(std::move(x), std::move(w));
}

struct StepSchedule {
  double start = 0.1;
  double end = 0.0;
  /// Step size at iteration k of n: linear from start towards end.
  double at(std::size_t k, std::size_t n) const {
    return start + (end - start) * static_cast<double>(k) / static_cast<double>(n);
  }
};

struct MalaResult {
  Batch samples;
  double acceptance_rate = 0.0;
};

using LogDensity = std::function<double(std::span<const double>)>;
using LogDensityGrad = std::function<Vector(std::span<const double>)>;

inline Vector finite_difference_grad(const LogDensity& f, std::span<const double> x, double h = 1e-5) {
  Vector p(x.begin(), x.end()), g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    p[k] = x[k] + h;
    const double up = f(p);
    p[k] = x[k] - h;
    const double down = f(p);
    p[k] = x[k];
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Independent Metropolis-adjusted Langevin chains started from N(0, I).
/// Proposal x' = x + eps grad log p(x) + sqrt(2 eps) xi.
inline MalaResult mala_sample(const LogDensity& log_density, const LogDensityGrad& grad, std::size_t d,
                              std::size_t n_samples, std::size_t n_steps, const StepSchedule& schedule, Rng& rng) {
  if (n_samples == 0 || d == 0) throw InvalidInput("mala needs positive sample count and dimension");
  auto gradient = [&](std::span<const double> x) { return grad ? grad(x) : finite_difference_grad(log_density, x); };
  MalaResult out;
  out.samples = Batch(rng.normal_matrix(n_samples, d));
  std::size_t accepted = 0, proposed = 0;
  Vector prop(d);
  for (std::size_t c = 0; c < n_samples; ++c) {
    auto x = out.samples.points.row(c);
    double lp = log_density(x);
    if (!std::isfinite(lp)) throw NumericError("log density is not finite at a chain's initial state");
    Vector g = gradient(x);
    for (std::size_t k = 0; k < n_steps; ++k) {
      const double eps = schedule.at(k, n_steps);
      if (!(eps > 0.0)) continue;
      const double scale = std::sqrt(2.0 * eps);
      for (std::size_t j = 0; j < d; ++j) prop[j] = x[j] + eps * g[j] + scale * rng.normal();
      const double lp_new = log_density(prop);
      ++proposed;
      if (!std::isfinite(lp_new)) continue;
      const Vector g_new = gradient(prop);
      double fwd = 0.0, bwd = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double a = prop[j] - x[j] - eps * g[j];
        const double b = x[j] - prop[j] - eps * g_new[j];
        fwd += a * a;
        bwd += b * b;
      }
      const double log_alpha = lp_new - lp - (bwd - fwd) / (4.0 * eps);
      if (log_alpha >= 0.0 || std::log(rng.uniform()) < log_alpha) {
        std::copy(prop.begin(), prop.end(), x.begin());
        lp = lp_new;
        g = g_new;
        ++accepted;
      }
    }
  }
  out.acceptance_rate = proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
  return out;
}

struct LeaveOneOutPlan {
  struct Leg {
    Batch source;
    Batch target;
    double label_start = 0.0;
    double label_end = 0.0;
    TimeWindow window;
  };
  std::vector<Leg> legs;
  Batch eval_source;
  Batch eval_target;
  double eval_t_start = 0.0;
  double eval_t_end = 0.0;
};

/// Consecutive legs over the retained timepoints; the leg spanning the held-out
/// label couples its two neighbours. Labels are rescaled affinely onto [0, 1].
inline LeaveOneOutPlan leave_one_out_plan(const std::vector<TimedBatch>& timepoints, std::size_t holdout) {
  const std::size_t n = timepoints.size();
  if (n < 3) throw InvalidInput("leave-one-out needs at least three timepoints");
  if (holdout == 0 || holdout + 1 >= n) throw InvalidInput("held-out timepoint must be interior");
  for (std::size_t i = 1; i < n; ++i)
    if (!(timepoints[i].label > timepoints[i - 1].label)) throw InvalidInput("time labels must be strictly increasing");
  const double lo = timepoints.front().label, hi = timepoints.back().label;
  auto rescale = [&](double label) { return (label - lo) / (hi - lo); };

  LeaveOneOutPlan plan;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n; ++i)
    if (i != holdout) kept.push_back(i);
  for (std::size_t k = 0; k + 1 < kept.size(); ++k) {
    const TimedBatch& a = timepoints[kept[k]];
    const TimedBatch& b = timepoints[kept[k + 1]];
    plan.legs.push_back({a.batch, b.batch, a.label, b.label, {rescale(a.label), rescale(b.label)}});
  }
  plan.eval_source = timepoints[holdout - 1].batch;
  plan.eval_target = timepoints[holdout].batch;
  plan.eval_t_start = rescale(timepoints[holdout - 1].label);
  plan.eval_t_end = rescale(timepoints[holdout].label);
  return plan;
}

}  // namespace flowmatch
