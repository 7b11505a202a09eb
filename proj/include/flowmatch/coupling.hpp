#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "flowmatch/core.hpp"
#include "flowmatch/rng.hpp"

namespace flowmatch {

enum class CouplingKind { independent, exact_ot, entropic_ot };

/// Joint distribution over (source index, target index) pairs.
///
/// Three storage forms share this type: implicit product (independent), an
/// assignment (exact OT between uniform batches of equal size, where row i
/// carries mass 1/n on column assignment[i]), and a dense matrix of masses.
struct CouplingPlan {
  CouplingKind kind = CouplingKind::independent;
  Matrix masses;
  std::vector<std::size_t> assignment;
  Vector source_weights;
  Vector target_weights;
  Batch source_points;
  Batch target_points;
  double cost = 0.0;
  std::optional<double> epsilon;

  std::size_t rows() const noexcept { return source_weights.size(); }
  std::size_t cols() const noexcept { return target_weights.size(); }
  bool is_assignment() const noexcept { return !assignment.empty(); }

  double mass(std::size_t i, std::size_t j) const noexcept {
    if (is_assignment()) return assignment[i] == j ? source_weights[i] : 0.0;
    if (kind == CouplingKind::independent) return source_weights[i] * target_weights[j];
    return masses(i, j);
  }

  Matrix dense() const {
    Matrix m(rows(), cols());
    for (std::size_t i = 0; i < rows(); ++i)
      for (std::size_t j = 0; j < cols(); ++j) m(i, j) = mass(i, j);
    return m;
  }
};

/// Largest absolute deviation of the plan's row/column sums from its marginals.
inline double marginal_violation(const CouplingPlan& plan) {
  double worst = 0.0;
  Vector col(plan.cols(), 0.0);
  for (std::size_t i = 0; i < plan.rows(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < plan.cols(); ++j) {
      const double m = plan.mass(i, j);
      row += m;
      col[j] += m;
    }
    worst = std::max(worst, std::abs(row - plan.source_weights[i]));
  }
  for (std::size_t j = 0; j < plan.cols(); ++j) worst = std::max(worst, std::abs(col[j] - plan.target_weights[j]));
  return worst;
}

namespace detail {

inline void check_ot_inputs(const Batch& x0, const Batch& x1) {
  if (x0.size() == 0 || x1.size() == 0) throw InvalidInput("optimal transport requires non-empty batches");
  if (x0.dim() != x1.dim()) throw ShapeError("source and target dimensions differ");
}

inline Vector resolve_weights(const Vector& w, std::size_t n) {
  if (w.empty()) return Vector(n, 1.0 / static_cast<double>(n));
  check_weights(w, n, 1e-9);
  return w;
}

inline bool is_uniform(const Vector& w) {
  for (double v : w)
    if (v != w.front()) return false;
  return true;
}

inline Matrix squared_cost(const Matrix& x0, const Matrix& x1) {
  Matrix c(x0.rows(), x1.rows());
  for (std::size_t i = 0; i < x0.rows(); ++i)
    for (std::size_t j = 0; j < x1.rows(); ++j) c(i, j) = squared_distance(x0.row(i), x1.row(j));
  return c;
}

}  // namespace detail

/// Minimum-cost perfect assignment for an n x n cost given as cost(i, j).
///
/// Jonker-Volgenant shortest augmenting paths over reduced costs. Small
/// problems start from column reduction with reduction transfer; larger ones
/// take their column duals from an epsilon-scaling forward auction, which
/// leaves only short augmenting paths. Augmenting row reduction is skipped
/// because it stalls on near-tied geometric costs. Every choice follows a
/// fixed scan order, so the result is deterministic. Returns assignment[row] = column.
template <class Cost>
std::vector<std::size_t> solve_assignment(std::size_t n, Cost&& cost) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> x(n, none), y(n, none);
  std::vector<double> v(n, inf);

  std::vector<std::size_t> free_rows;
  if (n >= 32) {
    // Warm start: column duals from an epsilon-scaling forward auction. Every
    // row then starts free and the augmentation below makes the result exact.
    double cmax = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) cmax = std::max(cmax, cost(i, j));
    std::fill(v.begin(), v.end(), 0.0);
    if (cmax > 0.0) {
      std::vector<double> price(n, 0.0);
      std::vector<std::size_t> owner(n);
      std::deque<std::size_t> queue;
      const double final_eps = cmax / (1e3 * static_cast<double>(n));
      for (double eps = cmax / 8.0;; eps = std::max(eps / 6.0, final_eps)) {
        std::fill(owner.begin(), owner.end(), none);
        for (std::size_t i = 0; i < n; ++i) queue.push_back(i);
        while (!queue.empty()) {
          const std::size_t i = queue.front();
          queue.pop_front();
          std::size_t j1 = 0;
          double w1 = inf, w2 = inf;
          for (std::size_t j = 0; j < n; ++j) {
            const double w = cost(i, j) + price[j];
            if (w < w2) {
              if (w < w1) {
                w2 = w1;
                w1 = w;
                j1 = j;
              } else {
                w2 = w;
              }
            }
          }
          price[j1] += (w2 - w1) + eps;
          if (owner[j1] != none) queue.push_back(owner[j1]);
          owner[j1] = i;
        }
        if (eps <= final_eps) break;
      }
      for (std::size_t j = 0; j < n; ++j) v[j] = -price[j];
    }
    free_rows.resize(n);
    std::iota(free_rows.begin(), free_rows.end(), 0);
  } else {
    // Column reduction.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double c = cost(i, j);
        if (c < v[j]) {
          v[j] = c;
          y[j] = i;
        }
      }
    std::vector<char> unique(n, 1);
    for (std::size_t j = n; j-- > 0;) {
      const std::size_t i = y[j];
      if (x[i] == none) {
        x[i] = j;
      } else {
        unique[i] = 0;
        y[j] = none;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (x[i] == none) {
        free_rows.push_back(i);
      } else if (unique[i] && n > 1) {
        // Reduction transfer.
        const std::size_t j = x[i];
        double m = inf;
        for (std::size_t j2 = 0; j2 < n; ++j2)
          if (j2 != j) m = std::min(m, cost(i, j2) - v[j2]);
        v[j] -= m;
      }
    }
  }

  // Shortest augmenting paths. cols[0, lo) are settled, cols[lo, hi) hold the
  // current minimum distance and wait to be scanned, cols[hi, n) are unreached.
  std::vector<std::size_t> cols(n), pred(n);
  std::vector<double> d(n);
  for (const std::size_t start : free_rows) {
    for (std::size_t j = 0; j < n; ++j) {
      cols[j] = j;
      pred[j] = start;
      d[j] = cost(start, j) - v[j];
    }
    std::size_t lo = 0, hi = 0, n_ready = 0, final_j = none;
    double mind = 0.0;
    while (final_j == none) {
      if (lo == hi) {
        n_ready = lo;
        hi = lo + 1;
        mind = d[cols[lo]];
        for (std::size_t k = lo + 1; k < n; ++k) {
          const std::size_t j = cols[k];
          if (d[j] <= mind) {
            if (d[j] < mind) {
              hi = lo;
              mind = d[j];
            }
            cols[k] = cols[hi];
            cols[hi++] = j;
          }
        }
        for (std::size_t k = lo; k < hi; ++k)
          if (y[cols[k]] == none) {
            final_j = cols[k];
            break;
          }
        if (final_j != none) break;
      }
      while (lo != hi && final_j == none) {
        const std::size_t j0 = cols[lo++];
        const std::size_t i = y[j0];
        const double h = cost(i, j0) - v[j0] - mind;
        for (std::size_t k = hi; k < n; ++k) {
          const std::size_t j = cols[k];
          const double reduced = cost(i, j) - v[j] - h;
          if (reduced < d[j]) {
            d[j] = reduced;
            pred[j] = i;
            if (reduced == mind) {
              if (y[j] == none) {
                final_j = j;
                break;
              }
              cols[k] = cols[hi];
              cols[hi++] = j;
            }
          }
        }
      }
    }
    for (std::size_t k = 0; k < n_ready; ++k) {
      const std::size_t j = cols[k];
      v[j] += d[j] - mind;
    }
    std::size_t j = final_j, i = none;
    while (i != start) {
      i = pred[j];
      y[j] = i;
      std::swap(j, x[i]);
    }
  }
  return x;
}

/// Exact transportation problem with arbitrary marginals.
///
/// Successive shortest paths on the complete bipartite graph with Dijkstra over
/// reduced costs. Each augmentation saturates a supply, a demand, or a reverse
/// arc, so the loop ends after a small multiple of n + m iterations in practice.
inline Matrix solve_transport(const Vector& a, const Vector& b, const Matrix& cost) {
  const std::size_t n = a.size(), m = b.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  constexpr double tiny = 1e-15;
  Matrix flow(n, m);
  Vector supply = a, demand = b;
  Vector pot_src(n, 0.0), pot_snk(m, 0.0);
  // Initial potentials make every forward reduced cost nonnegative.
  for (std::size_t j = 0; j < m; ++j) {
    double best = inf;
    for (std::size_t i = 0; i < n; ++i) best = std::min(best, cost(i, j));
    pot_snk[j] = best;
  }

  Vector dist(n + m);
  std::vector<std::int64_t> parent(n + m);
  std::vector<char> done(n + m);

  // Pushes the bottleneck amount along the parent chain ending at sink node `target`.
  auto augment = [&](const std::vector<std::int64_t>& par, std::size_t target) {
    double push = demand[target - n];
    std::size_t v = target;
    while (par[v] >= 0) {
      const auto pv = static_cast<std::size_t>(par[v]);
      if (pv >= n) push = std::min(push, flow(v, pv - n));
      v = pv;
    }
    push = std::min(push, supply[v]);
    supply[v] -= push;
    demand[target - n] -= push;
    v = target;
    while (par[v] >= 0) {
      const auto pv = static_cast<std::size_t>(par[v]);
      if (pv < n) {
        flow(pv, v - n) += push;
      } else {
        flow(v, pv - n) -= push;
        if (flow(v, pv - n) < tiny) flow(v, pv - n) = 0.0;
      }
      v = pv;
    }
  };
  const std::size_t max_rounds = 64 * (n + m) * (n + m) + 1000;
  for (std::size_t round = 0;; ++round) {
    double remaining = 0.0;
    for (double s : supply) remaining += s;
    if (remaining <= 1e-14) break;
    if (round > max_rounds) throw ConvergenceError("transport solver exceeded its augmentation budget", remaining);

    std::fill(dist.begin(), dist.end(), inf);
    std::fill(parent.begin(), parent.end(), -1);
    std::fill(done.begin(), done.end(), 0);
    for (std::size_t i = 0; i < n; ++i)
      if (supply[i] > tiny) dist[i] = 0.0;

    std::int64_t target = -1;
    for (;;) {
      std::size_t best = n + m;
      double best_d = inf;
      for (std::size_t v = 0; v < n + m; ++v)
        if (!done[v] && dist[v] < best_d) {
          best_d = dist[v];
          best = v;
        }
      if (best == n + m) break;
      done[best] = 1;
      if (best >= n) {
        const std::size_t j = best - n;
        if (demand[j] > tiny) {
          target = static_cast<std::int64_t>(best);
          break;
        }
        for (std::size_t i = 0; i < n; ++i) {
          if (done[i] || flow(i, j) <= 0.0) continue;
          const double rc = std::max(0.0, -cost(i, j) + pot_snk[j] - pot_src[i]);
          if (best_d + rc < dist[i]) {
            dist[i] = best_d + rc;
            parent[i] = static_cast<std::int64_t>(best);
          }
        }
      } else {
        const std::size_t i = best;
        for (std::size_t j = 0; j < m; ++j) {
          if (done[n + j]) continue;
          const double rc = std::max(0.0, cost(i, j) + pot_src[i] - pot_snk[j]);
          if (best_d + rc < dist[n + j]) {
            dist[n + j] = best_d + rc;
            parent[n + j] = static_cast<std::int64_t>(i);
          }
        }
      }
    }
    if (target < 0) throw ConvergenceError("transport problem infeasible: marginals do not balance", remaining);

    const double dt = dist[static_cast<std::size_t>(target)];
    for (std::size_t i = 0; i < n; ++i) pot_src[i] += std::min(dist[i], dt);
    for (std::size_t j = 0; j < m; ++j) pot_snk[j] += std::min(dist[n + j], dt);

    augment(parent, static_cast<std::size_t>(target));

  }
  return flow;
}

/// Minimizes sum_ij pi_ij ||x0_i - x1_j||^2 over couplings with marginals (a, b).
/// Empty weight vectors mean uniform. Uniform equal-size inputs give an assignment plan.
inline CouplingPlan exact_ot_plan(const Batch& x0, const Batch& x1, const Vector& a = {}, const Vector& b = {}) {
  detail::check_ot_inputs(x0, x1);
  CouplingPlan plan;
  plan.kind = CouplingKind::exact_ot;
  plan.source_weights = detail::resolve_weights(a.empty() ? x0.weights : a, x0.size());
  plan.target_weights = detail::resolve_weights(b.empty() ? x1.weights : b, x1.size());
  plan.source_points = x0;
  plan.target_points = x1;

  const std::size_t n = x0.size(), m = x1.size();
  if (n == m && detail::is_uniform(plan.source_weights) && detail::is_uniform(plan.target_weights)) {
    const Matrix& p0 = x0.points;
    const Matrix& p1 = x1.points;
    if (n <= 2048) {
      const Matrix c = detail::squared_cost(p0, p1);
      plan.assignment = solve_assignment(n, [&](std::size_t i, std::size_t j) { return c(i, j); });
    } else {
      plan.assignment =
          solve_assignment(n, [&](std::size_t i, std::size_t j) { return squared_distance(p0.row(i), p1.row(j)); });
    }
    // Uniform weights: every matched pair carries 1/n.
    std::fill(plan.source_weights.begin(), plan.source_weights.end(), 1.0 / static_cast<double>(n));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += squared_distance(p0.row(i), p1.row(plan.assignment[i]));
    plan.cost = total / static_cast<double>(n);
    return plan;
  }

  const Matrix c = detail::squared_cost(x0.points, x1.points);
  plan.masses = solve_transport(plan.source_weights, plan.target_weights, c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) total += plan.masses(i, j) * c(i, j);
  plan.cost = total;
  return plan;
}

/// Product coupling a b^T.
inline CouplingPlan independent_plan(const Batch& x0, const Batch& x1, const Vector& a = {}, const Vector& b = {}) {
  detail::check_ot_inputs(x0, x1);
  CouplingPlan plan;
  plan.kind = CouplingKind::independent;
  plan.source_weights = detail::resolve_weights(a.empty() ? x0.weights : a, x0.size());
  plan.target_weights = detail::resolve_weights(b.empty() ? x1.weights : b, x1.size());
  plan.source_points = x0;
  plan.target_points = x1;
  double total = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i)
    for (std::size_t j = 0; j < x1.size(); ++j)
      total += plan.source_weights[i] * plan.target_weights[j] * squared_distance(x0.points.row(i), x1.points.row(j));
  plan.cost = total;
  return plan;
}

struct SinkhornOptions {
  std::size_t max_iters = 10000;
  double tol = 1e-8;
  /// Newton steps on the dual when the scaling iterations stall; 0 disables.
  std::size_t newton_iters = 30;
};

namespace detail {

/// Plan exp((f_i + g_j - c_ij) / eps) and its largest marginal error.
inline double dual_plan(const Matrix& c, const Vector& a, const Vector& b, double eps, const Vector& f, const Vector& g,
                        Matrix& plan, Vector& rows, Vector& cols) {
  const std::size_t n = f.size(), m = g.size();
  std::fill(rows.begin(), rows.end(), 0.0);
  std::fill(cols.begin(), cols.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double p = std::exp((f[i] + g[j] - c(i, j)) / eps);
      plan(i, j) = p;
      rows[i] += p;
      cols[j] += p;
    }
  double err = 0.0;
  for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(rows[i] - a[i]));
  for (std::size_t j = 0; j < m; ++j) err = std::max(err, std::abs(cols[j] - b[j]));
  return std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
}

/// Damped Newton on the entropic dual. Scaling iterations crawl when the kernel
/// splits into weakly coupled blocks; Newton moves mass between them directly.
/// The last g is pinned to remove the constant shift.
inline void newton_polish(const Matrix& c, const Vector& a, const Vector& b, double eps, Vector& f, Vector& g,
                          std::size_t iters, double tol) {
  const std::size_t n = f.size(), m = g.size(), dim = n + m - 1;
  Matrix plan(n, m);
  Vector rows(n), cols(m);
  double err = dual_plan(c, a, b, eps, f, g, plan, rows, cols);
  for (std::size_t k = 0; k < iters && err > tol; ++k) {
    // The Hessian with one potential pinned is symmetric positive definite, but
    // nearly singular across weakly coupled blocks; a small ridge keeps the
    // factorization alive and the line search picks the step length.
    double ridge = 0.0;
    for (double r : rows) ridge = std::max(ridge, r);
    ridge *= 1e-10;
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    Eigen::VectorXd rhs(static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      h(ii, ii) = rows[i] + ridge;
      rhs(ii) = eps * (a[i] - rows[i]);
      for (std::size_t j = 0; j + 1 < m; ++j) {
        const auto jj = static_cast<Eigen::Index>(n + j);
        h(ii, jj) = plan(i, j);
        h(jj, ii) = plan(i, j);
      }
    }
    for (std::size_t j = 0; j + 1 < m; ++j) {
      const auto jj = static_cast<Eigen::Index>(n + j);
      h(jj, jj) = cols[j] + ridge;
      rhs(jj) = eps * (b[j] - cols[j]);
    }
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    if (ldlt.info() != Eigen::Success) return;
    const Eigen::VectorXd step = ldlt.solve(rhs);

    bool moved = false;
    Vector tf(n), tg(m);
    for (double scale = 1.0; scale > 1e-12; scale *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) tf[i] = f[i] + scale * step(static_cast<Eigen::Index>(i));
      for (std::size_t j = 0; j < m; ++j) tg[j] = g[j] + (j + 1 < m ? scale * step(static_cast<Eigen::Index>(n + j)) : 0.0);
      const double trial = dual_plan(c, a, b, eps, tf, tg, plan, rows, cols);
      if (trial < err) {
        f = tf;
        g = tg;
        err = trial;
        moved = true;
        break;
      }
    }
    if (!moved) return;
  }
}

}  // namespace detail

/// Entropic OT: argmin <pi, C> + epsilon * sum pi log pi over couplings of (a, b),
/// with squared Euclidean C.
///
/// Scaling iterations run on a kernel stabilized by absorbed dual potentials;
/// whenever the scalings grow large (or a kernel row underflows) they are folded
/// into the potentials with an exact log-sum-exp update, which keeps the solver
/// usable for epsilon far below the cost scale.
inline CouplingPlan sinkhorn_plan(const Batch& x0, const Batch& x1, const Vector& a, const Vector& b, double epsilon,
                                  const SinkhornOptions& options = {}) {
  detail::check_ot_inputs(x0, x1);
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw InvalidInput("sinkhorn epsilon must be positive");
  CouplingPlan plan;
  plan.kind = CouplingKind::entropic_ot;
  plan.epsilon = epsilon;
  plan.source_weights = detail::resolve_weights(a.empty() ? x0.weights : a, x0.size());
  plan.target_weights = detail::resolve_weights(b.empty() ? x1.weights : b, x1.size());
  plan.source_points = x0;
  plan.target_points = x1;
  const Vector& wa = plan.source_weights;
  const Vector& wb = plan.target_weights;
  const std::size_t n = x0.size(), m = x1.size();
  const Matrix c = detail::squared_cost(x0.points, x1.points);

  Vector f(n), g(m);
  for (std::size_t i = 0; i < n; ++i) {
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) lo = std::min(lo, c(i, j));
    f[i] = lo;
  }
  for (std::size_t j = 0; j < m; ++j) {
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) lo = std::min(lo, c(i, j) - f[i]);
    g[j] = lo;
  }

  // Potentials live in cost units, so they warm-start across the epsilon schedule.
  double eps = epsilon;
  Matrix kernel(n, m);
  auto rebuild_kernel = [&] {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) kernel(i, j) = std::exp((f[i] + g[j] - c(i, j)) / eps);
  };
  // Exact log-domain half steps, used to re-anchor the potentials.
  Vector scratch(std::max(n, m));
  auto log_update_f = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) scratch[j] = (g[j] - c(i, j)) / eps;
      f[i] = eps * std::log(wa[i]) - eps * log_sum_exp(std::span<const double>(scratch.data(), m));
    }
  };
  auto log_update_g = [&] {
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < n; ++i) scratch[i] = (f[i] - c(i, j)) / eps;
      g[j] = eps * std::log(wb[j]) - eps * log_sum_exp(std::span<const double>(scratch.data(), n));
    }
  };

  Vector u(n, 1.0), v(m, 1.0), kv(n), ktu(m);
  auto absorb = [&] {
    for (std::size_t i = 0; i < n; ++i) f[i] += eps * std::log(u[i]);
    for (std::size_t j = 0; j < m; ++j) g[j] += eps * std::log(v[j]);
    std::fill(u.begin(), u.end(), 1.0);
    std::fill(v.begin(), v.end(), 1.0);
    rebuild_kernel();
  };
  auto reanchor = [&] {
    log_update_f();
    log_update_g();
    std::fill(u.begin(), u.end(), 1.0);
    std::fill(v.begin(), v.end(), 1.0);
    rebuild_kernel();
  };

  constexpr double kAbsorbBound = 1e30;
  // Scaling iterations at the current eps until the row residual drops to tol.
  auto iterate = [&](double tol, std::size_t max_iters) {
    double violation = std::numeric_limits<double>::infinity();
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
      bool degenerate = false;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += kernel(i, j) * v[j];
        kv[i] = s;
        if (!(s > 0.0) || !std::isfinite(s)) degenerate = true;
      }
      if (degenerate) {
        reanchor();
        continue;
      }
      for (std::size_t i = 0; i < n; ++i) u[i] = wa[i] / kv[i];
      std::fill(ktu.begin(), ktu.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ktu[j] += kernel(i, j) * u[i];
      for (std::size_t j = 0; j < m; ++j) {
        if (!(ktu[j] > 0.0) || !std::isfinite(ktu[j])) degenerate = true;
      }
      if (degenerate) {
        reanchor();
        continue;
      }
      for (std::size_t j = 0; j < m; ++j) v[j] = wb[j] / ktu[j];

      // Columns match exactly after the v update; rows carry the residual.
      violation = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += kernel(i, j) * v[j];
        violation = std::max(violation, std::abs(u[i] * s - wa[i]));
      }
      if (violation <= tol) return violation;
      double extreme = 0.0;
      for (double x : u) extreme = std::max({extreme, x, 1.0 / x});
      for (double x : v) extreme = std::max({extreme, x, 1.0 / x});
      if (extreme > kAbsorbBound) absorb();
    }
    return violation;
  };

  // Coarse-to-fine schedule from the cost scale down to epsilon.
  double cost_scale = 0.0;
  for (double x : c.values()) cost_scale = std::max(cost_scale, x);
  std::vector<double> schedule;
  for (double e = cost_scale; e > 4.0 * epsilon; e /= 4.0) schedule.push_back(e);
  for (double e : schedule) {
    eps = e;
    rebuild_kernel();
    iterate(1e-3 / static_cast<double>(std::max(n, m)), 200);
    absorb();
  }
  eps = epsilon;
  reanchor();
  double violation = iterate(options.tol, options.max_iters);
  if (!(violation <= options.tol) && options.newton_iters > 0) {
    absorb();
    detail::newton_polish(c, wa, wb, eps, f, g, options.newton_iters, 0.1 * options.tol);
    rebuild_kernel();
    violation = iterate(options.tol, 10);
  }
  if (!(violation <= options.tol))
    throw ConvergenceError("sinkhorn did not reach the marginal tolerance (violation " + std::to_string(violation) + ")",
                           violation);

  plan.masses = Matrix(n, m);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double p = u[i] * kernel(i, j) * v[j];
      plan.masses(i, j) = p;
      total += p * c(i, j);
    }
  plan.cost = total;
  return plan;
}

/// Inverse-CDF sampler over a finite set of nonnegative masses.
class Categorical {
 public:
  Categorical() = default;
  explicit Categorical(std::span<const double> masses) {
    cdf_.reserve(masses.size());
    double acc = 0.0;
    for (double m : masses) {
      acc += m;
      cdf_.push_back(acc);
    }
    if (!(acc > 0.0)) throw InvalidInput("categorical distribution has no mass");
  }
  std::size_t operator()(Rng& rng) const {
    const double r = rng.uniform() * cdf_.back();
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), r);
    auto idx = static_cast<std::size_t>(it - cdf_.begin());
    if (idx >= cdf_.size()) idx = cdf_.size() - 1;
    return idx;
  }
  std::size_t size() const noexcept { return cdf_.size(); }

 private:
  Vector cdf_;
};

struct PairSample {
  Matrix x0;
  Matrix x1;
  std::vector<std::size_t> source_index;
  std::vector<std::size_t> target_index;
};

/// Draws `count` i.i.d. index pairs from the plan's joint distribution.
inline PairSample sample_pairs(const CouplingPlan& plan, std::size_t count, Rng& rng) {
  if (count == 0) throw InvalidInput("sample_pairs needs count >= 1");
  if (plan.rows() == 0 || plan.cols() == 0) throw InvalidInput("empty coupling plan");
  PairSample out;
  out.source_index.resize(count);
  out.target_index.resize(count);
  if (plan.is_assignment()) {
    const Categorical rows(plan.source_weights);
    for (std::size_t k = 0; k < count; ++k) {
      out.source_index[k] = rows(rng);
      out.target_index[k] = plan.assignment[out.source_index[k]];
    }
  } else if (plan.kind == CouplingKind::independent) {
    const Categorical rows(plan.source_weights), cols(plan.target_weights);
    for (std::size_t k = 0; k < count; ++k) {
      out.source_index[k] = rows(rng);
      out.target_index[k] = cols(rng);
    }
  } else {
    const Categorical joint(plan.masses.values());
    const std::size_t m = plan.cols();
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t flat = joint(rng);
      out.source_index[k] = flat / m;
      out.target_index[k] = flat % m;
    }
  }
  const std::size_t d = plan.source_points.dim();
  out.x0 = Matrix(count, d);
  out.x1 = Matrix(count, d);
  for (std::size_t k = 0; k < count; ++k) {
    const auto s = plan.source_points.points.row(out.source_index[k]);
    const auto t = plan.target_points.points.row(out.target_index[k]);
    std::copy(s.begin(), s.end(), out.x0.row(k).begin());
    std::copy(t.begin(), t.end(), out.x1.row(k).begin());
  }
  return out;
}

}  // namespace flowmatch
