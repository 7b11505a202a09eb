#pragma once

// Independent reference computations used as test oracles. They share no code
// with the library beyond the plain data containers.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "flowmatch/core.hpp"
#include "flowmatch/net.hpp"
#include "flowmatch/rng.hpp"

namespace oracle {

using flowmatch::Matrix;
using flowmatch::Vector;

/// Minimum over all permutations of (1/n) sum_i |a_i - b_p(i)|^2.
inline double brute_force_assignment(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.rows();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = INFINITY;
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < a.cols(); ++k) {
        const double d = a(i, k) - b(perm[i], k);
        c += d * d;
      }
    best = std::min(best, c / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline Matrix random_points(std::size_t n, std::size_t d, flowmatch::Rng& rng, double scale = 1.0) {
  Matrix m(n, d);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

inline double selu(double z) {
  return z > 0.0 ? 1.0507009873554805 * z : 1.0507009873554805 * 1.6732632423543772 * (std::exp(z) - 1.0);
}

/// Plain re-evaluation of the MLP: one sample at a time, explicit loops.
inline Vector mlp(const flowmatch::FieldModel& m, double t, const Vector& x) {
  Vector a = x;
  a.push_back(t);
  for (std::size_t l = 0; l < m.params.weights.size(); ++l) {
    const Matrix& w = m.params.weights[l];
    Vector z(w.rows());
    for (std::size_t o = 0; o < w.rows(); ++o) {
      double s = m.params.biases[l][o];
      for (std::size_t i = 0; i < w.cols(); ++i) s += w(o, i) * a[i];
      z[o] = s;
    }
    if (l + 1 < m.params.weights.size())
      for (double& v : z) v = selu(v);
    a = std::move(z);
  }
  return a;
}

/// Exact Jacobian trace of the MLP in x by forward-mode accumulation.
inline double mlp_divergence(const flowmatch::FieldModel& m, double t, const Vector& x) {
  const std::size_t d = x.size();
  double trace = 0.0;
  for (std::size_t e = 0; e < d; ++e) {
    Vector a = x;
    a.push_back(t);
    Vector da(d + 1, 0.0);
    da[e] = 1.0;
    for (std::size_t l = 0; l < m.params.weights.size(); ++l) {
      const Matrix& w = m.params.weights[l];
      Vector z(w.rows()), dz(w.rows());
      for (std::size_t o = 0; o < w.rows(); ++o) {
        double s = m.params.biases[l][o], ds = 0.0;
        for (std::size_t i = 0; i < w.cols(); ++i) {
          s += w(o, i) * a[i];
          ds += w(o, i) * da[i];
        }
        z[o] = s;
        dz[o] = ds;
      }
      if (l + 1 < m.params.weights.size()) {
        for (std::size_t o = 0; o < z.size(); ++o) {
          const double deriv = z[o] > 0.0 ? 1.0507009873554805 : 1.0507009873554805 * 1.6732632423543772 * std::exp(z[o]);
          dz[o] *= deriv;
          z[o] = selu(z[o]);
        }
      }
      a = std::move(z);
      da = std::move(dz);
    }
    trace += da[e];
  }
  return trace;
}

}  // namespace oracle
