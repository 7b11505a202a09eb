#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowmatch/core.hpp"
#include "flowmatch/rng.hpp"

namespace flowmatch {

enum class Activation { selu };

namespace selu {
inline constexpr double kAlpha = 1.6732632423543772;
inline constexpr double kScale = 1.0507009873554805;

inline double value(double z) noexcept { return z > 0.0 ? kScale * z : kScale * kAlpha * std::expm1(z); }
inline double derivative(double z) noexcept { return z > 0.0 ? kScale : kScale * kAlpha * std::exp(z); }
}  // namespace selu

/// Weights and biases of a dense network. weights[l] is (out x in), row-major.
struct Parameters {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  Parameters zeros_like() const {
    Parameters z;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      z.weights.emplace_back(weights[l].rows(), weights[l].cols());
      z.biases.emplace_back(biases[l].size(), 0.0);
    }
    return z;
  }

  /// Visits every scalar in a fixed order: layer by layer, weights then bias.
  template <class F>
  void for_each(F&& f) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      for (double& w : weights[l].values()) f(w);
      for (double& b : biases[l]) f(b);
    }
  }
  template <class F>
  void for_each(F&& f) const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      for (double w : weights[l].values()) f(w);
      for (double b : biases[l]) f(b);
    }
  }

  Vector flat() const {
    Vector out;
    out.reserve(count());
    for_each([&](double v) { out.push_back(v); });
    return out;
  }

  void set_flat(std::span<const double> values) {
    if (values.size() != count()) throw ShapeError("flat parameter vector has wrong length");
    std::size_t i = 0;
    for_each([&](double& v) { v = values[i++]; });
  }

  bool operator==(const Parameters&) const = default;
};

/// Time-conditioned vector field v(t, x): an MLP on the concatenation [x, t].
struct FieldModel {
  std::vector<std::size_t> layer_dims;
  Parameters params;
  Activation activation = Activation::selu;

  std::size_t dim() const noexcept { return layer_dims.empty() ? 0 : layer_dims.back(); }
  std::size_t layers() const noexcept { return params.weights.size(); }

  bool operator==(const FieldModel&) const = default;
};

inline void validate(const FieldModel& model) {
  const auto& dims = model.layer_dims;
  if (dims.size() < 2) throw InvalidConfig("model needs at least an input and an output layer");
  if (dims.front() != dims.back() + 1) throw InvalidConfig("input width must equal output width + 1");
  if (model.params.weights.size() != dims.size() - 1 || model.params.biases.size() != dims.size() - 1)
    throw ShapeError("parameter layer count does not match layer_dims");
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (dims[l] == 0) throw InvalidConfig("layer width must be positive");
    const auto& w = model.params.weights[l];
    if (w.rows() != dims[l + 1] || w.cols() != dims[l] || model.params.biases[l].size() != dims[l + 1])
      throw ShapeError("weight shape inconsistent with layer_dims at layer " + std::to_string(l));
  }
}

/// Builds a model with weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)) and zero biases.
inline FieldModel init_model(std::size_t d, std::span<const std::size_t> hidden, std::uint64_t seed) {
  if (d == 0) throw InvalidConfig("dimension must be at least 1");
  if (hidden.empty()) throw InvalidConfig("at least one hidden layer is required");
  for (auto h : hidden)
    if (h == 0) throw InvalidConfig("hidden widths must be positive");

  FieldModel model;
  model.layer_dims.push_back(d + 1);
  model.layer_dims.insert(model.layer_dims.end(), hidden.begin(), hidden.end());
  model.layer_dims.push_back(d);

  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < model.layer_dims.size(); ++l) {
    const std::size_t fan_in = model.layer_dims[l];
    const std::size_t fan_out = model.layer_dims[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Matrix w(fan_out, fan_in);
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    model.params.weights.push_back(std::move(w));
    model.params.biases.emplace_back(fan_out, 0.0);
  }
  return model;
}

inline FieldModel init_model(std::size_t d, std::initializer_list<std::size_t> hidden, std::uint64_t seed) {
  return init_model(d, std::span<const std::size_t>(hidden.begin(), hidden.size()), seed);
}

namespace detail {

// z = a * W^T + b for a (n x in), W (out x in).
inline void dense_forward(const Matrix& a, const Matrix& w, const Vector& b, Matrix& z) {
  const std::size_t n = a.rows(), in = w.cols(), out = w.rows();
  Matrix wt(in, out);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t k = 0; k < in; ++k) wt(k, o) = w(o, k);
  z = Matrix(n, out);
  for (std::size_t i = 0; i < n; ++i) {
    double* zi = z.data() + i * out;
    for (std::size_t o = 0; o < out; ++o) zi[o] = b[o];
    const double* ai = a.data() + i * in;
    for (std::size_t k = 0; k < in; ++k) {
      const double s = ai[k];
      const double* wk = wt.data() + k * out;
      for (std::size_t o = 0; o < out; ++o) zi[o] += s * wk[o];
    }
  }
}

inline Matrix network_input(std::span<const double> t, const Matrix& x) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix in(n, d + 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) in(i, k) = x(i, k);
    in(i, d) = t[i];
  }
  return in;
}

}  // namespace detail

/// Batched evaluation; row i is v(t[i], x.row(i)).
inline Matrix forward(const FieldModel& model, std::span<const double> t, const Matrix& x) {
  if (x.cols() != model.dim()) throw ShapeError("input dimension does not match model");
  if (t.size() != x.rows()) throw ShapeError("time vector length does not match batch");
  Matrix a = detail::network_input(t, x);
  Matrix z;
  const std::size_t L = model.layers();
  for (std::size_t l = 0; l < L; ++l) {
    detail::dense_forward(a, model.params.weights[l], model.params.biases[l], z);
    if (l + 1 < L)
      for (double& v : z.values()) v = selu::value(v);
    std::swap(a, z);
  }
  return a;
}

inline Matrix forward(const FieldModel& model, double t, const Matrix& x) {
  const Vector times(x.rows(), t);
  return forward(model, times, x);
}

inline Vector forward(const FieldModel& model, double t, std::span<const double> x) {
  Matrix m(1, x.size(), Vector(x.begin(), x.end()));
  return forward(model, t, m).values();
}

struct LossAndGrad {
  double loss = 0.0;
  Parameters grads;
};

/// Weighted squared-error regression loss sum_i w_i ||v(t_i, x_i) - u_i||^2 and its exact gradient.
/// Empty weights mean w_i = 1/n.
inline LossAndGrad loss_and_grad(const FieldModel& model, std::span<const double> t, const Matrix& x,
                                 const Matrix& targets, std::span<const double> weights = {}) {
  const std::size_t n = x.rows(), d = model.dim();
  if (x.cols() != d || targets.cols() != d) throw ShapeError("input/target dimension does not match model");
  if (targets.rows() != n || t.size() != n) throw ShapeError("row count mismatch between inputs and targets");
  if (!weights.empty() && weights.size() != n) throw ShapeError("weight count does not match rows");
  if (!all_finite(x.values()) || !all_finite(targets.values()) || !all_finite(t))
    throw NumericError("non-finite value in training inputs");
  if (!weights.empty() && !all_finite(weights)) throw NumericError("non-finite loss weight");

  const std::size_t L = model.layers();
  // acts[l] is the input to layer l; pre[l] its pre-activation output.
  std::vector<Matrix> acts(L + 1), pre(L);
  acts[0] = detail::network_input(t, x);
  for (std::size_t l = 0; l < L; ++l) {
    detail::dense_forward(acts[l], model.params.weights[l], model.params.biases[l], pre[l]);
    if (l + 1 < L) {
      acts[l + 1] = pre[l];
      for (double& v : acts[l + 1].values()) v = selu::value(v);
    } else {
      acts[l + 1] = pre[l];
    }
  }

  LossAndGrad result;
  result.grads = model.params.zeros_like();
  const Matrix& out = acts[L];
  Matrix delta(n, d);
  const double uniform = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights.empty() ? uniform : weights[i];
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double r = out(i, k) - targets(i, k);
      sq += r * r;
      delta(i, k) = 2.0 * w * r;
    }
    result.loss += w * sq;
  }

  for (std::size_t l = L; l-- > 0;) {
    const Matrix& w = model.params.weights[l];
    const Matrix& a = acts[l];
    Matrix& gw = result.grads.weights[l];
    Vector& gb = result.grads.biases[l];
    const std::size_t in = w.cols(), outw = w.rows();
    for (std::size_t i = 0; i < n; ++i) {
      const double* di = delta.data() + i * outw;
      const double* ai = a.data() + i * in;
      for (std::size_t o = 0; o < outw; ++o) {
        const double g = di[o];
        gb[o] += g;
        double* gwo = gw.data() + o * in;
        for (std::size_t k = 0; k < in; ++k) gwo[k] += g * ai[k];
      }
    }
    if (l == 0) break;
    Matrix prev(n, in);
    for (std::size_t i = 0; i < n; ++i) {
      const double* di = delta.data() + i * outw;
      double* pi = prev.data() + i * in;
      for (std::size_t o = 0; o < outw; ++o) {
        const double g = di[o];
        const double* wo = w.data() + o * in;
        for (std::size_t k = 0; k < in; ++k) pi[k] += g * wo[k];
      }
    }
    const Matrix& z = pre[l - 1];
    for (std::size_t j = 0; j < prev.size(); ++j) prev.values()[j] *= selu::derivative(z.values()[j]);
    delta = std::move(prev);
  }
  return result;
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  std::optional<double> grad_clip_norm;
};

struct OptimState {
  std::uint64_t step_count = 0;
  Parameters first_moment;
  Parameters second_moment;
  AdamWConfig config;
};

inline OptimState make_optimizer(const FieldModel& model, const AdamWConfig& config) {
  if (!(config.beta1 > 0.0 && config.beta1 < 1.0 && config.beta2 > 0.0 && config.beta2 < 1.0))
    throw InvalidConfig("Adam betas must lie in (0, 1)");
  if (!(config.lr > 0.0) || !(config.eps > 0.0) || config.weight_decay < 0.0)
    throw InvalidConfig("invalid optimizer hyperparameters");
  if (config.grad_clip_norm && !(*config.grad_clip_norm > 0.0))
    throw InvalidConfig("gradient clip norm must be positive");
  return OptimState{0, model.params.zeros_like(), model.params.zeros_like(), config};
}

inline double global_norm(const Parameters& p) {
  double s = 0.0;
  p.for_each([&](double v) { s += v * v; });
  return std::sqrt(s);
}

/// AdamW with decoupled weight decay and optional global-norm clipping.
inline void optimizer_step(FieldModel& model, OptimState& state, const Parameters& grads) {
  if (grads.count() != model.params.count() || state.first_moment.count() != model.params.count())
    throw ShapeError("gradient shape does not match model");
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient encountered in optimizer step");
  const auto& cfg = state.config;
  double scale = 1.0;
  if (cfg.grad_clip_norm && norm > *cfg.grad_clip_norm) scale = *cfg.grad_clip_norm / norm;

  state.step_count += 1;
  const double step = static_cast<double>(state.step_count);
  const double bias1 = 1.0 - std::pow(cfg.beta1, step);
  const double bias2 = 1.0 - std::pow(cfg.beta2, step);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;

  auto update = [&](std::span<double> p, std::span<const double> g, std::span<double> m, std::span<double> v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * scale;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bias1;
      const double vhat = v[i] / bias2;
      p[i] = p[i] * decay - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  };
  for (std::size_t l = 0; l < model.layers(); ++l) {
    update(model.params.weights[l].values(), grads.weights[l].values(), state.first_moment.weights[l].values(),
           state.second_moment.weights[l].values());
    update(model.params.biases[l], grads.biases[l], state.first_moment.biases[l], state.second_moment.biases[l]);
  }
}

// Checkpoint format:
// {"layer_dims":[...], "activation":"selu", "weights":[[row-major...]], "biases":[[...]]}

inline nlohmann::json to_json(const FieldModel& model) {
  nlohmann::json j;
  j["layer_dims"] = model.layer_dims;
  j["activation"] = "selu";
  j["weights"] = nlohmann::json::array();
  j["biases"] = nlohmann::json::array();
  for (std::size_t l = 0; l < model.layers(); ++l) {
    for (double v : model.params.weights[l].values())
      if (!std::isfinite(v)) throw NumericError("cannot serialize non-finite weight");
    j["weights"].push_back(model.params.weights[l].values());
    j["biases"].push_back(model.params.biases[l]);
  }
  return j;
}

inline FieldModel model_from_json(const nlohmann::json& j) {
  FieldModel model;
  try {
    model.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
    if (j.at("activation").get<std::string>() != "selu") throw InvalidConfig("unsupported activation");
    const auto& ws = j.at("weights");
    const auto& bs = j.at("biases");
    if (!ws.is_array() || !bs.is_array() || ws.size() + 1 != model.layer_dims.size() || bs.size() != ws.size())
      throw ShapeError("checkpoint layer count does not match layer_dims");
    for (std::size_t l = 0; l < ws.size(); ++l) {
      const std::size_t in = model.layer_dims[l], out = model.layer_dims[l + 1];
      auto w = ws[l].get<std::vector<double>>();
      if (w.size() != in * out) throw ShapeError("checkpoint weight size mismatch at layer " + std::to_string(l));
      model.params.weights.emplace_back(out, in, std::move(w));
      model.params.biases.push_back(bs[l].get<std::vector<double>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
  validate(model);
  return model;
}

inline std::string checkpoint_string(const FieldModel& model) { return to_json(model).dump() + "\n"; }

inline void save_checkpoint(const FieldModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << checkpoint_string(model);
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline FieldModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buffer.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  return model_from_json(j);
}

}  // namespace flowmatch
