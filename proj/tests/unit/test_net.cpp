#include <gtest/gtest.h>

#include "flowmatch/net.hpp"
#include "oracles.hpp"

using namespace flowmatch;

namespace {

double rel_error(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

struct Problem {
  FieldModel model;
  Vector t;
  Matrix x, u;
  Vector w;
};

Problem random_problem(std::uint64_t seed, std::size_t d, std::vector<std::size_t> hidden, std::size_t n, bool weighted) {
  Rng rng(seed);
  Problem p;
  p.model = init_model(d, hidden, seed);
  // Non-zero biases so every parameter block is exercised.
  for (auto& b : p.model.params.biases)
    for (double& v : b) v = 0.3 * rng.normal();
  p.t.resize(n);
  for (double& v : p.t) v = rng.uniform();
  p.x = oracle::random_points(n, d, rng);
  p.u = oracle::random_points(n, d, rng);
  if (weighted) {
    p.w.resize(n);
    double s = 0.0;
    for (double& v : p.w) s += (v = rng.uniform(0.1, 1.0));
    for (double& v : p.w) v /= s;
  }
  return p;
}

}  // namespace

TEST(Net, InitModelLayerDims) {
  EXPECT_EQ(init_model(2, {64, 64, 64}, 0).layer_dims, (std::vector<std::size_t>{3, 64, 64, 64, 2}));
  EXPECT_EQ(init_model(10, {128, 128, 128}, 1).layer_dims, (std::vector<std::size_t>{11, 128, 128, 128, 10}));
}

TEST(Net, InitModelIsDeterministicAndScaledByFanIn) {
  const FieldModel a = init_model(2, {4}, 7), b = init_model(2, {4}, 7);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, init_model(2, {4}, 8));
  for (std::size_t l = 0; l < a.layers(); ++l) {
    const double bound = std::sqrt(6.0 / static_cast<double>(a.layer_dims[l]));
    for (double w : a.params.weights[l].values()) EXPECT_LE(std::abs(w), bound);
    for (double v : a.params.biases[l]) EXPECT_EQ(v, 0.0);
  }
}

TEST(Net, InitModelRejectsBadWidths) {
  EXPECT_THROW(init_model(2, {4, 0}, 0), InvalidConfig);
  EXPECT_THROW(init_model(2, std::span<const std::size_t>{}, 0), InvalidConfig);
  EXPECT_THROW(init_model(0, {4}, 0), InvalidConfig);
}

TEST(Net, ZeroModelOutputsZero) {
  FieldModel m = init_model(3, {5, 5}, 1);
  m.params.set_flat(Vector(m.params.count(), 0.0));
  const Vector v = forward(m, 0.7, Vector{1.0, -2.0, 3.0});
  for (double x : v) EXPECT_EQ(x, 0.0);
}

TEST(Net, SeluConstantsAndZero) {
  EXPECT_EQ(selu::value(0.0), 0.0);
  EXPECT_DOUBLE_EQ(selu::kAlpha, 1.6732632423543772);
  EXPECT_DOUBLE_EQ(selu::kScale, 1.0507009873554805);
}

TEST(Net, ForwardMatchesIndependentEvaluation) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    FieldModel m = init_model(2, {8, 6}, static_cast<std::uint64_t>(trial));
    for (auto& b : m.params.biases)
      for (double& v : b) v = rng.normal();
    const Vector x{1.0, -1.0};
    const Vector got = forward(m, 0.3, x);
    const Vector want = oracle::mlp(m, 0.3, x);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(got[k], want[k], 1e-12);
  }
}

TEST(Net, BatchedForwardIsRowwise) {
  Rng rng(5);
  const FieldModel m = init_model(3, {7}, 2);
  const Matrix x = oracle::random_points(6, 3, rng);
  Vector t(6);
  for (double& v : t) v = rng.uniform();
  const Matrix out = forward(m, t, x);
  for (std::size_t i = 0; i < 6; ++i) {
    const Vector row(x.row(i).begin(), x.row(i).end());
    const Vector want = oracle::mlp(m, t[i], row);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(out(i, k), want[k], 1e-12);
  }
}

TEST(Net, ForwardRejectsWrongDimension) {
  const FieldModel m = init_model(2, {4}, 0);
  EXPECT_THROW(forward(m, 0.5, Vector{1.0, 2.0, 3.0}), ShapeError);
}

TEST(Net, LossZeroWhenTargetsEqualOutputs) {
  Problem p = random_problem(11, 2, {5}, 4, false);
  p.u = forward(p.model, p.t, p.x);
  const LossAndGrad lg = loss_and_grad(p.model, p.t, p.x, p.u);
  EXPECT_EQ(lg.loss, 0.0);
  EXPECT_EQ(global_norm(lg.grads), 0.0);
}

TEST(Net, SingleRowZeroModelLoss) {
  FieldModel m = init_model(2, {3}, 0);
  m.params.set_flat(Vector(m.params.count(), 0.0));
  const Vector t{0.5};
  const LossAndGrad lg = loss_and_grad(m, t, Matrix{{0.2, 0.4}}, Matrix{{1.0, 0.0}});
  EXPECT_DOUBLE_EQ(lg.loss, 1.0);
}

TEST(Net, LossRejectsMismatchedShapesAndNonFinite) {
  const FieldModel m = init_model(2, {3}, 0);
  const Vector t{0.1, 0.2};
  EXPECT_THROW(loss_and_grad(m, t, Matrix(2, 2), Matrix(3, 2)), ShapeError);
  Matrix bad(2, 2);
  bad(0, 0) = NAN;
  EXPECT_THROW(loss_and_grad(m, t, bad, Matrix(2, 2)), NumericError);
}

// Central finite differences on 20 random small models, weighted and unweighted.
TEST(Net, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t d = 1 + seed % 3;
    std::vector<std::size_t> hidden = seed % 2 ? std::vector<std::size_t>{4} : std::vector<std::size_t>{5, 3};
    Problem p = random_problem(100 + seed, d, hidden, 5, seed % 4 == 0);
    ASSERT_LE(p.model.params.count(), 200u);
    const LossAndGrad lg = loss_and_grad(p.model, p.t, p.x, p.u, p.w);
    const Vector theta = p.model.params.flat();
    const Vector grad = lg.grads.flat();
    const double h = 1e-6;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      FieldModel m = p.model;
      Vector th = theta;
      th[i] = theta[i] + h;
      m.params.set_flat(th);
      const double up = loss_and_grad(m, p.t, p.x, p.u, p.w).loss;
      th[i] = theta[i] - h;
      m.params.set_flat(th);
      const double down = loss_and_grad(m, p.t, p.x, p.u, p.w).loss;
      EXPECT_LE(rel_error(grad[i], (up - down) / (2 * h)), 1e-5) << "seed " << seed << " param " << i;
    }
  }
}

TEST(Net, LossIsNonNegative) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Problem p = random_problem(seed, 2, {6}, 8, seed % 2 == 0);
    EXPECT_GE(loss_and_grad(p.model, p.t, p.x, p.u, p.w).loss, 0.0);
  }
}

TEST(Net, AdamWZeroGradsOnlyDecay) {
  FieldModel m = init_model(2, {3}, 4);
  const Vector before = m.params.flat();
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  OptimState st = make_optimizer(m, cfg);
  optimizer_step(m, st, m.params.zeros_like());
  const Vector after = m.params.flat();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after[i], before[i] * (1.0 - 0.001), 1e-15);
  EXPECT_EQ(st.step_count, 1u);
}

TEST(Net, AdamFirstStepOnQuadratic) {
  // One parameter: a 1x1 output bias; f(w) = w^2 so grad = 2w.
  FieldModel m = init_model(1, {1}, 0);
  m.params.set_flat(Vector(m.params.count(), 0.0));
  m.params.biases.back()[0] = 1.0;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  OptimState st = make_optimizer(m, cfg);
  Parameters g = m.params.zeros_like();
  g.biases.back()[0] = 2.0;
  optimizer_step(m, st, g);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(m.params.biases.back()[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(m.params.biases.back()[0], 0.9, 1e-8);
}

TEST(Net, GradientClippingScalesBeforeMoments) {
  FieldModel m = init_model(2, {2}, 1);
  AdamWConfig cfg;
  cfg.grad_clip_norm = 1.0;
  OptimState st = make_optimizer(m, cfg);
  Parameters g = m.params.zeros_like();
  g.weights[0](0, 0) = 6.0;
  g.weights[0](0, 1) = 8.0;  // norm 10
  optimizer_step(m, st, g);
  EXPECT_NEAR(st.first_moment.weights[0](0, 0), 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(st.first_moment.weights[0](0, 1), 0.1 * 0.8, 1e-15);
  EXPECT_NEAR(st.second_moment.weights[0](0, 1), 0.001 * 0.64, 1e-15);
}

TEST(Net, OptimizerRejectsNonFiniteGrads) {
  FieldModel m = init_model(2, {2}, 1);
  OptimState st = make_optimizer(m, {});
  Parameters g = m.params.zeros_like();
  g.biases[0][0] = INFINITY;
  EXPECT_THROW(optimizer_step(m, st, g), NumericError);
}

TEST(Net, TrainingIsDeterministic) {
  auto run = [] {
    Problem p = random_problem(9, 2, {6, 6}, 16, false);
    OptimState st = make_optimizer(p.model, {});
    for (int k = 0; k < 25; ++k) optimizer_step(p.model, st, loss_and_grad(p.model, p.t, p.x, p.u).grads);
    return p.model;
  };
  EXPECT_EQ(run(), run());
}

TEST(Net, CheckpointRoundTripIsBitExact) {
  Problem p = random_problem(21, 3, {7, 5}, 1, false);
  const std::string text = checkpoint_string(p.model);
  const FieldModel back = model_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(back, p.model);
  EXPECT_EQ(checkpoint_string(back), text);
  const auto j = nlohmann::json::parse(text);
  EXPECT_EQ(j["activation"], "selu");
  EXPECT_EQ(j["layer_dims"].get<std::vector<std::size_t>>(), p.model.layer_dims);
}

TEST(Net, CheckpointRejectsInconsistentShapes) {
  auto j = to_json(init_model(2, {3}, 0));
  j["layer_dims"] = {3, 4, 2};
  EXPECT_ANY_THROW(model_from_json(j));
}
