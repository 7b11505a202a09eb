// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <ctime>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "../unit/oracles.hpp"
#include "flowmatch/flowmatch.hpp"

using namespace flowmatch;
namespace fs = std::filesystem;

namespace {

// Training budget per run. The full schedule (1000 epochs with early stopping)
// is too slow for ~35 runs on one core; 100 epochs of 20 steps is where the
// validation loss has flattened on these problems.
constexpr std::size_t kEpochs = 100;
constexpr std::size_t kValSize = 2000;
constexpr std::size_t kRefSize = 10000;
constexpr std::size_t kGenSize = 10000;
constexpr std::size_t kEulerW2Size = 5000;
constexpr int kSeeds = 5;

// Thresholds.
constexpr double kNpeOtMax = 0.10;
constexpr double kNpeRatioNormal = 1.5;
constexpr double kNpeRatioMoons = 5.0;
constexpr double kFitW2Max = 0.5;
constexpr double kBridgeErrorMax = 0.5;
constexpr double kOvRatio = 10.0;
constexpr double kLogZMax = 0.3;
constexpr double kEbmMinutes = 30.0;
constexpr double kRunMinutes = 15.0;
constexpr double kClosedFormTol = 1e-4;
constexpr double kContinuityTol = 1e-3;
constexpr double kAssignmentTol = 1e-10;
constexpr double kMarginalTol = 1e-8;
constexpr double kOuterProductTol = 1e-6;
constexpr double kGradRelTol = 1e-5;
constexpr double kStdRelTol = 0.02;

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt(x);
  return "[" + s + "]";
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
  const auto started = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << o.detail << " ("
            << fmt(seconds_since(started)) << " s)" << std::endl;
}

ExperimentConfig make_config(const std::string& algorithm, const std::string& source, const std::string& target,
                             std::uint64_t seed, const std::vector<std::string>& extra = {}) {
  boost::property_tree::ptree tree;
  std::vector<std::string> kv = {"algorithm=" + algorithm,
                                 "seed=" + std::to_string(seed),
                                 "source.kind=" + source,
                                 "target.kind=" + target,
                                 "path.sigma=0.1",
                                 "train.batch_size=512",
                                 "train.hidden=64,64,64",
                                 "train.max_epochs=" + std::to_string(kEpochs),
                                 "train.val_size=" + std::to_string(kValSize)};
  kv.insert(kv.end(), extra.begin(), extra.end());
  apply_overrides(tree, kv);
  ExperimentConfig c = experiment_from_tree(tree);
  validate(c);
  return c;
}

struct Trained {
  ExperimentConfig config;
  Problem problem;
  FieldModel model;
  double seconds = 0.0;
};

Trained train_run(const ExperimentConfig& c) {
  const auto started = std::chrono::steady_clock::now();
  Trained t{c, build_problem(c), {}, 0.0};
  t.model = train(c.train, t.problem.legs).model;
  t.seconds = seconds_since(started);
  return t;
}

// Exact-OT W2^2 between fresh 10^4-point samples of the two marginals.
double reference_w2(const std::string& source, const std::string& target) {
  const Rng root = Rng(2024).split("reference").split(source + "->" + target);
  Rng a = root.split("source"), b = root.split("target");
  DatasetSpec from, to;
  from.kind = parse_dataset_kind(source);
  to.kind = parse_dataset_kind(target);
  const Batch x = sample_dataset(from, kRefSize, a);
  const Batch y = sample_dataset(to, kRefSize, b);
  return w2_squared(x, y);
}

Matrix eval_source(const Trained& t, std::size_t n) {
  Rng rng = Rng(t.config.train.seed).split("acceptance.source");
  return t.problem.source.draw(n, rng).points;
}

Batch eval_target(const Trained& t, std::size_t n) {
  Rng rng = Rng(t.config.train.seed).split("acceptance.target");
  return t.problem.target.draw(n, rng);
}

double npe_of(const Trained& t, double w2_ref) {
  IntegratorSettings s;
  s.method = Method::rk4;
  s.n_steps = 100;
  return path_energy_and_npe(t.model, eval_source(t, kGenSize), w2_ref, s).npe;
}

double generated_w2(const Trained& t, const IntegratorSettings& s, std::size_t n) {
  const Trajectory traj = integrate(model_field(t.model), eval_source(t, n), 0.0, 1.0, s);
  return w2_squared(Batch(traj.final_state()), eval_target(t, n));
}

struct Pair {
  std::vector<Trained> ot, icfm;
  std::vector<double> npe_ot, npe_icfm;
  double slowest_run = 0.0;
};

Pair train_pair(const std::string& source, const std::string& target, double w2_ref) {
  Pair p;
  for (int seed = 0; seed < kSeeds; ++seed) {
    p.ot.push_back(train_run(make_config("otcfm", source, target, seed)));
    p.icfm.push_back(train_run(make_config("icfm", source, target, seed)));
    p.npe_ot.push_back(npe_of(p.ot.back(), w2_ref));
    p.npe_icfm.push_back(npe_of(p.icfm.back(), w2_ref));
    p.slowest_run = std::max({p.slowest_run, p.ot.back().seconds, p.icfm.back().seconds});
  }
  return p;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(FLOWMATCH_CLI) + " " + args + " > /dev/null").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Closed-form flow of the fm_gaussian conditional field: x -> (1 - (1 - sigma) t) x + t x1.
Outcome closed_form_map() {
  Rng rng(8);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2;
    const double sigma = rng.uniform(0.01, 0.99);
    const Condition z{{}, {2.0 * rng.normal(), 2.0 * rng.normal()}};
    const Matrix x0{{rng.normal(), rng.normal()}};
    const PathSpec spec{PathVariant::fm_gaussian, sigma};
    const Field field = [&](double t, const Matrix& x) {
      Matrix out(x.rows(), d);
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const Vector u = cond_field(spec, z, t, x.row(i));
        std::copy(u.begin(), u.end(), out.row(i).begin());
      }
      return out;
    };
    AdaptiveOptions opt;
    opt.atol = opt.rtol = 1e-6;
    RecordOptions rec;
    rec.grid_points = 11;
    const Trajectory traj = integrate_dopri5(field, x0, 0.0, 1.0, opt, rec);
    for (std::size_t k = 0; k < traj.times.size(); ++k) {
      const double t = traj.times[k];
      for (std::size_t j = 0; j < d; ++j) {
        const double want = (1.0 - (1.0 - sigma) * t) * x0(0, j) + t * z.x1[j];
        worst = std::max(worst, std::abs(traj.states[k](0, j) - want));
      }
    }
  }
  return {worst <= kClosedFormTol, "max sup-norm error " + fmt(worst) + " over 100 cases"};
}

// dp/dt + d(p u)/dx on a 1D mixture of I-CFM conditional paths.
Outcome continuity_residual() {
  Rng rng(9);
  const PathSpec spec{PathVariant::icfm, 0.3};
  std::vector<WeightedCondition> support;
  const double masses[] = {0.2, 0.5, 0.3};
  for (double m : masses) support.push_back({{{rng.normal()}, {2.0 + rng.normal()}}, m});
  auto density = [&](double t, double x) {
    double p = 0.0;
    for (const auto& wc : support) {
      const MeanStd ms = mean_std(spec, wc.z, t);
      p += wc.mass * std::exp(-0.5 * (x - ms.mu[0]) * (x - ms.mu[0]) / (ms.std * ms.std)) /
           (std::sqrt(2.0 * M_PI) * ms.std);
    }
    return p;
  };
  auto flux = [&](double t, double x) {
    return density(t, x) * marginal_field_oracle(spec, support, t, Vector{x})[0];
  };
  const double h = 1e-5;
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const double t = rng.uniform(0.05, 0.95);
    const double x = rng.uniform(-1.5, 3.5);
    const double r = (density(t + h, x) - density(t - h, x)) / (2 * h) + (flux(t, x + h) - flux(t, x - h)) / (2 * h);
    worst = std::max(worst, std::abs(r));
  }
  return {worst <= kContinuityTol, "max residual " + fmt(worst) + " at 100 probes"};
}

Outcome ot_oracles() {
  Rng rng(10);
  double worst_assign = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 7;
    const Matrix a = oracle::random_points(n, 2, rng), b = oracle::random_points(n, 2, rng);
    worst_assign =
        std::max(worst_assign, std::abs(exact_ot_plan(Batch(a), Batch(b)).cost - oracle::brute_force_assignment(a, b)));
  }
  double worst_marginal = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = oracle::random_points(30, 2, rng), b = oracle::random_points(40, 2, rng);
    for (double eps : {0.01, 0.1, 1.0})
      worst_marginal = std::max(worst_marginal, marginal_violation(sinkhorn_plan(Batch(a), Batch(b), {}, {}, eps)));
  }
  const Matrix a = oracle::random_points(6, 2, rng), b = oracle::random_points(5, 2, rng);
  Vector wa(6), wb(5);
  for (double& v : wa) v = rng.uniform(0.1, 1.0);
  for (double& v : wb) v = rng.uniform(0.1, 1.0);
  double sa = 0.0, sb = 0.0;
  for (double v : wa) sa += v;
  for (double v : wb) sb += v;
  for (double& v : wa) v /= sa;
  for (double& v : wb) v /= sb;
  const CouplingPlan big = sinkhorn_plan(Batch(a), Batch(b), wa, wb, 1e6);
  double worst_outer = 0.0;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 5; ++j) worst_outer = std::max(worst_outer, std::abs(big.mass(i, j) - wa[i] * wb[j]));
  const bool pass = worst_assign <= kAssignmentTol && worst_marginal <= kMarginalTol && worst_outer <= kOuterProductTol;
  return {pass, "assignment gap " + fmt(worst_assign) + ", sinkhorn marginal violation " + fmt(worst_marginal) +
                    ", outer-product gap " + fmt(worst_outer)};
}

Outcome gradient_suite() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(300 + seed);
    const std::size_t d = 1 + seed % 3;
    FieldModel m = init_model(d, seed % 2 ? std::vector<std::size_t>{4} : std::vector<std::size_t>{5, 3}, seed);
    for (auto& b : m.params.biases)
      for (double& v : b) v = 0.3 * rng.normal();
    const std::size_t n = 5;
    Vector t(n), w;
    for (double& v : t) v = rng.uniform();
    const Matrix x = oracle::random_points(n, d, rng), u = oracle::random_points(n, d, rng);
    if (seed % 4 == 0) {
      w.resize(n);
      double s = 0.0;
      for (double& v : w) s += (v = rng.uniform(0.1, 1.0));
      for (double& v : w) v /= s;
    }
    const Vector grad = loss_and_grad(m, t, x, u, w).grads.flat();
    const Vector theta = m.params.flat();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      FieldModel probe = m;
      Vector th = theta;
      th[i] = theta[i] + 1e-6;
      probe.params.set_flat(th);
      const double up = loss_and_grad(probe, t, x, u, w).loss;
      th[i] = theta[i] - 1e-6;
      probe.params.set_flat(th);
      const double down = loss_and_grad(probe, t, x, u, w).loss;
      const double fd = (up - down) / 2e-6;
      worst = std::max(worst, std::abs(grad[i] - fd) / std::max(1.0, std::max(std::abs(grad[i]), std::abs(fd))));
    }
  }
  return {worst <= kGradRelTol, "max relative error " + fmt(worst) + " over 20 models"};
}

// Marginalizing a N(0, I) source out of the icfm_gaussian_source path gives std (t sigma - t + 1).
Outcome gaussian_source_equivalence() {
  Rng rng(12);
  const std::size_t n = 100000;
  double worst = 0.0;
  for (double sigma : {0.1, 0.5}) {
    for (double t : {0.25, 0.5, 0.75}) {
      const PathSpec spec{PathVariant::icfm_gaussian_source, sigma};
      const Vector x1{1.5};
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const Vector x = sample_xt(spec, {{rng.normal()}, x1}, t, rng);
        ss += (x[0] - t * x1[0]) * (x[0] - t * x1[0]);
      }
      const double got = std::sqrt(ss / n), want = t * sigma - t + 1.0;
      worst = std::max(worst, std::abs(got - want) / want);
    }
  }
  return {worst <= kStdRelTol, "max relative std error " + fmt(worst)};
}

}  // namespace

int main() {
  std::cout << "flowmatch acceptance (" << kEpochs << " epochs per run, " << kSeeds << " seeds)" << std::endl;

  const double ref_normal = reference_w2("gaussian", "8gaussians");
  const double ref_moons = reference_w2("moons", "8gaussians");
  std::cout << "reference W2^2: gaussian->8gaussians " << fmt(ref_normal) << ", moons->8gaussians " << fmt(ref_moons)
            << std::endl;

  Pair normal;
  report(1, "NPE ordering on N->8gaussians", [&] {
    normal = train_pair("gaussian", "8gaussians", ref_normal);
    const double ot = mean(normal.npe_ot), ic = mean(normal.npe_icfm);
    const bool pass = ot <= kNpeOtMax && ic >= kNpeRatioNormal * ot && normal.slowest_run <= 60.0 * kRunMinutes;
    return Outcome{pass, "otcfm " + fmt(ot) + " " + list(normal.npe_ot) + ", icfm " + fmt(ic) + " " +
                             list(normal.npe_icfm) + ", slowest run " + fmt(normal.slowest_run) + " s"};
  });

  report(2, "NPE gap on moons->8gaussians", [&] {
    const Pair moons = train_pair("moons", "8gaussians", ref_moons);
    const double ot = mean(moons.npe_ot), ic = mean(moons.npe_icfm);
    return Outcome{ic >= kNpeRatioMoons * ot,
                   "otcfm " + fmt(ot) + " " + list(moons.npe_ot) + ", icfm " + fmt(ic) + " " + list(moons.npe_icfm) +
                       ", ratio " + fmt(ic / ot)};
  });

  report(3, "fit on N->moons", [&] {
    IntegratorSettings s;
    s.method = Method::rk4;
    s.n_steps = 100;
    const double ot = generated_w2(train_run(make_config("otcfm", "gaussian", "moons", 0)), s, kGenSize);
    const double ic = generated_w2(train_run(make_config("icfm", "gaussian", "moons", 0)), s, kGenSize);
    return Outcome{ot <= kFitW2Max && ic <= kFitW2Max, "W2^2 otcfm " + fmt(ot) + ", icfm " + fmt(ic)};
  });

  report(4, "SB-CFM bridge error on N->moons", [&] {
    std::vector<double> errors;
    for (int seed = 0; seed < kSeeds; ++seed) {
      ExperimentConfig c = make_config("sbcfm", "gaussian", "moons", seed, {"path.sigma=1"});
      const Trained t = train_run(c);
      const Rng root = Rng(seed).split("acceptance.bridge");
      const Batch q0 = t.problem.source.draw(1000, root.split("q0"));
      const Batch q1 = t.problem.target.draw(1000, root.split("q1"));
      Rng rng = root.split("noise");
      IntegratorSettings s;
      s.method = Method::rk4;
      s.n_steps = 100;
      errors.push_back(sb_error_curve(model_field(t.model), q0, q1, 1.0, 20, 1000, s, rng, c.train.sinkhorn).mean);
    }
    return Outcome{mean(errors) <= kBridgeErrorMax, "mean " + fmt(mean(errors)) + " " + list(errors)};
  });

  report(5, "objective variance gap on 8gaussians", [&] {
    if (normal.ot.empty()) throw std::runtime_error("criterion 1 models unavailable");
    auto ov = [](const Trained& t) {
      ExperimentConfig c = t.config;
      c.eval.ov_samples = 100000;
      return run_objective_variance(c, t.problem, t.model).mean;
    };
    const double ot = ov(normal.ot.front()), ic = ov(normal.icfm.front());
    return Outcome{ot <= ic / kOvRatio, "OV otcfm " + fmt(ot) + ", icfm " + fmt(ic) + ", ratio " + fmt(ic / ot)};
  });

  report(6, "Euler NFE=8 generation on N->8gaussians", [&] {
    if (normal.ot.empty()) throw std::runtime_error("criterion 1 models unavailable");
    IntegratorSettings s;
    s.method = Method::euler;
    s.n_steps = 8;
    std::vector<double> ot, ic;
    for (int k = 0; k < kSeeds; ++k) {
      ot.push_back(generated_w2(normal.ot[k], s, kEulerW2Size));
      ic.push_back(generated_w2(normal.icfm[k], s, kEulerW2Size));
    }
    return Outcome{mean(ot) <= mean(ic),
                   "W2^2 otcfm " + fmt(mean(ot)) + " " + list(ot) + ", icfm " + fmt(mean(ic)) + " " + list(ic)};
  });

  report(7, "funnel log-partition", [&] {
    const fs::path dir = fs::temp_directory_path() / "flowmatch_acceptance_ebm";
    ExperimentConfig c = make_config("otcfm", "gaussian", "funnel", 0,
                                     {"source.dim=10", "target.dim=10", "path.sigma=0.05", "train.batch_size=300",
                                      "train.lr=0.01", "train.grad_clip_norm=1", "train.hidden=128,128,128",
                                      "ebm.targets=rwis", "ebm.batches=1500", "ebm.k=6000", "ebm.tol=0.01",
                                      "output_dir=" + dir.string()});
    const std::clock_t started = std::clock();
    const EbmOutput out = cmd_ebm(c);
    const double minutes = static_cast<double>(std::clock() - started) / CLOCKS_PER_SEC / 60.0;
    fs::remove_all(dir);
    const double log_z = out.log_partition.log_z;
    return Outcome{std::abs(log_z) <= kLogZMax && minutes <= kEbmMinutes,
                   "log Z " + fmt(log_z) + ", " + fmt(minutes) + " CPU min"};
  });

  report(8, "fm_gaussian field reproduces its closed-form map", closed_form_map);
  report(9, "continuity residual of the marginal field", continuity_residual);
  report(10, "OT solver oracles", ot_oracles);
  report(11, "loss gradients vs finite differences", gradient_suite);
  report(12, "Gaussian-source path std", gaussian_source_equivalence);

  report(13, "OT batch size trend on N->8gaussians", [&] {
    std::vector<double> one, sixty_four;
    for (int seed = 0; seed < 3; ++seed) {
      one.push_back(npe_of(train_run(make_config("otcfm", "gaussian", "8gaussians", seed, {"coupling.ot_batch_size=1"})),
                           ref_normal));
      sixty_four.push_back(npe_of(
          train_run(make_config("otcfm", "gaussian", "8gaussians", seed, {"coupling.ot_batch_size=64"})), ref_normal));
    }
    return Outcome{mean(sixty_four) < mean(one),
                   "NPE batch 64 " + fmt(mean(sixty_four)) + " " + list(sixty_four) + ", batch 1 " + fmt(mean(one)) +
                       " " + list(one)};
  });

  report(14, "repeated training is byte-identical", [&] {
    const fs::path dir = fs::temp_directory_path() / "flowmatch_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_text_file((dir / "run.ini").string(),
                    "algorithm = sbcfm\nseed = 11\n[target]\nkind = moons\n[path]\nsigma = 0.5\n"
                    "[train]\nmax_epochs = 3\nval_interval = 1\nval_size = 500\n");
    bool ok = true;
    for (const char* out : {"a", "b"})
      ok = ok && run_cli("train --config " + (dir / "run.ini").string() + " --out " + (dir / out).string()) == 0;
    if (!ok) return Outcome{false, "cli run failed"};
    bool same = true;
    for (const char* f : {"checkpoint.json", "history.csv"})
      same = same && read_text_file((dir / "a" / f).string()) == read_text_file((dir / "b" / f).string());
    fs::remove_all(dir);
    return Outcome{same, same ? "checkpoint.json and history.csv match" : "outputs differ"};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
