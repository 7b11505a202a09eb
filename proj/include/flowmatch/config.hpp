#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowmatch/core.hpp"
#include "flowmatch/data.hpp"
#include "flowmatch/integrate.hpp"
#include "flowmatch/trainer.hpp"

namespace flowmatch {

enum class Algorithm { fm, icfm, otcfm, sbcfm };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::fm: return "fm";
    case Algorithm::icfm: return "icfm";
    case Algorithm::otcfm: return "otcfm";
    case Algorithm::sbcfm: return "sbcfm";
  }
  return "unknown";
}

struct EvalConfig {
  std::size_t n_eval = 10000;
  std::size_t w2_ref_size = 10000;
  std::vector<Method> integrators{Method::rk4};
  std::size_t n_steps = 100;
  AdaptiveOptions adaptive;
  std::vector<std::size_t> nfe_grid;
  double mmd_bandwidth_sq = 2.0;
  std::size_t trajectories = 0;
  std::size_t trajectory_points = 21;
  std::size_t ov_samples = 0;
  std::size_t sb_timepoints = 20;
  std::size_t sb_samples = 1000;
};

struct SweepConfig {
  std::string param;
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds{0};
  std::size_t jobs = 1;
};

struct EbmConfig {
  std::string targets = "rwis";
  std::size_t mcmc_samples = 15000;
  std::size_t mcmc_steps = 1000;
  double mcmc_eps_start = 0.1;
  double mcmc_eps_end = 0.0;
  std::size_t batches = 1500;
  std::size_t k = 6000;
  double tol = 0.01;
};

struct DataConfig {
  DatasetSpec spec;
  bool whiten = true;
};

struct ExperimentConfig {
  std::string run_id = "run";
  Algorithm algorithm = Algorithm::icfm;
  DataConfig source;
  DataConfig target;
  TrainConfig train;
  std::size_t val_size = 10000;
  std::optional<std::size_t> holdout;
  double val_fraction = 0.1;
  EvalConfig eval;
  SweepConfig sweep;
  EbmConfig ebm;
  std::string output_dir = "out";
  /// Effective key/value tree after overrides, echoed into meta.json.
  boost::property_tree::ptree tree;
};

namespace config_detail {

using Tree = boost::property_tree::ptree;

// Every accepted key; anything else is rejected so typos surface early.
inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "run_id", "algorithm", "seed", "output_dir",
      "source.kind", "source.dim", "source.csv_path", "source.time_column", "source.whiten",
      "target.kind", "target.dim", "target.csv_path", "target.time_column", "target.whiten",
      "path.sigma",
      "coupling.epsilon", "coupling.ot_batch_size", "coupling.max_iters", "coupling.tol",
      "train.batch_size", "train.max_epochs", "train.steps_per_epoch", "train.val_interval", "train.patience",
      "train.val_size", "train.lr", "train.weight_decay", "train.beta1", "train.beta2", "train.adam_eps",
      "train.grad_clip_norm", "train.hidden", "train.aggregation_m", "train.wall_clock_limit_seconds",
      "train.holdout", "train.val_fraction",
      "eval.n_eval", "eval.w2_ref_size", "eval.integrators", "eval.n_steps", "eval.atol", "eval.rtol",
      "eval.nfe_grid", "eval.mmd_bandwidth_sq", "eval.trajectories", "eval.trajectory_points", "eval.ov_samples",
      "eval.sb_timepoints", "eval.sb_samples",
      "sweep.param", "sweep.values", "sweep.seeds", "sweep.jobs",
      "ebm.targets", "ebm.mcmc_samples", "ebm.mcmc_steps", "ebm.mcmc_eps_start", "ebm.mcmc_eps_end", "ebm.batches",
      "ebm.k", "ebm.tol"};
  return keys;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw InvalidConfig(key + ": expected a number, got '" + text + "'");
  return v;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    throw InvalidConfig(key + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

inline bool to_bool(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw InvalidConfig(key + ": expected a boolean, got '" + text + "'");
}

class Reader {
 public:
  explicit Reader(const Tree& t) : t_(t) {}

  std::optional<std::string> raw(const std::string& key) const {
    const auto v = t_.get_optional<std::string>(key);
    if (!v || trim(*v).empty()) return std::nullopt;
    return trim(*v);
  }
  std::string str(const std::string& key, const std::string& fallback) const { return raw(key).value_or(fallback); }
  double num(const std::string& key, double fallback) const {
    const auto v = raw(key);
    return v ? to_double(key, *v) : fallback;
  }
  std::optional<double> opt_num(const std::string& key) const {
    const auto v = raw(key);
    return v ? std::optional<double>(to_double(key, *v)) : std::nullopt;
  }
  std::uint64_t uint(const std::string& key, std::uint64_t fallback) const {
    const auto v = raw(key);
    return v ? to_uint(key, *v) : fallback;
  }
  std::optional<std::uint64_t> opt_uint(const std::string& key) const {
    const auto v = raw(key);
    return v ? std::optional<std::uint64_t>(to_uint(key, *v)) : std::nullopt;
  }
  bool flag(const std::string& key, bool fallback) const {
    const auto v = raw(key);
    return v ? to_bool(key, *v) : fallback;
  }
  std::vector<std::uint64_t> uint_list(const std::string& key, std::vector<std::uint64_t> fallback) const {
    const auto v = raw(key);
    if (!v) return fallback;
    std::vector<std::uint64_t> out;
    for (const auto& item : split_list(*v)) out.push_back(to_uint(key, item));
    return out;
  }

 private:
  const Tree& t_;
};

inline void collect_keys(const Tree& t, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [name, child] : t) {
    const std::string key = prefix.empty() ? name : prefix + "." + name;
    if (child.empty())
      out.push_back(key);
    else
      collect_keys(child, key, out);
  }
}

inline DataConfig read_data(const Reader& r, const std::string& section, DatasetKind fallback) {
  DataConfig c;
  c.spec.kind = fallback;
  if (const auto k = r.raw(section + ".kind")) {
    try {
      c.spec.kind = parse_dataset_kind(*k);
    } catch (const InvalidConfig& e) {
      throw InvalidConfig(section + ".kind: " + e.what());
    }
  }
  c.spec.d = r.uint(section + ".dim", c.spec.kind == DatasetKind::funnel ? 10 : 2);
  c.spec.csv_path = r.str(section + ".csv_path", "");
  if (const auto tc = r.raw(section + ".time_column")) c.spec.time_column = *tc;
  c.whiten = r.flag(section + ".whiten", true);
  return c;
}

}  // namespace config_detail

/// Applies "dotted.key=value" overrides on top of a parsed tree.
inline void apply_overrides(boost::property_tree::ptree& tree, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidConfig("override '" + o + "' is not of the form key=value");
    tree.put(config_detail::trim(o.substr(0, eq)), config_detail::trim(o.substr(eq + 1)));
  }
}

inline boost::property_tree::ptree read_config_tree(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw InvalidConfig(std::string("config: ") + e.what());
  }
  return tree;
}

/// Accepts an INI file or a run's meta.json, whose "config" object holds the
/// effective dotted keys of that run.
inline boost::property_tree::ptree read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  if (path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw InvalidConfig(path + ": " + e.what());
    }
    if (!j.contains("config") || !j["config"].is_object()) throw InvalidConfig(path + ": no config object");
    boost::property_tree::ptree tree;
    for (const auto& [key, value] : j["config"].items()) {
      if (!value.is_string()) throw InvalidConfig(key + ": expected a string value in " + path);
      tree.put(key, value.get<std::string>());
    }
    return tree;
  }
  return read_config_tree(in);
}

/// Canonical "key = value" lines, sorted by key.
inline std::string config_text(const boost::property_tree::ptree& tree) {
  std::vector<std::string> keys;
  config_detail::collect_keys(tree, "", keys);
  std::sort(keys.begin(), keys.end());
  std::string out;
  for (const auto& k : keys) out += k + " = " + tree.get<std::string>(k) + "\n";
  return out;
}

inline nlohmann::json config_json(const boost::property_tree::ptree& tree) {
  std::vector<std::string> keys;
  config_detail::collect_keys(tree, "", keys);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : keys) j[k] = tree.get<std::string>(k);
  return j;
}

/// Builds and validates an experiment from a key/value tree. The seed falls back
/// to FLOWMATCH_SEED when neither the tree nor a flag provides one.
inline ExperimentConfig experiment_from_tree(const boost::property_tree::ptree& tree) {
  using namespace config_detail;
  std::vector<std::string> keys;
  collect_keys(tree, "", keys);
  for (const auto& k : keys)
    if (!known_keys().count(k)) throw InvalidConfig(k + ": unknown configuration key");

  const Reader r(tree);
  ExperimentConfig c;
  c.tree = tree;
  c.run_id = r.str("run_id", "run");
  c.output_dir = r.str("output_dir", "out");

  const std::string algo = r.str("algorithm", "icfm");
  if (algo == "fm")
    c.algorithm = Algorithm::fm;
  else if (algo == "icfm")
    c.algorithm = Algorithm::icfm;
  else if (algo == "otcfm")
    c.algorithm = Algorithm::otcfm;
  else if (algo == "sbcfm")
    c.algorithm = Algorithm::sbcfm;
  else
    throw InvalidConfig("algorithm: expected one of fm, icfm, otcfm, sbcfm, got '" + algo + "'");

  std::uint64_t seed = 0;
  if (const auto s = r.raw("seed")) {
    seed = to_uint("seed", *s);
  } else if (const char* env = std::getenv("FLOWMATCH_SEED")) {
    seed = to_uint("FLOWMATCH_SEED", env);
  }

  c.tree.put("seed", seed);

  c.source = read_data(r, "source", DatasetKind::gaussian);
  c.target = read_data(r, "target", DatasetKind::eight_gaussians);
  c.source.spec.seed = seed;
  c.target.spec.seed = seed;

  TrainConfig& t = c.train;
  t.seed = seed;
  t.path.sigma = r.num("path.sigma", 0.1);
  switch (c.algorithm) {
    case Algorithm::fm:
      t.path.variant = PathVariant::fm_gaussian;
      t.coupling = CouplingKind::independent;
      break;
    case Algorithm::icfm:
      t.path.variant = PathVariant::icfm;
      t.coupling = CouplingKind::independent;
      break;
    case Algorithm::otcfm:
      t.path.variant = PathVariant::otcfm;
      t.coupling = CouplingKind::exact_ot;
      break;
    case Algorithm::sbcfm:
      t.path.variant = PathVariant::sbcfm;
      t.coupling = CouplingKind::entropic_ot;
      break;
  }
  t.sinkhorn_epsilon = r.opt_num("coupling.epsilon");
  if (const auto ob = r.opt_uint("coupling.ot_batch_size")) t.ot_batch_size = *ob;
  t.sinkhorn.max_iters = r.uint("coupling.max_iters", t.sinkhorn.max_iters);
  t.sinkhorn.tol = r.num("coupling.tol", t.sinkhorn.tol);
  t.batch_size = r.uint("train.batch_size", 512);
  t.max_epochs = r.uint("train.max_epochs", 1000);
  t.steps_per_epoch = r.uint("train.steps_per_epoch", 0);
  t.val_interval = r.uint("train.val_interval", 10);
  t.patience = r.uint("train.patience", 3);
  t.optimizer.lr = r.num("train.lr", 1e-3);
  t.optimizer.weight_decay = r.num("train.weight_decay", 1e-5);
  t.optimizer.beta1 = r.num("train.beta1", 0.9);
  t.optimizer.beta2 = r.num("train.beta2", 0.999);
  t.optimizer.eps = r.num("train.adam_eps", 1e-8);
  t.optimizer.grad_clip_norm = r.opt_num("train.grad_clip_norm");
  const auto hidden = r.uint_list("train.hidden", {64, 64, 64});
  t.hidden.assign(hidden.begin(), hidden.end());
  t.aggregation_m = r.uint("train.aggregation_m", 1);
  t.wall_clock_limit_seconds = r.opt_num("train.wall_clock_limit_seconds");
  c.val_size = r.uint("train.val_size", 10000);
  if (const auto h = r.opt_uint("train.holdout")) c.holdout = *h;
  c.val_fraction = r.num("train.val_fraction", 0.1);

  EvalConfig& e = c.eval;
  e.n_eval = r.uint("eval.n_eval", e.n_eval);
  e.w2_ref_size = r.uint("eval.w2_ref_size", e.w2_ref_size);
  if (const auto list = r.raw("eval.integrators")) {
    e.integrators.clear();
    for (const auto& m : split_list(*list)) {
      try {
        e.integrators.push_back(parse_method(m));
      } catch (const InvalidConfig& err) {
        throw InvalidConfig(std::string("eval.integrators: ") + err.what());
      }
    }
  }
  e.n_steps = r.uint("eval.n_steps", e.n_steps);
  e.adaptive.atol = r.num("eval.atol", e.adaptive.atol);
  e.adaptive.rtol = r.num("eval.rtol", e.adaptive.rtol);
  const auto grid = r.uint_list("eval.nfe_grid", {});
  e.nfe_grid.assign(grid.begin(), grid.end());
  e.mmd_bandwidth_sq = r.num("eval.mmd_bandwidth_sq", e.mmd_bandwidth_sq);
  e.trajectories = r.uint("eval.trajectories", e.trajectories);
  e.trajectory_points = r.uint("eval.trajectory_points", e.trajectory_points);
  e.ov_samples = r.uint("eval.ov_samples", e.ov_samples);
  e.sb_timepoints = r.uint("eval.sb_timepoints", e.sb_timepoints);
  e.sb_samples = r.uint("eval.sb_samples", e.sb_samples);

  c.sweep.param = r.str("sweep.param", "");
  if (const auto v = r.raw("sweep.values")) c.sweep.values = split_list(*v);
  c.sweep.seeds = r.uint_list("sweep.seeds", {seed});
  c.sweep.jobs = r.uint("sweep.jobs", 1);

  c.ebm.targets = r.str("ebm.targets", c.ebm.targets);
  c.ebm.mcmc_samples = r.uint("ebm.mcmc_samples", c.ebm.mcmc_samples);
  c.ebm.mcmc_steps = r.uint("ebm.mcmc_steps", c.ebm.mcmc_steps);
  c.ebm.mcmc_eps_start = r.num("ebm.mcmc_eps_start", c.ebm.mcmc_eps_start);
  c.ebm.mcmc_eps_end = r.num("ebm.mcmc_eps_end", c.ebm.mcmc_eps_end);
  c.ebm.batches = r.uint("ebm.batches", c.ebm.batches);
  c.ebm.k = r.uint("ebm.k", c.ebm.k);
  c.ebm.tol = r.num("ebm.tol", c.ebm.tol);
  return c;
}

/// Structural checks with field paths in the messages.
inline void validate(const ExperimentConfig& c) {
  auto wrap = [](const std::string& field, auto&& fn) {
    try {
      fn();
    } catch (const InvalidConfig& e) {
      throw InvalidConfig(field + ": " + e.what());
    }
  };
  wrap("source", [&] { validate(c.source.spec); });
  wrap("target", [&] { validate(c.target.spec); });
  const bool series = c.source.spec.kind == DatasetKind::csv && c.source.spec.time_column.has_value();
  if (!series && c.source.spec.kind != DatasetKind::csv && c.target.spec.kind != DatasetKind::csv &&
      c.source.spec.d != c.target.spec.d)
    throw InvalidConfig("target.dim: source and target dimensions differ");
  if (c.algorithm == Algorithm::fm && c.source.spec.kind != DatasetKind::gaussian)
    throw InvalidConfig("algorithm: fm requires a Gaussian source");
  if (c.train.path.variant == PathVariant::sbcfm && !(c.train.path.sigma > 0.0))
    throw InvalidConfig("path.sigma: sbcfm requires sigma > 0");
  if (c.train.path.variant == PathVariant::fm_gaussian && !(c.train.path.sigma < 1.0))
    throw InvalidConfig("path.sigma: fm requires sigma in [0, 1)");
  if (!(c.train.path.sigma >= 0.0)) throw InvalidConfig("path.sigma: must be >= 0");
  if (c.train.batch_size == 0) throw InvalidConfig("train.batch_size: must be at least 1");
  if (c.train.ot_batch_size && *c.train.ot_batch_size == 0)
    throw InvalidConfig("coupling.ot_batch_size: must be at least 1");
  if (c.train.aggregation_m == 0) throw InvalidConfig("train.aggregation_m: must be at least 1");
  if (c.train.hidden.empty()) throw InvalidConfig("train.hidden: needs at least one layer");
  for (std::size_t w : c.train.hidden)
    if (w == 0) throw InvalidConfig("train.hidden: widths must be positive");
  if (c.train.val_interval > 0 && c.train.patience == 0) throw InvalidConfig("train.patience: must be at least 1");
  if (!(c.train.optimizer.lr > 0.0)) throw InvalidConfig("train.lr: must be positive");
  if (c.train.optimizer.weight_decay < 0.0) throw InvalidConfig("train.weight_decay: must be >= 0");
  if (c.train.coupling == CouplingKind::entropic_ot && !(c.train.epsilon() > 0.0))
    throw InvalidConfig("coupling.epsilon: must be positive");
  if (c.val_size == 0) throw InvalidConfig("train.val_size: must be at least 1");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw InvalidConfig("train.val_fraction: must lie in (0, 1)");
  if (c.eval.n_eval == 0) throw InvalidConfig("eval.n_eval: must be at least 1");
  if (c.eval.w2_ref_size == 0) throw InvalidConfig("eval.w2_ref_size: must be at least 1");
  if (c.eval.n_steps == 0) throw InvalidConfig("eval.n_steps: must be at least 1");
  for (std::size_t g : c.eval.nfe_grid)
    if (g == 0) throw InvalidConfig("eval.nfe_grid: step counts must be positive");
  if (!(c.eval.adaptive.atol > 0.0)) throw InvalidConfig("eval.atol: must be positive");
  if (!(c.eval.adaptive.rtol > 0.0)) throw InvalidConfig("eval.rtol: must be positive");
  if (!(c.eval.mmd_bandwidth_sq > 0.0)) throw InvalidConfig("eval.mmd_bandwidth_sq: must be positive");
  if (c.eval.sb_timepoints < 3) throw InvalidConfig("eval.sb_timepoints: must be at least 3");
  if (c.eval.trajectory_points < 2) throw InvalidConfig("eval.trajectory_points: must be at least 2");
  if (c.ebm.targets != "rwis" && c.ebm.targets != "mcmc") throw InvalidConfig("ebm.targets: expected rwis or mcmc");
  if (c.sweep.jobs == 0) throw InvalidConfig("sweep.jobs: must be at least 1");
}

inline ExperimentConfig load_experiment(const std::string& path, const std::vector<std::string>& overrides = {}) {
  auto tree = read_config_file(path);
  apply_overrides(tree, overrides);
  ExperimentConfig c = experiment_from_tree(tree);
  validate(c);
  return c;
}

}  // namespace flowmatch
