#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flowmatch/config.hpp"
#include "flowmatch/core.hpp"
#include "flowmatch/coupling.hpp"
#include "flowmatch/data.hpp"
#include "flowmatch/eval.hpp"
#include "flowmatch/integrate.hpp"
#include "flowmatch/net.hpp"
#include "flowmatch/plot.hpp"
#include "flowmatch/report.hpp"
#include "flowmatch/rng.hpp"
#include "flowmatch/trainer.hpp"

namespace flowmatch {

namespace fs = std::filesystem;

/// One marginal of an experiment: fresh draws for samplable kinds, a fixed
/// train/held-out split for CSV point clouds.
struct Side {
  std::string name;
  Sampler sampler;
  std::optional<Batch> held_out;

  /// n fresh points, or the whole held-out split for finite data.
  Batch draw(std::size_t n, Rng rng) const { return held_out ? *held_out : sampler(n, rng); }
};

/// Everything needed to train and evaluate one configured experiment.
struct Problem {
  std::string dataset;
  std::vector<TrainLeg> legs;
  Side source;
  Side target;
  std::optional<LeaveOneOutPlan> series;
};

namespace experiment_detail {

inline std::pair<Batch, Batch> split_holdout(const Batch& all, double fraction, Rng rng) {
  const std::size_t n = all.size();
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * n)));
  if (n_val >= n) throw DataError("too few points to hold out a validation split");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  auto take = [&](std::size_t begin, std::size_t end) {
    Matrix m(end - begin, all.dim());
    for (std::size_t k = begin; k < end; ++k) {
      const auto r = all.points.row(order[k]);
      std::copy(r.begin(), r.end(), m.row(k - begin).begin());
    }
    return Batch(std::move(m));
  };
  return {take(n_val, n), take(0, n_val)};
}

inline std::string file_label(const std::string& path) {
  std::string stem = fs::path(path).stem().string();
  for (char& ch : stem)
    if (ch == ',' || ch == ' ') ch = '_';
  return stem;
}

inline Side make_side(const DataConfig& dc, double val_fraction, Rng rng) {
  Side side;
  if (dc.spec.kind == DatasetKind::csv) {
    CsvData data = load_csv(dc.spec.csv_path, std::nullopt, dc.whiten);
    auto [train, held] = split_holdout(data.groups.front().batch, val_fraction, rng);
    side.name = file_label(dc.spec.csv_path);
    side.sampler = finite_sampler(std::move(train));
    side.held_out = std::move(held);
  } else {
    side.name = to_string(dc.spec.kind);
    side.sampler = dataset_sampler(dc.spec);
  }
  return side;
}

inline std::vector<IntegratorSettings> eval_settings(const EvalConfig& e) {
  std::vector<IntegratorSettings> out;
  auto adaptive = [&] {
    IntegratorSettings s;
    s.method = Method::dopri5;
    s.adaptive = e.adaptive;
    return s;
  };
  if (!e.nfe_grid.empty()) {
    for (std::size_t steps : e.nfe_grid) out.push_back({Method::euler, steps, e.adaptive});
    out.push_back(adaptive());
    return out;
  }
  for (Method m : e.integrators) out.push_back(m == Method::dopri5 ? adaptive() : IntegratorSettings{m, e.n_steps, e.adaptive});
  return out;
}

inline std::size_t reported_steps(const IntegratorSettings& s, const Trajectory& traj) {
  return s.method == Method::dopri5 ? traj.accepted_steps : s.n_steps;
}

}  // namespace experiment_detail

inline Problem build_problem(const ExperimentConfig& c) {
  using namespace experiment_detail;
  const Rng root = Rng(c.train.seed).split("problem");
  Problem p;
  if (c.source.spec.kind == DatasetKind::csv && c.source.spec.time_column) {
    if (!c.holdout) throw InvalidConfig("train.holdout: required for time-series data");
    CsvData data = load_csv(c.source.spec.csv_path, c.source.spec.time_column, c.source.whiten);
    LeaveOneOutPlan plan = leave_one_out_plan(data.groups, *c.holdout);
    for (std::size_t k = 0; k < plan.legs.size(); ++k) {
      const auto& leg = plan.legs[k];
      auto [src_train, src_val] = split_holdout(leg.source, c.val_fraction, root.split("split.source").split(k));
      auto [tgt_train, tgt_val] = split_holdout(leg.target, c.val_fraction, root.split("split.target").split(k));
      p.legs.push_back({finite_sampler(std::move(src_train)), finite_sampler(std::move(tgt_train)), std::move(src_val),
                        std::move(tgt_val), leg.window});
    }
    p.dataset = file_label(c.source.spec.csv_path) + "@" + format_double(data.groups[*c.holdout].label);
    p.source.name = p.dataset;
    p.source.held_out = plan.eval_source;
    p.target.name = p.dataset;
    p.target.held_out = plan.eval_target;
    p.series = std::move(plan);
    return p;
  }
  p.source = make_side(c.source, c.val_fraction, root.split("split.source"));
  p.target = make_side(c.target, c.val_fraction, root.split("split.target"));
  p.dataset = p.source.name + "->" + p.target.name;
  TrainLeg leg;
  leg.source = p.source.sampler;
  leg.target = p.target.sampler;
  leg.val_source = p.source.draw(c.val_size, root.split("val.source"));
  leg.val_target = p.target.draw(c.val_size, root.split("val.target"));
  if (leg.val_source.dim() != leg.val_target.dim()) throw InvalidConfig("target.dim: source and target dimensions differ");
  p.legs.push_back(std::move(leg));
  return p;
}

struct EvalOutput {
  std::vector<ReportRow> rows;
  std::optional<FlowPicture> picture;
  double w2_ref = 0.0;
};

/// Integrates held-out source points with every configured integrator and scores
/// the endpoints. W2 and NPE references come from fresh draws (or held-out splits).
inline EvalOutput evaluate(const ExperimentConfig& c, const Problem& p, const FieldModel& model) {
  using namespace experiment_detail;
  const Rng root = Rng(c.train.seed).split("evaluate");
  const Field field = model_field(model);
  EvalOutput out;

  Batch x0, target;
  double t0 = 0.0, t1 = 1.0;
  if (p.series) {
    x0 = p.series->eval_source;
    target = p.series->eval_target;
    t0 = p.series->eval_t_start;
    t1 = p.series->eval_t_end;
    out.w2_ref = std::numeric_limits<double>::quiet_NaN();
  } else {
    x0 = p.source.draw(c.eval.n_eval, root.split("eval.source"));
    target = p.target.draw(c.eval.n_eval, root.split("eval.target"));
    const Batch ref_source = p.source.draw(c.eval.w2_ref_size, root.split("ref.source"));
    const Batch ref_target = p.target.draw(c.eval.w2_ref_size, root.split("ref.target"));
    out.w2_ref = w2_squared(ref_source, ref_target);
  }

  const auto settings = eval_settings(c.eval);
  for (const auto& s : settings) {
    RecordOptions record;
    record.path_energy = true;
    const Trajectory traj = integrate(field, x0.points, t0, t1, s, record);
    ReportRow row;
    row.run_id = c.run_id;
    row.algorithm = to_string(c.algorithm);
    row.dataset = p.dataset;
    row.sigma = c.train.path.sigma;
    row.seed = c.train.seed;
    row.w2_sq = w2_squared(Batch(traj.final_state()), target);
    for (double e : traj.path_energy) row.pe += e;
    row.pe /= static_cast<double>(x0.size());
    row.npe = out.w2_ref > 0.0 ? std::abs(row.pe - out.w2_ref) / out.w2_ref : std::numeric_limits<double>::quiet_NaN();
    row.nfe_mean = static_cast<double>(traj.nfe);
    row.integrator = to_string(s.method);
    row.n_steps = reported_steps(s, traj);
    out.rows.push_back(std::move(row));
  }

  if (c.eval.trajectories > 0) {
    const std::size_t n = std::min(c.eval.trajectories, x0.size());
    Matrix start(n, x0.dim());
    std::copy(x0.points.values().begin(), x0.points.values().begin() + static_cast<std::ptrdiff_t>(n * x0.dim()),
              start.values().begin());
    RecordOptions record;
    record.grid_points = c.eval.trajectory_points;
    const Trajectory traj = integrate(field, start, t0, t1, settings.front(), record);
    FlowPicture pic;
    const std::size_t shown = std::min<std::size_t>(1000, std::min(x0.size(), target.size()));
    pic.source = Matrix(shown, x0.dim());
    pic.target = Matrix(shown, target.dim());
    std::copy(x0.points.values().begin(), x0.points.values().begin() + static_cast<std::ptrdiff_t>(shown * x0.dim()),
              pic.source.values().begin());
    std::copy(target.points.values().begin(),
              target.points.values().begin() + static_cast<std::ptrdiff_t>(shown * target.dim()),
              pic.target.values().begin());
    for (std::size_t i = 0; i < n; ++i) {
      Matrix path(traj.states.size(), x0.dim());
      for (std::size_t k = 0; k < traj.states.size(); ++k) {
        const auto r = traj.states[k].row(i);
        std::copy(r.begin(), r.end(), path.row(k).begin());
      }
      pic.trajectories.push_back(std::move(path));
    }
    out.picture = std::move(pic);
  }
  return out;
}

inline nlohmann::json report_json(const std::vector<ReportRow>& rows, double w2_ref) {
  nlohmann::json j;
  j["w2_ref"] = std::isfinite(w2_ref) ? nlohmann::json(w2_ref) : nlohmann::json(nullptr);
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    j["rows"].push_back({{"run_id", r.run_id},
                         {"algorithm", r.algorithm},
                         {"dataset", r.dataset},
                         {"sigma", r.sigma},
                         {"seed", r.seed},
                         {"w2_sq", num(r.w2_sq)},
                         {"pe", num(r.pe)},
                         {"npe", num(r.npe)},
                         {"nfe_mean", r.nfe_mean},
                         {"integrator", r.integrator},
                         {"n_steps", r.n_steps}});
  }
  return j;
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

inline std::string out_path(const ExperimentConfig& c, const std::string& name) {
  return (fs::path(c.output_dir) / name).string();
}

/// Writes checkpoint.json, history.csv, timing.csv and meta.json under output_dir.
inline TrainResult cmd_train(const ExperimentConfig& c) {
  validate(c);
  ensure_dir(c.output_dir);
  const auto started = std::chrono::steady_clock::now();
  const Problem p = build_problem(c);
  TrainResult result = train(c.train, p.legs);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  const std::string checkpoint = checkpoint_string(result.model);
  const std::string history = history_csv(result.history);
  write_text_file(out_path(c, "checkpoint.json"), checkpoint);
  write_text_file(out_path(c, "history.csv"), history);
  write_text_file(out_path(c, "timing.csv"), timing_csv(result.history));

  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json meta;
  meta["run_id"] = c.run_id;
  meta["algorithm"] = to_string(c.algorithm);
  meta["dataset"] = p.dataset;
  meta["seed"] = c.train.seed;
  meta["config"] = config_json(c.tree);
  meta["config_sha1"] = git_blob_sha1(config_text(c.tree));
  meta["checkpoint_sha1"] = git_blob_sha1(checkpoint);
  meta["history_sha1"] = git_blob_sha1(history);
  meta["wall_clock_s"] = wall;
  meta["epochs_run"] = result.epochs_run;
  meta["steps"] = result.steps;
  meta["failed_steps"] = result.failed_steps;
  meta["stop_reason"] = result.stop_reason;
  meta["initial_val_loss"] = num(result.initial_val_loss);
  meta["best_val_loss"] = num(result.best_val_loss);
  write_text_file(out_path(c, "meta.json"), meta.dump(2) + "\n");
  return result;
}

inline std::string default_checkpoint(const ExperimentConfig& c) { return out_path(c, "checkpoint.json"); }

/// Writes report.csv and report.json, plus trajectories.csv and flow.svg when
/// eval.trajectories > 0.
inline EvalOutput cmd_eval(const ExperimentConfig& c, const std::string& checkpoint) {
  validate(c);
  const FieldModel model = load_checkpoint(checkpoint);
  const Problem p = build_problem(c);
  if (model.dim() != p.legs.front().val_source.dim())
    throw InvalidInput("checkpoint dimension does not match the configured data");
  ensure_dir(c.output_dir);
  EvalOutput out = evaluate(c, p, model);
  write_text_file(out_path(c, "report.csv"), report_csv(out.rows));
  write_text_file(out_path(c, "report.json"), report_json(out.rows, out.w2_ref).dump(2) + "\n");
  if (out.picture) {
    write_text_file(out_path(c, "trajectories.csv"), trajectory_csv(*out.picture));
    write_text_file(out_path(c, "flow.svg"), render_flow_svg(*out.picture));
  }
  return out;
}

/// Mean objective variance of the configured training targets around the trained field.
inline McEstimate run_objective_variance(const ExperimentConfig& c, const Problem& p, const FieldModel& model) {
  Rng rng = Rng(c.train.seed).split("objective_variance");
  return objective_variance(c.train, p.legs.front().source, p.legs.front().target, model_time_field(model),
                            c.eval.ov_samples, rng);
}

struct SweepCell {
  std::string value;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<ReportRow> rows;
  std::optional<double> ov;
};

struct Stat {
  double mean = 0.0;
  double std = 0.0;
};

struct SweepSummaryRow {
  std::string value;
  std::string integrator;
  std::size_t n_steps = 0;
  std::size_t n_ok = 0;
  std::size_t n_failed = 0;
  Stat w2_sq, pe, npe, nfe_mean, ov;
};

inline const char* sweep_key(const std::string& param) {
  if (param == "sigma") return "path.sigma";
  if (param == "batch_size") return "train.batch_size";
  if (param == "aggregation_m") return "train.aggregation_m";
  if (param == "ot_batch_size") return "coupling.ot_batch_size";
  throw InvalidConfig("sweep.param: expected sigma, batch_size, aggregation_m or ot_batch_size, got '" + param + "'");
}

namespace experiment_detail {

inline Stat mean_std_of(const std::vector<double>& v) {
  Stat m{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  if (v.empty()) return m;
  double s = 0.0;
  for (double x : v) s += x;
  m.mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - m.mean) * (x - m.mean);
  m.std = v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1)) : 0.0;
  return m;
}

}  // namespace experiment_detail

/// Aggregates per (value, integrator, steps) over seeds; sample standard deviation.
inline std::vector<SweepSummaryRow> summarize_sweep(const std::vector<std::string>& values,
                                                    const std::vector<SweepCell>& cells) {
  using experiment_detail::mean_std_of;
  std::vector<SweepSummaryRow> out;
  for (const auto& v : values) {
    std::vector<std::pair<std::string, std::size_t>> keys;
    std::size_t failed = 0;
    for (const auto& cell : cells) {
      if (cell.value != v) continue;
      if (!cell.ok) {
        ++failed;
        continue;
      }
      for (const auto& r : cell.rows) {
        const std::pair<std::string, std::size_t> key{r.integrator, r.integrator == "dopri5" ? 0 : r.n_steps};
        if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
      }
    }
    if (keys.empty()) keys.emplace_back("none", 0);
    for (const auto& [integrator, steps] : keys) {
      SweepSummaryRow row;
      row.value = v;
      row.integrator = integrator;
      row.n_steps = steps;
      row.n_failed = failed;
      std::vector<double> w2, pe, npe, nfe, ov;
      for (const auto& cell : cells) {
        if (cell.value != v || !cell.ok) continue;
        for (const auto& r : cell.rows) {
          if (r.integrator != integrator || (integrator != "dopri5" && r.n_steps != steps)) continue;
          ++row.n_ok;
          w2.push_back(r.w2_sq);
          pe.push_back(r.pe);
          npe.push_back(r.npe);
          nfe.push_back(r.nfe_mean);
          if (cell.ov) ov.push_back(*cell.ov);
        }
      }
      row.w2_sq = mean_std_of(w2);
      row.pe = mean_std_of(pe);
      row.npe = mean_std_of(npe);
      row.nfe_mean = mean_std_of(nfe);
      row.ov = mean_std_of(ov);
      out.push_back(std::move(row));
    }
  }
  return out;
}

inline std::string sweep_csv(const std::string& param, const std::vector<SweepSummaryRow>& rows) {
  std::string out =
      "param,value,integrator,n_steps,n_ok,n_failed,w2_sq_mean,w2_sq_std,pe_mean,pe_std,npe_mean,npe_std,"
      "nfe_mean,nfe_std,ov_mean,ov_std\n";
  for (const auto& r : rows) {
    out += param + "," + r.value + "," + r.integrator + "," + std::to_string(r.n_steps) + "," +
           std::to_string(r.n_ok) + "," + std::to_string(r.n_failed);
    for (const Stat* m : {&r.w2_sq, &r.pe, &r.npe, &r.nfe_mean, &r.ov})
      out += "," + format_double(m->mean) + "," + format_double(m->std);
    out += "\n";
  }
  return out;
}

inline std::string sweep_cells_csv(const std::string& param, const std::vector<SweepCell>& cells) {
  std::string out = "param,value,seed,status,integrator,n_steps,w2_sq,pe,npe,nfe_mean,ov,error\n";
  for (const auto& cell : cells) {
    const std::string ov = cell.ov ? format_double(*cell.ov) : "nan";
    if (!cell.ok) {
      std::string msg = cell.error;
      for (char& ch : msg)
        if (ch == ',' || ch == '\n') ch = ' ';
      out += param + "," + cell.value + "," + std::to_string(cell.seed) + ",failed,,0,nan,nan,nan,nan,nan," + msg + "\n";
      continue;
    }
    for (const auto& r : cell.rows)
      out += param + "," + cell.value + "," + std::to_string(cell.seed) + ",ok," + r.integrator + "," +
             std::to_string(r.n_steps) + "," + format_double(r.w2_sq) + "," + format_double(r.pe) + "," +
             format_double(r.npe) + "," + format_double(r.nfe_mean) + "," + ov + ",\n";
  }
  return out;
}

/// Runs train + eval for every (value, seed) cell in a worker pool. Each cell
/// writes into its own subdirectory; a failing cell is recorded, not fatal.
inline std::vector<SweepSummaryRow> cmd_sweep(const ExperimentConfig& c, std::size_t jobs = 0,
                                              std::ostream* log = nullptr) {
  validate(c);
  const std::string key = sweep_key(c.sweep.param);
  if (c.sweep.values.empty()) throw InvalidConfig("sweep.values: at least one value is required");
  if (c.sweep.seeds.empty()) throw InvalidConfig("sweep.seeds: at least one seed is required");
  ensure_dir(c.output_dir);

  std::vector<SweepCell> cells;
  for (const auto& v : c.sweep.values)
    for (std::uint64_t s : c.sweep.seeds) cells.push_back({v, s, false, {}, {}, {}});

  std::mutex log_mutex;
  auto run_cell = [&](SweepCell& cell) {
    try {
      auto tree = c.tree;
      tree.put(key, cell.value);
      tree.put("seed", std::to_string(cell.seed));
      tree.put("run_id", c.run_id + "_" + c.sweep.param + "=" + cell.value + "_s" + std::to_string(cell.seed));
      tree.put("output_dir", (fs::path(c.output_dir) / (c.sweep.param + "=" + cell.value) /
                              ("seed=" + std::to_string(cell.seed)))
                                 .string());
      const ExperimentConfig cc = experiment_from_tree(tree);
      validate(cc);
      const TrainResult result = cmd_train(cc);
      const EvalOutput eval = cmd_eval(cc, default_checkpoint(cc));
      cell.rows = eval.rows;
      if (cc.eval.ov_samples > 0) cell.ov = run_objective_variance(cc, build_problem(cc), result.model).mean;
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    if (log) {
      std::lock_guard<std::mutex> lock(log_mutex);
      *log << c.sweep.param << "=" << cell.value << " seed=" << cell.seed << (cell.ok ? " ok" : " failed: " + cell.error)
           << "\n";
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs ? jobs : c.sweep.jobs, cells.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(cells[i]);
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  const auto summary = summarize_sweep(c.sweep.values, cells);
  write_text_file(out_path(c, "sweep.csv"), sweep_csv(c.sweep.param, summary));
  write_text_file(out_path(c, "sweep_cells.csv"), sweep_cells_csv(c.sweep.param, cells));
  return summary;
}

/// Bridge error curve of a trained model against the ground-truth Schrodinger bridge
/// between fresh source and target samples. Writes sb_curve.csv and sb_report.json.
inline SbCurve cmd_sb_eval(const ExperimentConfig& c, const std::string& checkpoint) {
  validate(c);
  const FieldModel model = load_checkpoint(checkpoint);
  const Problem p = build_problem(c);
  if (p.series) throw InvalidConfig("sb-eval needs a source and target distribution, not a time series");
  ensure_dir(c.output_dir);
  const Rng root = Rng(c.train.seed).split("sb_eval");
  const Batch q0 = p.source.draw(c.eval.sb_samples, root.split("q0"));
  const Batch q1 = p.target.draw(c.eval.sb_samples, root.split("q1"));
  Rng rng = root.split("bridge");
  const auto settings = experiment_detail::eval_settings(c.eval).front();
  const SbCurve curve = sb_error_curve(model_field(model), q0, q1, c.train.path.sigma, c.eval.sb_timepoints,
                                       std::min(q0.size(), c.eval.sb_samples), settings, rng, c.train.sinkhorn);
  std::string csv = "t,w2_sq\n";
  for (const auto& [t, e] : curve.errors) csv += format_double(t) + "," + format_double(e) + "\n";
  write_text_file(out_path(c, "sb_curve.csv"), csv);
  nlohmann::json j;
  j["mean"] = curve.mean;
  j["nfe"] = curve.nfe;
  j["sigma"] = c.train.path.sigma;
  j["timepoints"] = c.eval.sb_timepoints;
  j["samples"] = q0.size();
  write_text_file(out_path(c, "sb_report.json"), j.dump(2) + "\n");
  return curve;
}

struct EbmOutput {
  TrainResult train;
  LogPartition log_partition;
  std::optional<double> mala_acceptance;
};

inline constexpr std::size_t kFunnelDim = 10;

/// Funnel pipeline: RWIS or MALA targets, then training for ebm.batches steps,
/// then the importance-weighted log-partition estimate with dopri5 at ebm.tol.
inline EbmOutput cmd_ebm(const ExperimentConfig& c) {
  validate(c);
  if (c.source.spec.kind != DatasetKind::gaussian || c.source.spec.d != kFunnelDim)
    throw InvalidConfig("source: the funnel pipeline needs a 10-dimensional Gaussian source");
  if (c.target.spec.kind != DatasetKind::funnel) throw InvalidConfig("target.kind: the ebm pipeline needs target kind funnel");
  ensure_dir(c.output_dir);
  const Rng root = Rng(c.train.seed).split("ebm");
  const LogDensity log_r = [](std::span<const double> x) { return funnel_log_density(x); };

  EbmOutput out;
  Sampler target;
  if (c.ebm.targets == "mcmc") {
    Rng rng = root.split("mala");
    MalaResult mala = mala_sample(log_r, [](std::span<const double> x) { return funnel_log_density_grad(x); },
                                  kFunnelDim, c.ebm.mcmc_samples, c.ebm.mcmc_steps,
                                  {c.ebm.mcmc_eps_start, c.ebm.mcmc_eps_end}, rng);
    out.mala_acceptance = mala.acceptance_rate;
    target = finite_sampler(std::move(mala.samples));
  } else {
    target = [log_r](std::size_t n, Rng& rng) { return rwis_batch(log_r, kFunnelDim, n, rng); };
  }

  TrainConfig tc = c.train;
  tc.max_epochs = 1;
  tc.steps_per_epoch = c.ebm.batches;
  tc.val_interval = 0;
  TrainLeg leg;
  leg.source = dataset_sampler(c.source.spec);
  leg.target = target;
  Rng val_rng = root.split("val");
  leg.val_source = leg.source(tc.batch_size, val_rng);
  leg.val_target = leg.target(tc.batch_size, val_rng);
  out.train = train(tc, {leg});

  IntegratorSettings settings;
  settings.method = Method::dopri5;
  settings.adaptive.atol = c.ebm.tol;
  settings.adaptive.rtol = c.ebm.tol;
  Rng est_rng = root.split("estimate");
  out.log_partition = log_partition_estimate(model_field(out.train.model), log_r, kFunnelDim, c.ebm.k, settings, est_rng);

  write_text_file(out_path(c, "checkpoint.json"), checkpoint_string(out.train.model));
  write_text_file(out_path(c, "history.csv"), history_csv(out.train.history));
  nlohmann::json j;
  j["log_z"] = out.log_partition.log_z;
  j["nfe"] = out.log_partition.nfe;
  j["targets"] = c.ebm.targets;
  j["batches"] = c.ebm.batches;
  j["batch_size"] = tc.batch_size;
  j["k"] = c.ebm.k;
  j["tol"] = c.ebm.tol;
  if (out.mala_acceptance) j["mala_acceptance"] = *out.mala_acceptance;
  j["config"] = config_json(c.tree);
  write_text_file(out_path(c, "ebm.json"), j.dump(2) + "\n");
  return out;
}

/// Renders a trajectories.csv to flow.svg or a report.csv to report.svg, chosen by header.
inline std::string cmd_plot(const std::string& input, const std::string& out_dir) {
  const std::string text = read_text_file(input);
  const std::string first = text.substr(0, text.find('\n'));
  std::istringstream in(text);
  std::string svg, name;
  if (first.rfind("kind,id", 0) == 0) {
    svg = render_flow_svg(parse_trajectory_csv(in));
    name = "flow.svg";
  } else {
    svg = render_report_svg(parse_report_csv(in));
    name = "report.svg";
  }
  ensure_dir(out_dir);
  const std::string path = (fs::path(out_dir) / name).string();
  write_text_file(path, svg);
  return path;
}

}  // namespace flowmatch
