#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "flowmatch/flowmatch.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kRuntime = 3, kIo = 4 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::size_t jobs = 0;
  std::string checkpoint;
  std::string input;
};

flowmatch::ExperimentConfig load(const Options& o) {
  auto tree = flowmatch::read_config_file(o.config);
  std::vector<std::string> overrides = o.overrides;
  if (o.seed) overrides.push_back("seed=" + std::to_string(*o.seed));
  if (!o.out.empty()) overrides.push_back("output_dir=" + o.out);
  flowmatch::apply_overrides(tree, overrides);
  auto c = flowmatch::experiment_from_tree(tree);
  flowmatch::validate(c);
  return c;
}

std::string checkpoint_for(const Options& o, const flowmatch::ExperimentConfig& c) {
  return o.checkpoint.empty() ? flowmatch::default_checkpoint(c) : o.checkpoint;
}

void print_rows(const std::vector<flowmatch::ReportRow>& rows) {
  for (const auto& r : rows)
    std::printf("%-8s %-6s steps=%-5zu w2_sq=%.5f pe=%.5f npe=%.5f nfe=%.0f\n", r.algorithm.c_str(),
                r.integrator.c_str(), r.n_steps, r.w2_sq, r.pe, r.npe, r.nfe_mean);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional flow matching: train, evaluate, sweep and plot"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub, bool needs_config = true) {
    auto* opt = sub->add_option("--config", o.config, "experiment config (INI, or a run's meta.json)");
    if (needs_config) opt->required();
    sub->add_option("--seed", o.seed, "seed; FLOWMATCH_SEED is used when neither flag nor config sets one");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--set", o.overrides, "override a config key, e.g. --set train.batch_size=256")->take_all();
    sub->add_option("--jobs", o.jobs, "parallel sweep cells");
  };

  auto* train = app.add_subcommand("train", "train a model; writes checkpoint.json, history.csv, meta.json");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; writes report.csv and report.json");
  add_common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint path (default: <out>/checkpoint.json)");
  auto* sweep = app.add_subcommand("sweep", "train and evaluate over sweep.values x sweep.seeds");
  add_common(sweep);
  auto* sb = app.add_subcommand("sb-eval", "bridge error of a checkpoint against the ground-truth bridge");
  add_common(sb);
  sb->add_option("--checkpoint", o.checkpoint, "checkpoint path (default: <out>/checkpoint.json)");
  auto* ebm = app.add_subcommand("ebm", "funnel pipeline: targets, training, log-partition estimate");
  add_common(ebm);
  auto* plot = app.add_subcommand("plot", "render trajectories.csv or report.csv to SVG");
  plot->add_option("--input", o.input, "trajectories.csv or report.csv")->required();
  plot->add_option("--out", o.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (plot->parsed()) {
      std::cout << flowmatch::cmd_plot(o.input, o.out) << "\n";
      return kOk;
    }
    const auto c = load(o);
    if (train->parsed()) {
      const auto r = flowmatch::cmd_train(c);
      std::printf("epochs=%zu steps=%zu stop=%s best_val=%.6g\n", r.epochs_run, r.steps, r.stop_reason.c_str(),
                  r.best_val_loss);
    } else if (eval->parsed()) {
      print_rows(flowmatch::cmd_eval(c, checkpoint_for(o, c)).rows);
    } else if (sweep->parsed()) {
      const auto rows = flowmatch::cmd_sweep(c, o.jobs, &std::cerr);
      for (const auto& r : rows)
        std::printf("%s=%s %s steps=%zu ok=%zu failed=%zu npe=%.5f+-%.5f w2_sq=%.5f+-%.5f\n", c.sweep.param.c_str(),
                    r.value.c_str(), r.integrator.c_str(), r.n_steps, r.n_ok, r.n_failed, r.npe.mean, r.npe.std,
                    r.w2_sq.mean, r.w2_sq.std);
    } else if (sb->parsed()) {
      const auto curve = flowmatch::cmd_sb_eval(c, checkpoint_for(o, c));
      std::printf("mean_w2_sq=%.6f nfe=%zu\n", curve.mean, curve.nfe);
    } else if (ebm->parsed()) {
      const auto r = flowmatch::cmd_ebm(c);
      std::printf("log_z=%.6f nfe=%zu\n", r.log_partition.log_z, r.log_partition.nfe);
    }
    return kOk;
  } catch (const flowmatch::InvalidConfig& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const flowmatch::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const flowmatch::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kIo;
  } catch (const flowmatch::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
