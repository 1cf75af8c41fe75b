#include <cstdio>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "dpad/cli.hpp"
#include "dpad/config.hpp"
#include "dpad/errors.hpp"

// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
// failure during training or scoring.

namespace {

struct Args {
  std::string config;
  std::string out;         // overrides output_dir when given
  std::string checkpoint;
  std::string selector = "anomalous";
  std::string mode = "best_f1";
  double threshold = 0.0;
  double ratio = 0.5;
  int64_t seed = -1;       // overrides the config seed list when >= 0
};

dpad::RunConfig resolve(const Args& a) {
  dpad::RunConfig cfg = dpad::load_config(a.config);
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (a.seed >= 0) cfg.seeds = {static_cast<uint64_t>(a.seed)};
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training cycles many short-lived multi-hundred-KB buffers; glibc's
  // dynamic mmap threshold would migrate those onto the heap, where freed
  // pages never return to the OS and resident memory grows without bound
  // over long runs. Pinning the threshold keeps large buffers mmap-backed.
  mallopt(M_MMAP_THRESHOLD, 131072);
#endif
  CLI::App app{"dual-path anomaly detection for multivariate time series"};
  app.require_subcommand(1);
  Args a;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", a.config, "run configuration JSON")->required();
    cmd->add_option("--out", a.out, "output directory (overrides output_dir)");
  };

  CLI::App* train = app.add_subcommand(
      "train", "train one model per configured seed");
  add_common(train);
  train->add_option("--seed", a.seed, "train only this seed");

  CLI::App* score = app.add_subcommand(
      "score", "write anomaly scores for the test series");
  add_common(score);
  score->add_option("--checkpoint", a.checkpoint,
                    "checkpoint file or directory of seed_* runs")->required();

  CLI::App* eval = app.add_subcommand(
      "eval", "score and evaluate against test labels");
  add_common(eval);
  eval->add_option("--checkpoint", a.checkpoint,
                   "checkpoint file or directory of seed_* runs")->required();
  eval->add_option("--mode", a.mode, "threshold selection")
      ->check(CLI::IsMember({"best_f1", "fixed"}));
  eval->add_option("--threshold", a.threshold,
                   "global-score threshold for --mode fixed");

  CLI::App* graphs = app.add_subcommand(
      "export-graphs", "export learned graphs for one test sample");
  add_common(graphs);
  graphs->add_option("--checkpoint", a.checkpoint,
                     "checkpoint file or directory")->required();
  graphs->add_option("--select", a.selector,
                     "'normal', 'anomalous', or a window-origin timestep");

  CLI::App* noise = app.add_subcommand(
      "inject-noise", "write a Gaussian-corrupted copy of the training data");
  add_common(noise);
  noise->add_option("--ratio", a.ratio,
                    "noise std as a fraction of each channel's std");
  noise->add_option("--seed", a.seed, "noise RNG seed");

  CLI::App* synth = app.add_subcommand(
      "generate-synthetic", "generate the synthetic labeled benchmark");
  add_common(synth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the usage error
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) {
      dpad::cli::command_train(resolve(a));
    } else if (score->parsed()) {
      dpad::cli::command_score(resolve(a), a.checkpoint);
    } else if (eval->parsed()) {
      dpad::cli::command_eval(resolve(a), a.checkpoint,
                              a.mode == "fixed"
                                  ? dpad::scoring::ThresholdMode::Fixed
                                  : dpad::scoring::ThresholdMode::BestF1,
                              a.threshold);
    } else if (graphs->parsed()) {
      dpad::cli::command_export_graphs(resolve(a), a.checkpoint, a.selector);
    } else if (noise->parsed()) {
      dpad::RunConfig cfg = dpad::load_config(a.config);
      if (!a.out.empty()) cfg.output_dir = a.out;
      const uint64_t seed =
          a.seed >= 0 ? static_cast<uint64_t>(a.seed) : cfg.seeds.front();
      const std::string out_file = cfg.output_dir + "/train_noisy.csv";
      dpad::cli::command_inject_noise(cfg, a.ratio, seed, out_file);
    } else if (synth->parsed()) {
      dpad::cli::command_generate_synthetic(resolve(a));
    }
  } catch (const dpad::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const dpad::ParameterError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const dpad::DimensionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const dpad::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const dpad::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
