#pragma once

#include <cstdint>
#include <string>

#include "dpad/config.hpp"
#include "dpad/scoring.hpp"

// Command implementations behind the executable: each writes its outputs
// (plus a resolved-config snapshot) under cfg.output_dir and throws the
// library error types on failure; the binary maps those to exit codes.

namespace dpad::cli {

// Synthetic benchmark: writes train.csv, test.csv (labeled), segments.csv,
// and a config snapshot whose data paths point at the generated files.
void command_generate_synthetic(const RunConfig& cfg);

// Trains one model per seed: seed_<s>/checkpoint.bin (parameters plus the
// standardization and score-calibration statistics), seed_<s>/history.csv,
// and a summary.json aggregating best validation losses across seeds.
void command_train(const RunConfig& cfg);

// Scores the test series with every checkpoint under `checkpoint` (a file or
// a directory of seed_*/checkpoint.bin); writes <tag>/scores.csv each.
void command_score(const RunConfig& cfg, const std::string& checkpoint);

// Scoring plus point-adjusted evaluation against test labels: per-checkpoint
// <tag>/scores.csv + <tag>/metrics.json and an averaged metrics_avg.json.
void command_eval(const RunConfig& cfg, const std::string& checkpoint,
                  scoring::ThresholdMode mode, double threshold);

// One forward pass on the selected test sample; writes per-head edge lists,
// the pooled-context affinity matrix, and the sample's squared-error matrix.
// `selector` is "normal", "anomalous", or a window-origin timestep.
void command_export_graphs(const RunConfig& cfg, const std::string& checkpoint,
                           const std::string& selector);

// Writes a Gaussian-corrupted copy of the training series (per-channel noise
// std = ratio x channel std) to `out_file`.
void command_inject_noise(const RunConfig& cfg, double ratio, uint64_t seed,
                          const std::string& out_file);

}  // namespace dpad::cli
