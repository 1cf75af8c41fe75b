#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpad/data.hpp"
#include "dpad/model.hpp"
#include "dpad/training.hpp"

// Run configuration: a single JSON file with every hyperparameter defaulted,
// strict unknown-key rejection, and a resolved-snapshot writer so any run can
// be reproduced from the config it leaves behind.

namespace dpad {

struct SyntheticConfig {
  int64_t channels = 120;
  int64_t length = 20000;
  uint64_t seed = 99;
  data::SyntheticSpec spec;  // window/history are taken from the model block
};

struct DataConfig {
  std::string train_csv;
  std::string test_csv;
  bool test_has_labels = true;
  int64_t stride = 5;  // s, training-sample stride
  SyntheticConfig synthetic;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;          // model.dtype maps to the "precision" key
  train::TrainConfig train;   // train.seed is driven by `seeds` per run
  std::vector<uint64_t> seeds = {0, 1, 2, 3, 4, 5};
  std::string output_dir = "runs";
};

// Parse from JSON text. Unknown keys, wrong types, and out-of-range values
// raise ConfigError naming the dotted key path; `origin` prefixes messages.
RunConfig parse_config(const std::string& text, const std::string& origin);

// Load from a file; a missing/unreadable file raises ConfigError.
RunConfig load_config(const std::string& path);

// Resolved snapshot (all fields, current values) as pretty JSON.
std::string config_text(const RunConfig& cfg);
void save_config(const std::string& path, const RunConfig& cfg);

}  // namespace dpad
