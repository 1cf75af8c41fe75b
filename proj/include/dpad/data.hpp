#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dpad/tensor.hpp"

// Dataset ingestion, standardization, sliding-window sample construction,
// Gaussian-noise corruption, and synthetic benchmark generation.

namespace dpad::data {

struct StandardizationStats {
  std::vector<double> mean;        // per channel
  std::vector<double> scale;       // per channel (1.0 for constant channels)
  std::vector<uint8_t> constant;   // 1 where channel std < 1e-8
};

struct TimeSeriesDataset {
  std::vector<double> values;  // length x channels, row-major (row = timestep)
  int64_t length = 0;
  int64_t channels = 0;
  std::vector<std::string> channel_names;
  std::vector<uint8_t> labels;  // empty, or one 0/1 flag per timestep
  std::optional<StandardizationStats> stats;  // set once standardized

  double at(int64_t t, int64_t n) const { return values[static_cast<size_t>(t * channels + n)]; }
  double& at(int64_t t, int64_t n) { return values[static_cast<size_t>(t * channels + n)]; }
  bool has_labels() const { return !labels.empty(); }
  double anomaly_ratio() const;
};

// CSV with a header row of channel names. A leading "timestamp" column is
// ignored. When has_labels, the final column must be named "label" and hold
// 0/1. Ragged rows, empty cells, or non-numeric cells raise FormatError with
// the row/column location.
TimeSeriesDataset load_csv(const std::string& path, bool has_labels);
void write_csv(const TimeSeriesDataset& ds, const std::string& path,
               bool include_labels);

// Per-channel mean and population standard deviation of `train`; channels
// with std < 1e-8 get scale 1 and the constant flag.
StandardizationStats compute_stats(const TimeSeriesDataset& train);
// Shift/scale a dataset with the given (training) stats; records them on it.
void apply_stats(TimeSeriesDataset& ds, const StandardizationStats& stats);
// Standardizes train (which must contain no anomalous labels) and every
// dataset in `others` with the TRAIN statistics.
void standardize(TimeSeriesDataset& train,
                 const std::vector<TimeSeriesDataset*>& others);
// Inverts apply_stats using the stats recorded on the dataset.
void destandardize(TimeSeriesDataset& ds);

// One training instance: history P_i = [i-h, i), window W_i = [i, i+w),
// target Y_i = [i+w, i+2w). Matrices are materialized on demand as channel x
// time (N x h / N x w), float64.
struct TrainingSample {
  const TimeSeriesDataset* ds = nullptr;
  int64_t origin = 0;  // first timestep of W_i
  int64_t window = 0;  // w
  int64_t history = 0; // h

  Tensor history_matrix() const;  // N x h
  Tensor window_matrix() const;   // N x w
  Tensor target_matrix() const;   // N x w
};

// Samples at origins i = h, h+s, ... while i + 2w <= L;
// count = floor((L - h - 2w)/s) + 1.
std::vector<TrainingSample> make_samples(const TimeSeriesDataset& ds, int64_t w,
                                         int64_t h, int64_t s);

// Gathers origins into batched tensors: W (B,N,w), P (B,N,h), Y (B,N,w).
struct SampleBatch {
  Tensor W, P, Y;
};
SampleBatch make_batch(const TimeSeriesDataset& ds,
                       const std::vector<int64_t>& origins, int64_t w,
                       int64_t h, DType dt);

// Adds zero-mean Gaussian noise per cell with per-channel std equal to
// ratio x that channel's std. Labels are unchanged; ratio 0 is the identity.
TimeSeriesDataset inject_noise(const TimeSeriesDataset& ds, double ratio,
                               Rng& rng);

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  double train_fraction = 0.6;   // leading fraction of `length` becomes train
  int64_t drivers = 8;           // latent sinusoid/AR driver count
  double anomaly_ratio = 0.06;   // target labeled fraction of the test split
  std::vector<std::string> anomaly_types = {"spike", "level_shift",
                                            "correlation_break"};
  double noise_std = 0.05;       // per-channel observation noise
  int64_t min_segment = 10;
  int64_t max_segment = 60;
  int64_t window = 30;           // w: anomalies are placed only where scoreable
  int64_t history = 300;         // h
};

struct AnomalySegment {
  int64_t start = 0;  // inclusive, test-split timestep index
  int64_t end = 0;    // exclusive
  std::string type;
};

struct SyntheticResult {
  TimeSeriesDataset train;  // unlabeled
  TimeSeriesDataset test;   // labeled
  std::vector<double> mixing;  // channels x drivers, row-major ground truth
  int64_t driver_count = 0;
  std::vector<AnomalySegment> segments;
};

// Latent sinusoid/AR drivers mixed through a random sparse matrix plus
// per-channel noise; the test split carries labeled anomaly segments of the
// requested types. Correlation-break segments re-mix affected channels while
// preserving each channel's marginal scale, so they violate cross-channel
// structure without moving per-channel value distributions.
SyntheticResult generate_synthetic(int64_t n_channels, int64_t length,
                                   const SyntheticSpec& spec, Rng& rng);

}  // namespace dpad::data
