#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpad/data.hpp"
#include "dpad/model.hpp"

// Dense anomaly scoring from prediction errors, point-adjusted evaluation,
// and the scores/metrics file formats.

namespace dpad::scoring {

// Per-channel robust location/scale of validation-region raw scores; the
// IQR is floored at 1e-3 before use as a divisor.
struct RobustStats {
  std::vector<double> median, iqr;
};

struct ScoreMatrix {
  int64_t length = 0;        // full series length L
  int64_t channels = 0;      // N
  int64_t first_scored = 0;  // h + w: earlier timesteps score 0, excluded
  std::vector<double> channel;  // L x N row-major
  std::vector<double> global;   // L

  int64_t scored_count() const { return length - first_scored; }
  std::vector<double> scored_global() const;
  // Restrict a per-timestep label/score vector to the scored region.
  template <typename T>
  std::vector<T> scored_slice(const std::vector<T>& full) const {
    return std::vector<T>(full.begin() + static_cast<ptrdiff_t>(first_scored),
                          full.end());
  }
};

// Raw channel scores: squared prediction error averaged over every dense
// (stride-1) window whose forecast covers the timestep. The model must carry
// non-zero parameters (a default-constructed, never-trained model raises
// ContractError). Global scores are left empty until standardization.
ScoreMatrix raw_scores(const DualPathModel& model,
                       const data::TimeSeriesDataset& ds, int64_t batch);

// Median and IQR per channel over the scored region of `raw`.
RobustStats robust_stats(const ScoreMatrix& raw);

// (r - median) / max(iqr, 1e-3) per channel, then global = max over channels.
void standardize_scores(ScoreMatrix& m, const RobustStats& st);

// Reference detector for end-to-end comparisons: per-channel |z| relative to
// the training statistics already applied to `ds` (i.e. |value|), global =
// channel max, with the same scored-region exclusion as the model.
ScoreMatrix baseline_zscore_scores(const data::TimeSeriesDataset& ds,
                                   int64_t first_scored);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Segment-completion protocol: any hit inside a maximal true-anomaly segment
// marks the whole segment detected; predictions elsewhere are untouched.
std::vector<uint8_t> point_adjust(const std::vector<uint8_t>& pred,
                                  const std::vector<uint8_t>& truth);

struct Metrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct AnomalyReport {
  std::vector<double> channel_scores;  // L' x N row-major; filled by callers
                                       // that hold the full score matrix
  std::vector<double> global_scores;   // L'
  double threshold = 0.0;
  std::vector<uint8_t> decisions;      // L': global_scores >= threshold
  Metrics metrics;                     // point-adjusted
};

enum class ThresholdMode { BestF1, Fixed };

// BestF1 sweeps every distinct score as a candidate threshold and keeps the
// report with maximal point-adjusted F1 (ties broken toward higher
// precision, then toward the higher threshold). Fixed uses `threshold`.
AnomalyReport evaluate(const std::vector<double>& global_scores,
                       const std::vector<uint8_t>& truth, ThresholdMode mode,
                       double threshold = 0.0);

// Arithmetic mean of the reports' F1 values.
double average_f1(const std::vector<AnomalyReport>& reports);

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// "# scores-v1" header, then CSV: t, channel_1..channel_N, global.
void write_scores_file(const std::string& path, const ScoreMatrix& m);
ScoreMatrix read_scores_file(const std::string& path);

// "# metrics-v1" JSON object with precision/recall/f1/threshold/mode.
void write_metrics_file(const std::string& path, const AnomalyReport& r,
                        const std::string& mode);

}  // namespace dpad::scoring
