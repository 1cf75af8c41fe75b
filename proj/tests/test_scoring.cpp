#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "dpad/data.hpp"
#include "dpad/errors.hpp"
#include "dpad/model.hpp"
#include "dpad/scoring.hpp"
#include "testing.hpp"

using namespace dpad;
using namespace dpad::scoring;
using dpad::testing::close;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_channels = 3;
  cfg.window = 3;
  cfg.history = 12;
  cfg.embed_dim = 5;
  cfg.heads = 2;
  cfg.priors = {0.9, 0.05};
  cfg.diffusion_steps = 1;
  cfg.scales = 2;
  return cfg;
}

data::TimeSeriesDataset wave_dataset(int64_t L, int64_t N, uint64_t seed) {
  data::TimeSeriesDataset ds;
  ds.length = L;
  ds.channels = N;
  ds.values.resize(static_cast<size_t>(L * N));
  Rng rng(seed);
  for (int64_t t = 0; t < L; ++t)
    for (int64_t n = 0; n < N; ++n)
      ds.at(t, n) = std::sin(2.0 * M_PI * static_cast<double>(t + 5 * n) / 19.0) +
                    0.1 * rng.normal();
  for (int64_t n = 0; n < N; ++n)
    ds.channel_names.push_back("ch_" + std::to_string(n));
  return ds;
}

// Independent segment scan: fill each maximal truth run that contains a hit.
std::vector<uint8_t> adjust_reference(const std::vector<uint8_t>& pred,
                                      const std::vector<uint8_t>& truth) {
  std::vector<uint8_t> out = pred;
  size_t i = 0;
  while (i < truth.size()) {
    if (!truth[i]) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < truth.size() && truth[j]) ++j;
    bool hit = false;
    for (size_t k = i; k < j; ++k) hit = hit || pred[k] != 0;
    if (hit)
      for (size_t k = i; k < j; ++k) out[k] = 1;
    i = j;
  }
  return out;
}

Metrics metrics_reference(const std::vector<uint8_t>& pred,
                          const std::vector<uint8_t>& truth) {
  double tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] && truth[i]) ++tp;
    if (pred[i] && !truth[i]) ++fp;
    if (!pred[i] && truth[i]) ++fn;
  }
  Metrics m;
  m.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() /
          ("dpad_scoring_" + stem + "_" + std::to_string(::getpid())))
      .string();
}

AnomalyReport report_with_f1(double f1) {
  AnomalyReport r;
  r.metrics.f1 = f1;
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Raw scores
// ---------------------------------------------------------------------------

TEST_CASE("perfect predictions give zero raw scores") {
  ModelConfig cfg = tiny_config();
  DualPathModel model(cfg);  // all-zero weights predict exactly zero
  for (auto& [name, p] : model.parameters())
    if (name == "noise.log_var") p.set_values({1.0});

  data::TimeSeriesDataset ds;
  ds.length = 24;
  ds.channels = 3;
  ds.values.assign(24 * 3, 0.0);
  ScoreMatrix raw = raw_scores(model, ds, 4);
  CHECK(raw.first_scored == 15);
  CHECK(raw.length == 24);
  CHECK(raw.channels == 3);
  for (double v : raw.channel) CHECK(v == 0.0);
}

TEST_CASE("a never-trained model is rejected") {
  DualPathModel model(tiny_config());
  data::TimeSeriesDataset ds = wave_dataset(30, 3, 1);
  CHECK_THROWS_AS(raw_scores(model, ds, 4), ContractError);
}

TEST_CASE("raw scores reject a channel-count mismatch") {
  DualPathModel model(tiny_config(), 3);
  data::TimeSeriesDataset ds = wave_dataset(30, 5, 1);
  CHECK_THROWS_AS(raw_scores(model, ds, 4), DimensionError);
}

TEST_CASE("raw scores match a per-window direct evaluation") {
  ModelConfig cfg = tiny_config();
  DualPathModel model(cfg, 3);
  data::TimeSeriesDataset ds = wave_dataset(30, 3, 7);
  ScoreMatrix raw = raw_scores(model, ds, 4);

  const int64_t w = cfg.window, h = cfg.history, N = cfg.n_channels;
  std::vector<double> want(static_cast<size_t>(ds.length * N), 0.0);
  std::vector<double> count(want.size(), 0.0);
  for (int64_t origin = h; origin + 2 * w <= ds.length; ++origin) {
    data::SampleBatch b = data::make_batch(ds, {origin}, w, h, cfg.dtype);
    ModelOutput out = model.forward(b.W, b.P, SamplingMode::Deterministic);
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t k = 0; k < w; ++k) {
        const double err =
            out.predictions.at({0, n, k}) - ds.at(origin + w + k, n);
        const size_t idx = static_cast<size_t>((origin + w + k) * N + n);
        want[idx] += err * err;
        count[idx] += 1.0;
      }
    }
  }
  for (size_t i = 0; i < want.size(); ++i)
    if (count[i] > 0.0) want[i] /= count[i];

  REQUIRE(raw.channel.size() == want.size());
  for (size_t i = 0; i < want.size(); ++i) {
    CAPTURE(i);
    CHECK(close(raw.channel[i], want[i], 1e-12, 1e-12));
    CHECK(raw.channel[i] >= 0.0);  // squared errors, pre-standardization
  }
  for (int64_t t = 0; t < raw.first_scored; ++t)
    for (int64_t n = 0; n < N; ++n)
      CHECK(raw.channel[static_cast<size_t>(t * N + n)] == 0.0);
}

TEST_CASE("robust standardization maps (r - median) / iqr exactly") {
  ScoreMatrix m;
  m.length = 7;
  m.channels = 2;
  m.first_scored = 2;
  // Channel 0 scored column: {1,2,3,4,5} -> median 3, iqr 2.
  // Channel 1 is constant 7 -> iqr floored at 1e-3.
  m.channel.assign(14, 0.0);
  const double c0[5] = {5, 3, 1, 4, 2};
  for (int64_t t = 2; t < 7; ++t) {
    m.channel[static_cast<size_t>(t * 2 + 0)] = c0[t - 2];
    m.channel[static_cast<size_t>(t * 2 + 1)] = 7.0;
  }
  m.global.assign(7, 0.0);

  RobustStats st = robust_stats(m);
  CHECK(st.median[0] == 3.0);
  CHECK(st.iqr[0] == 2.0);
  CHECK(st.median[1] == 7.0);
  CHECK(st.iqr[1] == 0.0);

  standardize_scores(m, st);
  for (int64_t t = 2; t < 7; ++t) {
    const double want0 = (c0[t - 2] - 3.0) / 2.0;
    CHECK(m.channel[static_cast<size_t>(t * 2 + 0)] == want0);
    CHECK(m.channel[static_cast<size_t>(t * 2 + 1)] == 0.0);  // (7-7)/1e-3
    CHECK(m.global[static_cast<size_t>(t)] ==
          std::max(want0, m.channel[static_cast<size_t>(t * 2 + 1)]));
  }
  for (int64_t t = 0; t < 2; ++t) CHECK(m.global[static_cast<size_t>(t)] == 0.0);
}

TEST_CASE("the iqr floor turns tiny deviations into unit-scale scores") {
  ScoreMatrix m;
  m.length = 6;
  m.channels = 1;
  m.first_scored = 1;
  m.channel = {0.0, 7.0, 7.0, 7.0, 7.0, 7.001};
  m.global.assign(6, 0.0);
  RobustStats st = robust_stats(m);
  CHECK(st.iqr[0] == 0.0);
  standardize_scores(m, st);
  CHECK(close(m.channel[5], 0.001 / 1e-3, 1e-9, 1e-9));
}

TEST_CASE("a single-channel spike dominates its own timestep") {
  ModelConfig cfg = tiny_config();
  DualPathModel model(cfg, 3);
  data::TimeSeriesDataset ds = wave_dataset(60, 3, 11);
  const int64_t spike_t = 40, spike_n = 1;
  ds.at(spike_t, spike_n) += 50.0;

  ScoreMatrix m = raw_scores(model, ds, 8);
  RobustStats st = robust_stats(m);
  standardize_scores(m, st);

  const auto at = [&](int64_t t, int64_t n) {
    return m.channel[static_cast<size_t>(t * 3 + n)];
  };
  CHECK(m.global[static_cast<size_t>(spike_t)] == at(spike_t, spike_n));
  CHECK(at(spike_t, spike_n) > at(spike_t, 0));
  CHECK(at(spike_t, spike_n) > at(spike_t, 2));
  // global is the channel max everywhere
  for (int64_t t = m.first_scored; t < m.length; ++t) {
    double mx = at(t, 0);
    for (int64_t n = 1; n < 3; ++n) mx = std::max(mx, at(t, n));
    CHECK(m.global[static_cast<size_t>(t)] == mx);
  }
  std::vector<double> tail = m.scored_global();
  CHECK(tail.size() == static_cast<size_t>(m.scored_count()));
  CHECK(tail[0] == m.global[static_cast<size_t>(m.first_scored)]);
}

TEST_CASE("the absolute-value baseline scores |value| with a channel max") {
  data::TimeSeriesDataset ds;
  ds.length = 4;
  ds.channels = 2;
  ds.values = {0.5, -2.0, 1.0, 0.25, -3.0, 0.0, 0.0, 4.0};
  ScoreMatrix m = baseline_zscore_scores(ds, 2);
  CHECK(m.first_scored == 2);
  CHECK(m.channel[0] == 0.0);  // before first_scored
  CHECK(m.channel[static_cast<size_t>(2 * 2 + 0)] == 3.0);
  CHECK(m.channel[static_cast<size_t>(2 * 2 + 1)] == 0.0);
  CHECK(m.global[2] == 3.0);
  CHECK(m.global[3] == 4.0);
}

// ---------------------------------------------------------------------------
// Point adjustment
// ---------------------------------------------------------------------------

TEST_CASE("one hit inside a segment marks the whole segment") {
  std::vector<uint8_t> truth = {0, 1, 1, 1, 0};
  std::vector<uint8_t> pred = {0, 0, 1, 0, 0};
  CHECK(point_adjust(pred, truth) == std::vector<uint8_t>{0, 1, 1, 1, 0});
}

TEST_CASE("no true segments leaves predictions untouched") {
  std::vector<uint8_t> truth(6, 0);
  std::vector<uint8_t> pred = {1, 0, 1, 1, 0, 1};
  CHECK(point_adjust(pred, truth) == pred);
}

TEST_CASE("a missed segment stays missed") {
  std::vector<uint8_t> truth = {0, 1, 1, 0, 1, 1};
  std::vector<uint8_t> pred = {1, 0, 0, 0, 0, 1};
  CHECK(point_adjust(pred, truth) ==
        std::vector<uint8_t>{1, 0, 0, 0, 1, 1});
}

TEST_CASE("point adjustment rejects mismatched lengths") {
  CHECK_THROWS_AS(point_adjust({0, 1}, {0, 1, 0}), ContractError);
}

TEST_CASE("random cases match the brute-force scan exactly") {
  Rng rng(202);
  for (int rep = 0; rep < 1000; ++rep) {
    const size_t L = 1 + static_cast<size_t>(rng.uniform() * 40);
    std::vector<uint8_t> pred(L), truth(L);
    for (size_t i = 0; i < L; ++i) {
      pred[i] = rng.uniform() < 0.3 ? 1 : 0;
      truth[i] = rng.uniform() < 0.35 ? 1 : 0;
    }
    std::vector<uint8_t> got = point_adjust(pred, truth);
    std::vector<uint8_t> want = adjust_reference(pred, truth);
    if (got != want) {
      CAPTURE(rep);
      CHECK(got == want);
    }
    // never decreases recall, never flips a prediction outside a segment
    Metrics before = metrics_reference(pred, truth);
    Metrics after = metrics_reference(got, truth);
    CHECK(after.recall >= before.recall);
    for (size_t i = 0; i < L; ++i)
      if (!truth[i]) CHECK(got[i] == pred[i]);
  }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

TEST_CASE("separable scores reach perfect metrics") {
  std::vector<double> scores = {1, 1, 9, 8, 1};
  std::vector<uint8_t> truth = {0, 0, 1, 1, 0};
  AnomalyReport r = evaluate(scores, truth, ThresholdMode::BestF1);
  CHECK(r.metrics.precision == 1.0);
  CHECK(r.metrics.recall == 1.0);
  CHECK(r.metrics.f1 == 1.0);
  // Ties break toward the higher threshold: a hit at 9 already completes
  // the segment, so 9 wins over 8.
  CHECK(r.threshold == 9.0);
  CHECK(r.decisions == std::vector<uint8_t>{0, 0, 1, 0, 0});
  for (size_t i = 0; i < scores.size(); ++i)
    CHECK(static_cast<bool>(r.decisions[i]) == (scores[i] >= r.threshold));
}

TEST_CASE("an all-negative fixed threshold yields zero recall and f1") {
  std::vector<double> scores = {0.1, 0.2, 0.3, 0.2};
  std::vector<uint8_t> truth = {0, 1, 1, 0};
  AnomalyReport r = evaluate(scores, truth, ThresholdMode::Fixed, 5.0);
  CHECK(r.threshold == 5.0);
  CHECK(r.decisions == std::vector<uint8_t>{0, 0, 0, 0});
  CHECK(r.metrics.recall == 0.0);
  CHECK(r.metrics.f1 == 0.0);
  CHECK(r.metrics.precision == 0.0);
}

TEST_CASE("evaluate validates its inputs") {
  CHECK_THROWS_AS(evaluate({}, {}, ThresholdMode::BestF1), ContractError);
  CHECK_THROWS_AS(evaluate({1.0, 2.0}, {0}, ThresholdMode::BestF1),
                  ContractError);
}

TEST_CASE("the best-f1 sweep matches an exhaustive oracle") {
  Rng rng(203);
  for (int rep = 0; rep < 20; ++rep) {
    const size_t L = 200;
    std::vector<double> scores(L);
    std::vector<uint8_t> truth(L);
    for (size_t i = 0; i < L; ++i) {
      scores[i] = std::floor(rng.uniform() * 8.0);  // ties on purpose
      truth[i] = rng.uniform() < 0.25 ? 1 : 0;
    }
    AnomalyReport got = evaluate(scores, truth, ThresholdMode::BestF1);

    // Exhaustive: every distinct score as threshold, same tie-breaks.
    std::vector<double> cand = scores;
    std::sort(cand.begin(), cand.end(), std::greater<>());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    Metrics best;
    best.f1 = -1.0;
    double best_thr = 0.0;
    for (double thr : cand) {
      std::vector<uint8_t> dec(L);
      for (size_t i = 0; i < L; ++i) dec[i] = scores[i] >= thr ? 1 : 0;
      Metrics m = metrics_reference(adjust_reference(dec, truth), truth);
      if (m.f1 > best.f1 ||
          (m.f1 == best.f1 && m.precision > best.precision)) {
        best = m;
        best_thr = thr;
      }
    }
    CAPTURE(rep);
    CHECK(close(got.metrics.f1, best.f1, 1e-12, 1e-12));
    CHECK(close(got.metrics.precision, best.precision, 1e-12, 1e-12));
    CHECK(close(got.metrics.recall, best.recall, 1e-12, 1e-12));
    CHECK(got.threshold == best_thr);

    // fixed thresholds never beat the sweep
    for (int k = 0; k < 10; ++k) {
      const double thr = rng.uniform() * 10.0 - 1.0;
      AnomalyReport fixed = evaluate(scores, truth, ThresholdMode::Fixed, thr);
      CHECK(fixed.metrics.f1 <= got.metrics.f1 + 1e-12);
    }
  }
}

TEST_CASE("strictly increasing transforms leave the decisions unchanged") {
  Rng rng(204);
  const size_t L = 120;
  std::vector<double> scores(L), mapped(L);
  std::vector<uint8_t> truth(L);
  for (size_t i = 0; i < L; ++i) {
    scores[i] = std::floor(rng.uniform() * 6.0);
    mapped[i] = std::exp(scores[i]);
    truth[i] = rng.uniform() < 0.3 ? 1 : 0;
  }
  AnomalyReport a = evaluate(scores, truth, ThresholdMode::BestF1);
  AnomalyReport b = evaluate(mapped, truth, ThresholdMode::BestF1);
  CHECK(a.decisions == b.decisions);
  CHECK(a.metrics.f1 == b.metrics.f1);
}

TEST_CASE("report metrics stay internally consistent") {
  Rng rng(205);
  std::vector<double> scores(80);
  std::vector<uint8_t> truth(80);
  for (size_t i = 0; i < 80; ++i) {
    scores[i] = rng.normal();
    truth[i] = rng.uniform() < 0.2 ? 1 : 0;
  }
  AnomalyReport r = evaluate(scores, truth, ThresholdMode::BestF1);
  for (size_t i = 0; i < scores.size(); ++i)
    CHECK(static_cast<bool>(r.decisions[i]) == (scores[i] >= r.threshold));
  const Metrics& m = r.metrics;
  if (m.precision + m.recall > 0.0) {
    CHECK(close(m.f1,
                2.0 * m.precision * m.recall / (m.precision + m.recall),
                1e-12, 1e-12));
  } else {
    CHECK(m.f1 == 0.0);
  }
}

TEST_CASE("average f1 across three reports") {
  std::vector<AnomalyReport> reports = {
      report_with_f1(0.7110), report_with_f1(0.8531), report_with_f1(0.9194)};
  CHECK(close(average_f1(reports), 0.8278, 0.0, 1e-4));
  CHECK(average_f1({report_with_f1(0.42)}) == 0.42);
  CHECK(average_f1({report_with_f1(0.6), report_with_f1(0.6)}) == 0.6);
  CHECK_THROWS_AS(average_f1({}), ContractError);
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

TEST_CASE("scores files round-trip exactly") {
  ScoreMatrix m;
  m.length = 5;
  m.channels = 2;
  m.first_scored = 2;
  m.channel = {0, 0, 0, 0, 1.0 / 3.0, -2.5e-7, 3.14159, 1e16, -0.125, 42.0};
  m.global = {0, 0, 1.0 / 3.0, 3.14159, 42.0};
  const std::string path = temp_path("roundtrip");
  write_scores_file(path, m);
  ScoreMatrix r = read_scores_file(path);
  CHECK(r.length == m.length);
  CHECK(r.channels == m.channels);
  CHECK(r.first_scored == m.first_scored);
  CHECK(r.channel == m.channel);
  CHECK(r.global == m.global);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "# scores-v1 first_scored=2");
  std::getline(in, line);
  CHECK(line == "t,channel_1,channel_2,global");
  std::filesystem::remove(path);
}

TEST_CASE("malformed scores files are rejected with row context") {
  const std::string path = temp_path("malformed");
  auto write_text = [&](const std::string& text) {
    std::ofstream out(path);
    out << text;
  };

  write_text("scores-v1 first_scored=2\nt,channel_1,global\n0,1,1\n");
  CHECK_THROWS_AS(read_scores_file(path), FormatError);

  write_text("# scores-v1\nt,channel_1,global\n0,1,1\n");
  CHECK_THROWS_AS(read_scores_file(path), FormatError);

  write_text("# scores-v1 first_scored=0\n");
  CHECK_THROWS_AS(read_scores_file(path), FormatError);

  write_text("# scores-v1 first_scored=0\nt,global\n0,1\n");
  CHECK_THROWS_AS(read_scores_file(path), FormatError);

  write_text("# scores-v1 first_scored=0\nt,channel_1,global\n0,abc,1\n");
  CHECK_THROWS_WITH_AS(read_scores_file(path), doctest::Contains("data row"),
                       FormatError);

  write_text("# scores-v1 first_scored=0\nt,channel_1,global\n0,1,2,3\n");
  CHECK_THROWS_WITH_AS(read_scores_file(path), doctest::Contains("ragged"),
                       FormatError);

  write_text("# scores-v1 first_scored=0\nt,channel_1,global\n");
  CHECK_THROWS_AS(read_scores_file(path), FormatError);

  write_text("# scores-v1 first_scored=9\nt,channel_1,global\n0,1,1\n");
  CHECK_THROWS_WITH_AS(read_scores_file(path),
                       doctest::Contains("first_scored"), FormatError);

  std::filesystem::remove(path);
}

TEST_CASE("metrics files carry a version header and the four fields") {
  AnomalyReport r;
  r.metrics = {0.5, 0.25, 1.0 / 3.0};
  r.threshold = 1.25;
  const std::string path = temp_path("metrics");
  write_metrics_file(path, r, "best_f1");
  std::ifstream in(path);
  std::string line, body;
  std::getline(in, line);
  CHECK(line == "# metrics-v1");
  std::string all((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  CHECK(all.find("\"precision\": 0.5") != std::string::npos);
  CHECK(all.find("\"recall\": 0.25") != std::string::npos);
  CHECK(all.find("\"f1\": 0.33333333333333331") != std::string::npos);
  CHECK(all.find("\"threshold\": 1.25") != std::string::npos);
  CHECK(all.find("\"mode\": \"best_f1\"") != std::string::npos);
  std::filesystem::remove(path);
}
