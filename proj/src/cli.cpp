#include "dpad/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "dpad/checkpoint.hpp"
#include "dpad/data.hpp"
#include "dpad/errors.hpp"
#include "dpad/training.hpp"

namespace dpad::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void append_double(std::string& out, double v) {
  char buf[40];
  int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  out.append(buf, static_cast<size_t>(n));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// Every command leaves a resolved snapshot behind; rerunning with it as
// --config reproduces the outputs.
fs::path prepare_output(const RunConfig& cfg) {
  fs::path out(cfg.output_dir);
  fs::create_directories(out);
  save_config((out / "config.json").string(), cfg);
  return out;
}

data::TimeSeriesDataset load_train(const RunConfig& cfg) {
  if (cfg.data.train_csv.empty())
    throw ConfigError("config key 'data.train_csv' must be set for this command");
  return data::load_csv(cfg.data.train_csv, false);
}

data::TimeSeriesDataset load_test(const RunConfig& cfg) {
  if (cfg.data.test_csv.empty())
    throw ConfigError("config key 'data.test_csv' must be set for this command");
  return data::load_csv(cfg.data.test_csv, cfg.data.test_has_labels);
}

ModelConfig resolved_model(const RunConfig& cfg, int64_t channels) {
  ModelConfig mc = cfg.model;
  if (mc.n_channels == 0) {
    mc.n_channels = channels;
  } else if (mc.n_channels != channels) {
    throw ConfigError("config key 'model.channels' is " +
                      std::to_string(mc.n_channels) + " but the data has " +
                      std::to_string(channels) + " channels");
  }
  mc.validate();
  return mc;
}

data::TimeSeriesDataset tail_slice(const data::TimeSeriesDataset& ds,
                                   int64_t start) {
  data::TimeSeriesDataset sub;
  sub.length = ds.length - start;
  sub.channels = ds.channels;
  sub.channel_names = ds.channel_names;
  sub.values.assign(ds.values.begin() + static_cast<ptrdiff_t>(start * ds.channels),
                    ds.values.end());
  return sub;
}

std::vector<double> entry_vector(const std::vector<CheckpointEntry>& entries,
                                 const std::string& name) {
  return find_entry(entries, name).data;
}

// A checkpoint argument is either one file or a directory containing
// seed-namespaced subdirectories with checkpoint.bin files.
std::vector<fs::path> expand_checkpoints(const std::string& given) {
  fs::path p(given);
  std::vector<fs::path> found;
  if (fs::is_regular_file(p)) {
    found.push_back(p);
  } else if (fs::is_directory(p)) {
    if (fs::is_regular_file(p / "checkpoint.bin"))
      found.push_back(p / "checkpoint.bin");
    for (const auto& e : fs::directory_iterator(p))
      if (e.is_directory() && fs::is_regular_file(e.path() / "checkpoint.bin"))
        found.push_back(e.path() / "checkpoint.bin");
    std::sort(found.begin(), found.end());
  }
  if (found.empty())
    throw IoError("no checkpoints found at '" + given + "'");
  return found;
}

std::string checkpoint_tag(const fs::path& cp) {
  const std::string parent = cp.parent_path().filename().string();
  if (!parent.empty() && parent != "." && parent != "..") return parent;
  return cp.stem().string();
}

struct LoadedCheckpoint {
  DualPathModel model;
  data::StandardizationStats stats;
  scoring::RobustStats calibration;
};

LoadedCheckpoint load_checkpoint_for_scoring(
    const RunConfig& cfg, const std::vector<CheckpointEntry>& entries,
    int64_t test_channels) {
  const std::vector<double> mean = entry_vector(entries, "stats.mean");
  const int64_t n = cfg.model.n_channels > 0
                        ? cfg.model.n_channels
                        : static_cast<int64_t>(mean.size());
  if (test_channels != n)
    throw DimensionError("test series has " + std::to_string(test_channels) +
                         " channels but the checkpoint was trained with " +
                         std::to_string(n));
  ModelConfig mc = resolved_model(cfg, n);
  LoadedCheckpoint lc{DualPathModel(mc), {}, {}};
  lc.model.load_state_entries(entries);

  lc.stats.mean = mean;
  lc.stats.scale = entry_vector(entries, "stats.scale");
  for (double c : entry_vector(entries, "stats.constant"))
    lc.stats.constant.push_back(c != 0.0 ? 1 : 0);
  lc.calibration.median = entry_vector(entries, "stats.score_median");
  lc.calibration.iqr = entry_vector(entries, "stats.score_iqr");
  return lc;
}

scoring::ScoreMatrix score_series(const RunConfig& cfg,
                                  const LoadedCheckpoint& lc,
                                  data::TimeSeriesDataset test) {
  data::apply_stats(test, lc.stats);
  scoring::ScoreMatrix m =
      scoring::raw_scores(lc.model, test, cfg.train.batch);
  scoring::standardize_scores(m, lc.calibration);
  return m;
}

void write_history(const fs::path& path, const train::FitResult& res) {
  std::string buf = "# history-v1\nepoch,train_loss,val_loss,val_nll,lr\n";
  for (const train::EpochStats& e : res.history) {
    buf += std::to_string(e.epoch);
    buf += ',';
    append_double(buf, e.train_loss);
    buf += ',';
    append_double(buf, e.val_loss);
    buf += ',';
    append_double(buf, e.val_nll);
    buf += ',';
    append_double(buf, e.lr);
    buf += '\n';
  }
  write_text(path, buf);
}

}  // namespace

void command_generate_synthetic(const RunConfig& cfg) {
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  const SyntheticConfig& syn = cfg.data.synthetic;
  data::SyntheticSpec spec = syn.spec;
  spec.window = cfg.model.window;
  spec.history = cfg.model.history;
  Rng rng(syn.seed);
  data::SyntheticResult res =
      data::generate_synthetic(syn.channels, syn.length, spec, rng);

  data::write_csv(res.train, (out / "train.csv").string(), false);
  data::write_csv(res.test, (out / "test.csv").string(), true);
  std::string seg = "# segments-v1\nstart,end,type\n";
  for (const data::AnomalySegment& s : res.segments)
    seg += std::to_string(s.start) + "," + std::to_string(s.end) + "," +
           s.type + "\n";
  write_text(out / "segments.csv", seg);

  // The snapshot points at the files just written, so it trains directly.
  RunConfig snap = cfg;
  snap.data.train_csv = (out / "train.csv").string();
  snap.data.test_csv = (out / "test.csv").string();
  save_config((out / "config.json").string(), snap);
  std::printf("wrote %s (train %lld x %lld, test %lld x %lld, %zu segments)\n",
              out.string().c_str(), static_cast<long long>(res.train.length),
              static_cast<long long>(res.train.channels),
              static_cast<long long>(res.test.length),
              static_cast<long long>(res.test.channels), res.segments.size());
}

void command_train(const RunConfig& cfg) {
  const fs::path out = prepare_output(cfg);
  data::TimeSeriesDataset ds = load_train(cfg);
  const ModelConfig mc = resolved_model(cfg, ds.channels);
  data::standardize(ds, {});
  auto samples =
      data::make_samples(ds, mc.window, mc.history, cfg.data.stride);

  json summary_runs = json::array();
  std::vector<double> best_losses;
  for (uint64_t seed : cfg.seeds) {
    const fs::path dir = out / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    DualPathModel model(mc, seed);
    train::TrainConfig tc = cfg.train;
    tc.seed = seed;
    train::ProgressFn progress;
    if (tc.verbose) {
      progress = [seed](const train::EpochStats& e) {
        std::printf("seed %llu epoch %d train %.6f val %.6f lr %.3g\n",
                    static_cast<unsigned long long>(seed), e.epoch,
                    e.train_loss, e.val_loss, e.lr);
      };
    }
    train::FitResult res = train::fit(model, samples, tc, progress);
    write_history(dir / "history.csv", res);

    // Score calibration: dense errors over the validation tail (the same
    // trailing split fit held out), summarized per channel.
    const size_t n_val = std::max<size_t>(
        1, static_cast<size_t>(cfg.train.val_fraction *
                               static_cast<double>(samples.size())));
    const int64_t first_val_origin = samples[samples.size() - n_val].origin;
    data::TimeSeriesDataset tail =
        tail_slice(ds, first_val_origin - mc.history);
    scoring::ScoreMatrix val_scores =
        scoring::raw_scores(model, tail, cfg.train.batch);
    scoring::RobustStats calib = scoring::robust_stats(val_scores);

    std::vector<CheckpointEntry> entries = model.state_entries();
    const data::StandardizationStats& st = *ds.stats;
    const Shape per_channel{ds.channels};
    entries.push_back({"stats.mean", per_channel, st.mean});
    entries.push_back({"stats.scale", per_channel, st.scale});
    std::vector<double> constant(st.constant.begin(), st.constant.end());
    entries.push_back({"stats.constant", per_channel, constant});
    entries.push_back({"stats.score_median", per_channel, calib.median});
    entries.push_back({"stats.score_iqr", per_channel, calib.iqr});
    write_checkpoint((dir / "checkpoint.bin").string(), entries);

    summary_runs.push_back({{"seed", seed},
                            {"best_epoch", res.best_epoch},
                            {"best_val_loss", res.best_val_loss},
                            {"epochs_run", res.history.size()},
                            {"early_stopped", res.early_stopped}});
    best_losses.push_back(res.best_val_loss);
    std::printf("seed %llu: best val loss %.6f at epoch %d (%zu epochs)\n",
                static_cast<unsigned long long>(seed), res.best_val_loss,
                res.best_epoch, res.history.size());
  }

  double mean = 0.0;
  for (double v : best_losses) mean += v;
  mean /= static_cast<double>(best_losses.size());
  double var = 0.0;
  for (double v : best_losses) var += (v - mean) * (v - mean);
  var /= static_cast<double>(best_losses.size());
  json summary = {{"runs", summary_runs},
                  {"mean_best_val_loss", mean},
                  {"std_best_val_loss", std::sqrt(var)}};
  write_text(out / "summary.json", "# summary-v1\n" + summary.dump(2) + "\n");
}

void command_score(const RunConfig& cfg, const std::string& checkpoint) {
  const fs::path out = prepare_output(cfg);
  const data::TimeSeriesDataset test = load_test(cfg);
  for (const fs::path& cp : expand_checkpoints(checkpoint)) {
    const auto entries = read_checkpoint(cp.string());
    LoadedCheckpoint lc =
        load_checkpoint_for_scoring(cfg, entries, test.channels);
    scoring::ScoreMatrix m = score_series(cfg, lc, test);
    const fs::path dir = out / checkpoint_tag(cp);
    fs::create_directories(dir);
    scoring::write_scores_file((dir / "scores.csv").string(), m);
    std::printf("%s: scored %lld timesteps\n", checkpoint_tag(cp).c_str(),
                static_cast<long long>(m.scored_count()));
  }
}

void command_eval(const RunConfig& cfg, const std::string& checkpoint,
                  scoring::ThresholdMode mode, double threshold) {
  const fs::path out = prepare_output(cfg);
  const data::TimeSeriesDataset test = load_test(cfg);
  if (!test.has_labels())
    throw ContractError("evaluation requires labeled test data");
  const std::string mode_name =
      mode == scoring::ThresholdMode::BestF1 ? "best_f1" : "fixed";

  double sum_p = 0.0, sum_r = 0.0, sum_f1 = 0.0, sum_thr = 0.0;
  int64_t count = 0;
  for (const fs::path& cp : expand_checkpoints(checkpoint)) {
    const auto entries = read_checkpoint(cp.string());
    LoadedCheckpoint lc =
        load_checkpoint_for_scoring(cfg, entries, test.channels);
    scoring::ScoreMatrix m = score_series(cfg, lc, test);
    scoring::AnomalyReport report =
        scoring::evaluate(m.scored_global(), m.scored_slice(test.labels),
                          mode, threshold);
    const fs::path dir = out / checkpoint_tag(cp);
    fs::create_directories(dir);
    scoring::write_scores_file((dir / "scores.csv").string(), m);
    scoring::write_metrics_file((dir / "metrics.json").string(), report,
                                mode_name);
    std::printf("%s: precision %.4f recall %.4f f1 %.4f (threshold %.6g)\n",
                checkpoint_tag(cp).c_str(), report.metrics.precision,
                report.metrics.recall, report.metrics.f1, report.threshold);
    sum_p += report.metrics.precision;
    sum_r += report.metrics.recall;
    sum_f1 += report.metrics.f1;
    sum_thr += report.threshold;
    ++count;
  }

  const double k = static_cast<double>(count);
  json avg = {{"precision", sum_p / k}, {"recall", sum_r / k},
              {"f1", sum_f1 / k},       {"threshold", sum_thr / k},
              {"mode", mode_name},      {"checkpoints", count}};
  write_text(out / "metrics_avg.json", "# metrics-avg-v1\n" + avg.dump(2) + "\n");
  std::printf("average over %lld checkpoints: f1 %.4f\n",
              static_cast<long long>(count), sum_f1 / k);
}

void command_export_graphs(const RunConfig& cfg, const std::string& checkpoint,
                           const std::string& selector) {
  const fs::path out = prepare_output(cfg);
  data::TimeSeriesDataset test = load_test(cfg);
  const fs::path cp = expand_checkpoints(checkpoint).front();
  const auto entries = read_checkpoint(cp.string());
  LoadedCheckpoint lc =
      load_checkpoint_for_scoring(cfg, entries, test.channels);
  const ModelConfig& mc = lc.model.config();
  const int64_t w = mc.window, h = mc.history, N = mc.n_channels;
  const int64_t last_origin = test.length - 2 * w;

  // Resolve the selector to one window origin.
  int64_t origin = -1;
  std::string tag = selector;
  if (selector == "anomalous") {
    if (!test.has_labels())
      throw ContractError("selector 'anomalous' needs labeled test data");
    for (int64_t o = h; o <= last_origin && origin < 0; ++o)
      for (int64_t t = o + w; t < o + 2 * w; ++t)
        if (test.labels[static_cast<size_t>(t)]) {
          origin = o;
          break;
        }
    if (origin < 0)
      throw ContractError("selector 'anomalous' matched no sample");
  } else if (selector == "normal") {
    for (int64_t o = h; o <= last_origin && origin < 0; ++o) {
      bool clean = true;
      if (test.has_labels())
        for (int64_t t = o - h; t < o + 2 * w && clean; ++t)
          clean = !test.labels[static_cast<size_t>(t)];
      if (clean) origin = o;
    }
    if (origin < 0) throw ContractError("selector 'normal' matched no sample");
  } else {
    int64_t o = 0;
    auto [ptr, ec] = std::from_chars(selector.data(),
                                     selector.data() + selector.size(), o);
    if (ec != std::errc() || ptr != selector.data() + selector.size())
      throw ConfigError("selector must be 'normal', 'anomalous', or a "
                        "window-origin timestep, got '" + selector + "'");
    if (o < h || o > last_origin)
      throw ContractError("origin " + std::to_string(o) +
                          " cannot form a sample (valid range " +
                          std::to_string(h) + ".." +
                          std::to_string(last_origin) + ")");
    origin = o;
    tag = "t" + std::to_string(o);
  }

  data::apply_stats(test, lc.stats);
  data::SampleBatch b = data::make_batch(test, {origin}, w, h, mc.dtype);
  NoGrad ng;
  ModelOutput mo =
      lc.model.forward(b.W, b.P, SamplingMode::Deterministic, nullptr);

  const fs::path dir = out / "graphs";
  fs::create_directories(dir);
  for (size_t head = 0; head < mo.edge_probs.size(); ++head) {
    std::string buf = "# graph-edges-v1\nsource,target,probability,sampled\n";
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < N; ++j) {
        if (i == j) continue;
        buf += std::to_string(i);
        buf += ',';
        buf += std::to_string(j);
        buf += ',';
        append_double(buf, mo.edge_probs[head].at({0, i, j}));
        buf += ',';
        buf += mo.adjacency[head].at({0, i, j}) != 0.0 ? '1' : '0';
        buf += '\n';
      }
    write_text(dir / (tag + "_head" + std::to_string(head) + "_edges.csv"),
               buf);
  }

  if (mo.affinity.defined()) {
    const int64_t T = mo.affinity.dim(1);
    std::string buf = "# affinity-v1\n";
    for (int64_t i = 0; i < T; ++i) {
      for (int64_t j = 0; j < T; ++j) {
        if (j) buf += ',';
        append_double(buf, mo.affinity.at({0, i, j}));
      }
      buf += '\n';
    }
    write_text(dir / (tag + "_affinity.csv"), buf);
  }

  std::string buf = "# channel-scores-v1\nchannel";
  for (int64_t k = 0; k < w; ++k)
    buf += ",t" + std::to_string(origin + w + k);
  buf += '\n';
  for (int64_t n = 0; n < N; ++n) {
    buf += test.channel_names.empty() ? "channel_" + std::to_string(n + 1)
                                      : test.channel_names[static_cast<size_t>(n)];
    for (int64_t k = 0; k < w; ++k) {
      const double err = mo.predictions.at({0, n, k}) - b.Y.at({0, n, k});
      buf += ',';
      append_double(buf, err * err);
    }
    buf += '\n';
  }
  write_text(dir / (tag + "_channel_scores.csv"), buf);
  std::printf("exported %zu head graphs at origin %lld to %s\n",
              mo.edge_probs.size(), static_cast<long long>(origin),
              dir.string().c_str());
}

void command_inject_noise(const RunConfig& cfg, double ratio, uint64_t seed,
                          const std::string& out_file) {
  prepare_output(cfg);
  data::TimeSeriesDataset ds = load_train(cfg);
  Rng rng(seed);
  data::TimeSeriesDataset noisy = data::inject_noise(ds, ratio, rng);
  data::write_csv(noisy, out_file, noisy.has_labels());
  std::printf("wrote %s (ratio %.3g, seed %llu)\n", out_file.c_str(), ratio,
              static_cast<unsigned long long>(seed));
}

}  // namespace dpad::cli
