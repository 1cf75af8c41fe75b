#include "dpad/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dpad/errors.hpp"

namespace dpad::data {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_cell(const std::string& cell, int64_t row, int64_t col) {
  const char* b = cell.data();
  const char* e = b + cell.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (*(e - 1) == ' ' || *(e - 1) == '\t')) --e;
  if (b == e)
    throw FormatError("missing value at row " + std::to_string(row) +
                      ", column " + std::to_string(col));
  double v = 0.0;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e || !std::isfinite(v))
    throw FormatError("non-numeric value '" + cell + "' at row " +
                      std::to_string(row) + ", column " + std::to_string(col));
  return v;
}

void format_double(std::string& out, double v) {
  char buf[40];
  int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  out.append(buf, static_cast<size_t>(n));
}

}  // namespace

double TimeSeriesDataset::anomaly_ratio() const {
  if (labels.empty() || length == 0) return 0.0;
  int64_t pos = 0;
  for (uint8_t l : labels) pos += l;
  return static_cast<double>(pos) / static_cast<double>(length);
}

TimeSeriesDataset load_csv(const std::string& path, bool has_labels) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");

  std::string line;
  if (!std::getline(in, line))
    throw FormatError("'" + path + "': empty file (header row required)");
  std::vector<std::string> header = split_csv_line(line);

  size_t first_col = 0;
  if (!header.empty() && header[0] == "timestamp") first_col = 1;
  size_t ncols = header.size();
  size_t label_col = ncols;  // one past the end means "none"
  if (has_labels) {
    if (ncols == 0 || header[ncols - 1] != "label")
      throw FormatError("'" + path +
                        "': labeled data requires a final column named "
                        "'label'");
    label_col = ncols - 1;
  }
  if (first_col >= (has_labels ? label_col : ncols))
    throw FormatError("'" + path + "': no data channels in header");

  TimeSeriesDataset ds;
  for (size_t c = first_col; c < (has_labels ? label_col : ncols); ++c)
    ds.channel_names.push_back(header[c]);
  ds.channels = static_cast<int64_t>(ds.channel_names.size());

  int64_t row = 1;  // header was row 0
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") {
      ++row;
      continue;
    }
    std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != ncols)
      throw FormatError("'" + path + "': row " + std::to_string(row) + " has " +
                        std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(ncols));
    for (size_t c = first_col; c < (has_labels ? label_col : ncols); ++c)
      ds.values.push_back(parse_cell(cells[c], row, static_cast<int64_t>(c)));
    if (has_labels) {
      double lv = parse_cell(cells[label_col], row,
                             static_cast<int64_t>(label_col));
      if (lv != 0.0 && lv != 1.0)
        throw FormatError("'" + path + "': label must be 0 or 1 at row " +
                          std::to_string(row));
      ds.labels.push_back(lv != 0.0 ? 1 : 0);
    }
    ++row;
  }
  ds.length = static_cast<int64_t>(ds.values.size()) / ds.channels;
  if (ds.length == 0)
    throw FormatError("'" + path + "': no data rows");
  return ds;
}

void write_csv(const TimeSeriesDataset& ds, const std::string& path,
               bool include_labels) {
  if (include_labels && !ds.has_labels())
    throw ContractError("dataset has no labels to write");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  std::string buf;
  for (int64_t n = 0; n < ds.channels; ++n) {
    if (n) buf += ',';
    buf += ds.channel_names.empty() ? ("ch_" + std::to_string(n))
                                    : ds.channel_names[static_cast<size_t>(n)];
  }
  if (include_labels) buf += ",label";
  buf += '\n';
  for (int64_t t = 0; t < ds.length; ++t) {
    for (int64_t n = 0; n < ds.channels; ++n) {
      if (n) buf += ',';
      format_double(buf, ds.at(t, n));
    }
    if (include_labels) {
      buf += ',';
      buf += ds.labels[static_cast<size_t>(t)] ? '1' : '0';
    }
    buf += '\n';
    if (buf.size() > (1u << 20)) {
      out << buf;
      buf.clear();
    }
  }
  out << buf;
  if (!out) throw IoError("failed writing '" + path + "'");
}

StandardizationStats compute_stats(const TimeSeriesDataset& train) {
  if (train.length == 0 || train.channels == 0)
    throw ContractError("cannot compute statistics of an empty dataset");
  StandardizationStats st;
  st.mean.assign(static_cast<size_t>(train.channels), 0.0);
  st.scale.assign(static_cast<size_t>(train.channels), 1.0);
  st.constant.assign(static_cast<size_t>(train.channels), 0);
  for (int64_t t = 0; t < train.length; ++t)
    for (int64_t n = 0; n < train.channels; ++n)
      st.mean[static_cast<size_t>(n)] += train.at(t, n);
  for (auto& m : st.mean) m /= static_cast<double>(train.length);
  std::vector<double> var(static_cast<size_t>(train.channels), 0.0);
  for (int64_t t = 0; t < train.length; ++t)
    for (int64_t n = 0; n < train.channels; ++n) {
      double d = train.at(t, n) - st.mean[static_cast<size_t>(n)];
      var[static_cast<size_t>(n)] += d * d;
    }
  for (int64_t n = 0; n < train.channels; ++n) {
    double sd = std::sqrt(var[static_cast<size_t>(n)] /
                          static_cast<double>(train.length));
    if (sd < 1e-8) {
      st.constant[static_cast<size_t>(n)] = 1;
      st.scale[static_cast<size_t>(n)] = 1.0;
    } else {
      st.scale[static_cast<size_t>(n)] = sd;
    }
  }
  return st;
}

void apply_stats(TimeSeriesDataset& ds, const StandardizationStats& stats) {
  if (static_cast<int64_t>(stats.mean.size()) != ds.channels)
    throw DimensionError("statistics cover " +
                         std::to_string(stats.mean.size()) +
                         " channels, dataset has " +
                         std::to_string(ds.channels));
  for (int64_t t = 0; t < ds.length; ++t)
    for (int64_t n = 0; n < ds.channels; ++n)
      ds.at(t, n) = (ds.at(t, n) - stats.mean[static_cast<size_t>(n)]) /
                    stats.scale[static_cast<size_t>(n)];
  ds.stats = stats;
}

void standardize(TimeSeriesDataset& train,
                 const std::vector<TimeSeriesDataset*>& others) {
  if (train.has_labels())
    for (uint8_t l : train.labels)
      if (l)
        throw ContractError(
            "training data must not contain anomalous labels");
  StandardizationStats st = compute_stats(train);
  apply_stats(train, st);
  for (TimeSeriesDataset* d : others) apply_stats(*d, st);
}

void destandardize(TimeSeriesDataset& ds) {
  if (!ds.stats)
    throw ContractError("dataset carries no standardization statistics");
  const StandardizationStats& st = *ds.stats;
  for (int64_t t = 0; t < ds.length; ++t)
    for (int64_t n = 0; n < ds.channels; ++n)
      ds.at(t, n) = ds.at(t, n) * st.scale[static_cast<size_t>(n)] +
                    st.mean[static_cast<size_t>(n)];
  ds.stats.reset();
}

namespace {

Tensor gather_span(const TimeSeriesDataset& ds, int64_t start, int64_t len) {
  Tensor out = Tensor::zeros({ds.channels, len}, DType::F64);
  double* p = out.impl->values<double>().data();
  for (int64_t n = 0; n < ds.channels; ++n)
    for (int64_t t = 0; t < len; ++t) p[n * len + t] = ds.at(start + t, n);
  return out;
}

}  // namespace

Tensor TrainingSample::history_matrix() const {
  return gather_span(*ds, origin - history, history);
}
Tensor TrainingSample::window_matrix() const {
  return gather_span(*ds, origin, window);
}
Tensor TrainingSample::target_matrix() const {
  return gather_span(*ds, origin + window, window);
}

std::vector<TrainingSample> make_samples(const TimeSeriesDataset& ds,
                                         int64_t w, int64_t h, int64_t s) {
  if (w < 1 || h < 1 || s < 1)
    throw ParameterError("window, history, and stride must be positive");
  if (h % w != 0)
    throw ConfigError("history length " + std::to_string(h) +
                      " must be a multiple of window length " +
                      std::to_string(w));
  const int64_t min_len = h + 2 * w;
  if (ds.length < min_len)
    throw InsufficientDataError(
        "series length " + std::to_string(ds.length) +
        " is below the minimum " + std::to_string(min_len) +
        " (history + 2 x window) required for one sample");
  std::vector<TrainingSample> out;
  for (int64_t i = h; i + 2 * w <= ds.length; i += s)
    out.push_back(TrainingSample{&ds, i, w, h});
  return out;
}

SampleBatch make_batch(const TimeSeriesDataset& ds,
                       const std::vector<int64_t>& origins, int64_t w,
                       int64_t h, DType dt) {
  const int64_t B = static_cast<int64_t>(origins.size());
  const int64_t N = ds.channels;
  if (B == 0) throw ContractError("empty batch");
  SampleBatch batch;
  batch.W = Tensor::zeros({B, N, w}, dt);
  batch.P = Tensor::zeros({B, N, h}, dt);
  batch.Y = Tensor::zeros({B, N, w}, dt);
  auto fill = [&](Tensor& t, int64_t start_off, int64_t len) {
    for (int64_t b = 0; b < B; ++b) {
      const int64_t start = origins[static_cast<size_t>(b)] + start_off;
      if (dt == DType::F64) {
        double* p = t.impl->values<double>().data() + b * N * len;
        for (int64_t n = 0; n < N; ++n)
          for (int64_t k = 0; k < len; ++k)
            p[n * len + k] = ds.at(start + k, n);
      } else {
        float* p = t.impl->values<float>().data() + b * N * len;
        for (int64_t n = 0; n < N; ++n)
          for (int64_t k = 0; k < len; ++k)
            p[n * len + k] = static_cast<float>(ds.at(start + k, n));
      }
    }
  };
  fill(batch.P, -h, h);
  fill(batch.W, 0, w);
  fill(batch.Y, w, w);
  return batch;
}

TimeSeriesDataset inject_noise(const TimeSeriesDataset& ds, double ratio,
                               Rng& rng) {
  if (ratio < 0.0)
    throw ParameterError("noise ratio must be non-negative, got " +
                         std::to_string(ratio));
  TimeSeriesDataset out = ds;
  if (ratio == 0.0) return out;
  std::vector<double> sd(static_cast<size_t>(ds.channels));
  {
    StandardizationStats st = compute_stats(ds);
    for (int64_t n = 0; n < ds.channels; ++n)
      sd[static_cast<size_t>(n)] =
          st.constant[static_cast<size_t>(n)] ? 0.0
                                              : st.scale[static_cast<size_t>(n)];
  }
  for (int64_t t = 0; t < ds.length; ++t)
    for (int64_t n = 0; n < ds.channels; ++n)
      out.at(t, n) += ratio * sd[static_cast<size_t>(n)] * rng.normal();
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

namespace {

struct Driver {
  std::vector<double> series;
};

// Latent drivers: alternating sinusoids (random period/phase) and AR(1)
// processes, all with marginal scale around 0.7-1.
std::vector<Driver> make_drivers(int64_t count, int64_t length, Rng& rng) {
  std::vector<Driver> drivers(static_cast<size_t>(count));
  for (int64_t d = 0; d < count; ++d) {
    Driver& dr = drivers[static_cast<size_t>(d)];
    dr.series.resize(static_cast<size_t>(length));
    if (d % 2 == 0) {
      const double period = 50.0 + 250.0 * rng.uniform();
      const double phase = 2.0 * M_PI * rng.uniform();
      const double harmonic = 0.3 * rng.uniform();
      for (int64_t t = 0; t < length; ++t) {
        double x = 2.0 * M_PI * static_cast<double>(t) / period + phase;
        dr.series[static_cast<size_t>(t)] =
            0.7 * (std::sin(x) + harmonic * std::sin(3.0 * x));
      }
    } else {
      const double phi = 0.95;
      const double innov = 0.22;  // stationary std ~0.7
      double x = 0.0;
      for (int64_t t = -200; t < length; ++t) {
        x = phi * x + innov * rng.normal();
        if (t >= 0) dr.series[static_cast<size_t>(t)] = x;
      }
    }
  }
  return drivers;
}

struct MixRow {
  std::vector<int64_t> idx;
  std::vector<double> w;
  double scale_sq() const {
    double s = 0.0;
    for (double v : w) s += v * v;
    return s;
  }
};

MixRow random_mix_row(int64_t drivers, Rng& rng) {
  MixRow row;
  const int64_t k = 1 + static_cast<int64_t>(rng.next_index(3));
  std::vector<int64_t> pool(static_cast<size_t>(drivers));
  for (int64_t d = 0; d < drivers; ++d) pool[static_cast<size_t>(d)] = d;
  for (int64_t j = 0; j < k && !pool.empty(); ++j) {
    const size_t pick = rng.next_index(pool.size());
    row.idx.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<ptrdiff_t>(pick));
    const double sign = rng.next_index(2) ? 1.0 : -1.0;
    row.w.push_back(sign * (0.5 + rng.uniform()));
  }
  return row;
}

}  // namespace

SyntheticResult generate_synthetic(int64_t n_channels, int64_t length,
                                   const SyntheticSpec& spec, Rng& rng) {
  if (n_channels < 2)
    throw ParameterError("synthetic generation requires at least 2 channels");
  const int64_t min_len = 10 * (spec.history + 2 * spec.window);
  if (length < min_len)
    throw ParameterError("synthetic length " + std::to_string(length) +
                         " is below the minimum " + std::to_string(min_len));
  if (spec.anomaly_ratio < 0.0 || spec.anomaly_ratio >= 0.5)
    throw ParameterError("anomaly ratio must lie in [0, 0.5), got " +
                         std::to_string(spec.anomaly_ratio));
  if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0)
    throw ParameterError("train fraction must lie in (0, 1)");
  if (spec.min_segment < 1 || spec.max_segment < spec.min_segment)
    throw ParameterError("segment bounds must satisfy 1 <= min <= max");
  for (const std::string& t : spec.anomaly_types)
    if (t != "spike" && t != "level_shift" && t != "correlation_break")
      throw ParameterError("unknown anomaly type '" + t + "'");
  if (spec.anomaly_ratio > 0.0 && spec.anomaly_types.empty())
    throw ParameterError("anomaly ratio > 0 requires at least one type");

  const int64_t train_len = static_cast<int64_t>(
      std::llround(spec.train_fraction * static_cast<double>(length)));
  const int64_t test_len = length - train_len;
  if (train_len < min_len || test_len < spec.history + 2 * spec.window)
    throw ParameterError("train/test split leaves a side too short");

  std::vector<Driver> drivers = make_drivers(spec.drivers, length, rng);
  std::vector<MixRow> rows(static_cast<size_t>(n_channels));
  for (int64_t n = 0; n < n_channels; ++n)
    rows[static_cast<size_t>(n)] = random_mix_row(spec.drivers, rng);

  std::vector<double> all(static_cast<size_t>(length * n_channels));
  for (int64_t t = 0; t < length; ++t)
    for (int64_t n = 0; n < n_channels; ++n) {
      const MixRow& row = rows[static_cast<size_t>(n)];
      double v = 0.0;
      for (size_t j = 0; j < row.idx.size(); ++j)
        v += row.w[j] *
             drivers[static_cast<size_t>(row.idx[j])].series[static_cast<size_t>(t)];
      all[static_cast<size_t>(t * n_channels + n)] =
          v + spec.noise_std * rng.normal();
    }

  SyntheticResult res;
  res.driver_count = spec.drivers;
  res.mixing.assign(static_cast<size_t>(n_channels * spec.drivers), 0.0);
  for (int64_t n = 0; n < n_channels; ++n) {
    const MixRow& row = rows[static_cast<size_t>(n)];
    for (size_t j = 0; j < row.idx.size(); ++j)
      res.mixing[static_cast<size_t>(n * spec.drivers + row.idx[j])] = row.w[j];
  }

  auto name_of = [](int64_t n) { return "ch_" + std::to_string(n); };
  res.train.length = train_len;
  res.train.channels = n_channels;
  res.train.values.assign(all.begin(), all.begin() + train_len * n_channels);
  res.test.length = test_len;
  res.test.channels = n_channels;
  res.test.values.assign(all.begin() + train_len * n_channels, all.end());
  res.test.labels.assign(static_cast<size_t>(test_len), 0);
  for (int64_t n = 0; n < n_channels; ++n) {
    res.train.channel_names.push_back(name_of(n));
    res.test.channel_names.push_back(name_of(n));
  }

  // Per-channel scale measured on the clean training split.
  std::vector<double> chan_sd(static_cast<size_t>(n_channels));
  {
    StandardizationStats st = compute_stats(res.train);
    for (int64_t n = 0; n < n_channels; ++n)
      chan_sd[static_cast<size_t>(n)] = st.scale[static_cast<size_t>(n)];
  }

  // --- anomaly segment placement over the test split -----------------------
  const int64_t budget = static_cast<int64_t>(
      std::llround(spec.anomaly_ratio * static_cast<double>(test_len)));
  if (budget > 0) {
    // Correlation breaks get double weight in the rotation: they stress
    // cross-channel structure, which marginal per-channel detectors miss.
    std::vector<std::string> pattern;
    for (const std::string& t : spec.anomaly_types) {
      pattern.push_back(t);
      if (t == "correlation_break") pattern.push_back(t);
    }
    // Interleave so consecutive segments differ when possible.
    std::sort(pattern.begin(), pattern.end());
    std::vector<std::string> rotation;
    {
      std::vector<std::string> uniq;
      for (const std::string& t : pattern)
        if (uniq.empty() || uniq.back() != t) uniq.push_back(t);
      size_t longest = 0;
      for (const std::string& u : uniq) {
        size_t c = static_cast<size_t>(
            std::count(pattern.begin(), pattern.end(), u));
        longest = std::max(longest, c);
      }
      for (size_t r = 0; r < longest; ++r)
        for (const std::string& u : uniq)
          if (static_cast<size_t>(std::count(pattern.begin(), pattern.end(),
                                             u)) > r)
            rotation.push_back(u);
    }

    const int64_t earliest = spec.history + 2 * spec.window + 5;
    const int64_t latest = test_len - spec.window;
    const double mean_seg =
        0.5 * static_cast<double>(spec.min_segment + spec.max_segment);
    const int64_t expected =
        std::max<int64_t>(1, static_cast<int64_t>(budget / mean_seg));
    const int64_t usable = std::max<int64_t>(1, latest - earliest - budget);
    const int64_t mean_gap = std::max<int64_t>(
        spec.window, usable / (expected + 1));

    int64_t placed = 0;
    int64_t pos = earliest;
    size_t type_i = 0;
    while (placed < budget) {
      int64_t len = spec.min_segment +
                    static_cast<int64_t>(rng.next_index(static_cast<size_t>(
                        spec.max_segment - spec.min_segment + 1)));
      if (placed + len > budget) len = budget - placed;
      if (len < 1) break;
      const int64_t gap =
          mean_gap / 2 +
          static_cast<int64_t>(rng.next_index(static_cast<size_t>(mean_gap)));
      const int64_t start = pos + gap;
      if (start + len > latest) break;
      res.segments.push_back(
          AnomalySegment{start, start + len, rotation[type_i % rotation.size()]});
      ++type_i;
      pos = start + len;
      placed += len;
    }

    for (const AnomalySegment& seg : res.segments) {
      for (int64_t t = seg.start; t < seg.end; ++t)
        res.test.labels[static_cast<size_t>(t)] = 1;
      if (seg.type == "spike") {
        const int64_t m = 3 + static_cast<int64_t>(rng.next_index(8));
        std::vector<int64_t> chans;
        for (int64_t j = 0; j < m; ++j)
          chans.push_back(
              static_cast<int64_t>(rng.next_index(static_cast<size_t>(n_channels))));
        for (int64_t t = seg.start; t < seg.end; ++t)
          for (int64_t n : chans)
            if (rng.uniform() < 0.35) {
              const double sign = rng.next_index(2) ? 1.0 : -1.0;
              res.test.at(t, n) += sign * (3.0 + 3.0 * rng.uniform()) *
                                   chan_sd[static_cast<size_t>(n)];
            }
      } else if (seg.type == "level_shift") {
        const int64_t m = 5 + static_cast<int64_t>(rng.next_index(10));
        for (int64_t j = 0; j < m; ++j) {
          const int64_t n = static_cast<int64_t>(
              rng.next_index(static_cast<size_t>(n_channels)));
          const double sign = rng.next_index(2) ? 1.0 : -1.0;
          const double off =
              sign * (1.5 + 1.5 * rng.uniform()) * chan_sd[static_cast<size_t>(n)];
          for (int64_t t = seg.start; t < seg.end; ++t) res.test.at(t, n) += off;
        }
      } else {  // correlation_break: re-mix channels, keep marginal scale
        const int64_t m = 8 + static_cast<int64_t>(rng.next_index(12));
        for (int64_t j = 0; j < m; ++j) {
          const int64_t n = static_cast<int64_t>(
              rng.next_index(static_cast<size_t>(n_channels)));
          MixRow alt = random_mix_row(spec.drivers, rng);
          const double factor = std::sqrt(
              rows[static_cast<size_t>(n)].scale_sq() / alt.scale_sq());
          for (int64_t t = seg.start; t < seg.end; ++t) {
            double v = 0.0;
            for (size_t q = 0; q < alt.idx.size(); ++q)
              v += alt.w[q] * drivers[static_cast<size_t>(alt.idx[q])]
                                  .series[static_cast<size_t>(train_len + t)];
            res.test.at(t, n) = factor * v + spec.noise_std * rng.normal();
          }
        }
      }
    }
  }
  return res;
}

}  // namespace dpad::data
