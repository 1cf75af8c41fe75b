#include "dpad/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dpad/errors.hpp"

namespace dpad::scoring {

std::vector<double> ScoreMatrix::scored_global() const {
  return std::vector<double>(
      global.begin() + static_cast<ptrdiff_t>(first_scored), global.end());
}

ScoreMatrix raw_scores(const DualPathModel& model,
                       const data::TimeSeriesDataset& ds, int64_t batch) {
  const ModelConfig& cfg = model.config();
  if (ds.channels != cfg.n_channels)
    throw DimensionError("series has " + std::to_string(ds.channels) +
                         " channels, model expects " +
                         std::to_string(cfg.n_channels));
  bool any_nonzero = false;
  for (const auto& [name, p] : model.parameters()) {
    for (double v : p.to_vector())
      if (v != 0.0) {
        any_nonzero = true;
        break;
      }
    if (any_nonzero) break;
  }
  if (!any_nonzero)
    throw ContractError(
        "model parameters are all zero; load or train a model before scoring");

  const int64_t w = cfg.window, h = cfg.history, N = cfg.n_channels;
  auto samples = data::make_samples(ds, w, h, 1);  // dense stride-1 coverage

  ScoreMatrix m;
  m.length = ds.length;
  m.channels = N;
  m.first_scored = h + w;
  m.channel.assign(static_cast<size_t>(ds.length * N), 0.0);
  std::vector<double> counts(static_cast<size_t>(ds.length * N), 0.0);

  NoGrad ng;
  for (size_t start = 0; start < samples.size();
       start += static_cast<size_t>(batch)) {
    const size_t bsz =
        std::min(static_cast<size_t>(batch), samples.size() - start);
    std::vector<int64_t> origins(bsz);
    for (size_t i = 0; i < bsz; ++i) origins[i] = samples[start + i].origin;
    data::SampleBatch b = data::make_batch(ds, origins, w, h, cfg.dtype);
    ModelOutput out =
        model.forward(b.W, b.P, SamplingMode::Deterministic, nullptr);
    Tensor err = square(sub(out.predictions, b.Y));  // (B, N, w)
    const std::vector<double> ev = err.to_vector();
    for (size_t i = 0; i < bsz; ++i)
      for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < w; ++k) {
          const int64_t t = origins[i] + w + k;
          m.channel[static_cast<size_t>(t * N + n)] +=
              ev[(i * static_cast<size_t>(N) + static_cast<size_t>(n)) *
                     static_cast<size_t>(w) +
                 static_cast<size_t>(k)];
          counts[static_cast<size_t>(t * N + n)] += 1.0;
        }
  }
  for (size_t i = 0; i < m.channel.size(); ++i)
    if (counts[i] > 0.0) m.channel[i] /= counts[i];
  m.global.assign(static_cast<size_t>(ds.length), 0.0);
  return m;
}

RobustStats robust_stats(const ScoreMatrix& raw) {
  RobustStats st;
  st.median.resize(static_cast<size_t>(raw.channels));
  st.iqr.resize(static_cast<size_t>(raw.channels));
  const int64_t L = raw.length, N = raw.channels;
  std::vector<double> col;
  for (int64_t n = 0; n < N; ++n) {
    col.clear();
    for (int64_t t = raw.first_scored; t < L; ++t)
      col.push_back(raw.channel[static_cast<size_t>(t * N + n)]);
    if (col.empty()) throw ContractError("no scored timesteps");
    std::sort(col.begin(), col.end());
    auto quantile = [&](double q) {
      const double pos = q * static_cast<double>(col.size() - 1);
      const size_t lo = static_cast<size_t>(pos);
      const size_t hi = std::min(lo + 1, col.size() - 1);
      const double frac = pos - static_cast<double>(lo);
      return col[lo] * (1.0 - frac) + col[hi] * frac;
    };
    st.median[static_cast<size_t>(n)] = quantile(0.5);
    st.iqr[static_cast<size_t>(n)] = quantile(0.75) - quantile(0.25);
  }
  return st;
}

void standardize_scores(ScoreMatrix& m, const RobustStats& st) {
  if (static_cast<int64_t>(st.median.size()) != m.channels)
    throw DimensionError("robust statistics cover " +
                         std::to_string(st.median.size()) +
                         " channels, scores have " +
                         std::to_string(m.channels));
  const int64_t L = m.length, N = m.channels;
  m.global.assign(static_cast<size_t>(L), 0.0);
  for (int64_t t = m.first_scored; t < L; ++t) {
    double g = -std::numeric_limits<double>::infinity();
    for (int64_t n = 0; n < N; ++n) {
      double& v = m.channel[static_cast<size_t>(t * N + n)];
      v = (v - st.median[static_cast<size_t>(n)]) /
          std::max(st.iqr[static_cast<size_t>(n)], 1e-3);
      g = std::max(g, v);
    }
    m.global[static_cast<size_t>(t)] = g;
  }
}

ScoreMatrix baseline_zscore_scores(const data::TimeSeriesDataset& ds,
                                   int64_t first_scored) {
  ScoreMatrix m;
  m.length = ds.length;
  m.channels = ds.channels;
  m.first_scored = first_scored;
  m.channel.assign(static_cast<size_t>(ds.length * ds.channels), 0.0);
  m.global.assign(static_cast<size_t>(ds.length), 0.0);
  for (int64_t t = first_scored; t < ds.length; ++t) {
    double g = 0.0;
    for (int64_t n = 0; n < ds.channels; ++n) {
      const double z = std::abs(ds.at(t, n));
      m.channel[static_cast<size_t>(t * ds.channels + n)] = z;
      g = std::max(g, z);
    }
    m.global[static_cast<size_t>(t)] = g;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

std::vector<uint8_t> point_adjust(const std::vector<uint8_t>& pred,
                                  const std::vector<uint8_t>& truth) {
  if (pred.size() != truth.size())
    throw ContractError("point_adjust length mismatch: " +
                        std::to_string(pred.size()) + " vs " +
                        std::to_string(truth.size()));
  std::vector<uint8_t> adj = pred;
  const size_t L = truth.size();
  size_t i = 0;
  while (i < L) {
    if (!truth[i]) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < L && truth[j]) ++j;  // [i, j) is a maximal true segment
    bool hit = false;
    for (size_t k = i; k < j && !hit; ++k) hit = pred[k] != 0;
    if (hit)
      for (size_t k = i; k < j; ++k) adj[k] = 1;
    i = j;
  }
  return adj;
}

namespace {

Metrics metrics_from(const std::vector<uint8_t>& adjusted,
                     const std::vector<uint8_t>& truth) {
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    if (adjusted[i] && truth[i]) ++tp;
    else if (adjusted[i] && !truth[i]) ++fp;
    else if (!adjusted[i] && truth[i]) ++fn;
  }
  Metrics m;
  m.precision = tp + fp > 0 ? static_cast<double>(tp) /
                                  static_cast<double>(tp + fp)
                            : 0.0;
  m.recall = tp + fn > 0 ? static_cast<double>(tp) /
                               static_cast<double>(tp + fn)
                         : 0.0;
  m.f1 = m.precision + m.recall > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

}  // namespace

AnomalyReport evaluate(const std::vector<double>& global_scores,
                       const std::vector<uint8_t>& truth, ThresholdMode mode,
                       double threshold) {
  if (global_scores.empty() || truth.empty())
    throw ContractError("evaluate needs nonempty scores and labels");
  if (global_scores.size() != truth.size())
    throw ContractError("evaluate length mismatch: " +
                        std::to_string(global_scores.size()) + " vs " +
                        std::to_string(truth.size()));

  auto report_at = [&](double thr) {
    AnomalyReport r;
    r.threshold = thr;
    r.decisions.resize(global_scores.size());
    for (size_t i = 0; i < global_scores.size(); ++i)
      r.decisions[i] = global_scores[i] >= thr ? 1 : 0;
    r.metrics = metrics_from(point_adjust(r.decisions, truth), truth);
    return r;
  };

  AnomalyReport best;
  if (mode == ThresholdMode::Fixed) {
    best = report_at(threshold);
  } else {
    std::vector<double> cands = global_scores;
    std::sort(cands.begin(), cands.end(), std::greater<double>());
    cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
    bool have = false;
    for (double thr : cands) {
      AnomalyReport r = report_at(thr);
      if (!have || r.metrics.f1 > best.metrics.f1 ||
          (r.metrics.f1 == best.metrics.f1 &&
           r.metrics.precision > best.metrics.precision)) {
        best = std::move(r);
        have = true;
      }
    }
  }
  best.global_scores = global_scores;
  return best;
}

double average_f1(const std::vector<AnomalyReport>& reports) {
  if (reports.empty()) throw ContractError("average_f1 needs >= 1 report");
  double s = 0.0;
  for (const AnomalyReport& r : reports) s += r.metrics.f1;
  return s / static_cast<double>(reports.size());
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

namespace {
void put_double(std::string& out, double v) {
  char buf[40];
  int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  out.append(buf, static_cast<size_t>(n));
}
}  // namespace

void write_scores_file(const std::string& path, const ScoreMatrix& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  std::string buf = "# scores-v1 first_scored=" +
                    std::to_string(m.first_scored) + "\nt";
  for (int64_t n = 1; n <= m.channels; ++n)
    buf += ",channel_" + std::to_string(n);
  buf += ",global\n";
  for (int64_t t = 0; t < m.length; ++t) {
    buf += std::to_string(t);
    for (int64_t n = 0; n < m.channels; ++n) {
      buf += ',';
      put_double(buf, m.channel[static_cast<size_t>(t * m.channels + n)]);
    }
    buf += ',';
    put_double(buf, m.global[static_cast<size_t>(t)]);
    buf += '\n';
    if (buf.size() > (1u << 20)) {
      out << buf;
      buf.clear();
    }
  }
  out << buf;
  if (!out) throw IoError("failed writing '" + path + "'");
}

ScoreMatrix read_scores_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line) || line.rfind("# scores-v1", 0) != 0)
    throw FormatError("'" + path + "': missing scores-v1 header");
  const std::string tag = "first_scored=";
  const size_t pos = line.find(tag);
  if (pos == std::string::npos)
    throw FormatError("'" + path + "': header lacks first_scored");
  ScoreMatrix m;
  m.first_scored = std::stoll(line.substr(pos + tag.size()));
  if (!std::getline(in, line))
    throw FormatError("'" + path + "': missing column header");
  int64_t ncols = 1;
  for (char c : line)
    if (c == ',') ++ncols;
  m.channels = ncols - 2;  // minus t and global
  if (m.channels < 1)
    throw FormatError("'" + path + "': no channel columns");
  int64_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> vals;
    size_t start = 0;
    while (start <= line.size()) {
      size_t comma = line.find(',', start);
      if (comma == std::string::npos) comma = line.size();
      try {
        vals.push_back(std::stod(line.substr(start, comma - start)));
      } catch (const std::exception&) {
        throw FormatError("'" + path + "': bad value at data row " +
                          std::to_string(row));
      }
      start = comma + 1;
    }
    if (static_cast<int64_t>(vals.size()) != m.channels + 2)
      throw FormatError("'" + path + "': ragged data row " +
                        std::to_string(row));
    for (int64_t n = 0; n < m.channels; ++n)
      m.channel.push_back(vals[static_cast<size_t>(n + 1)]);
    m.global.push_back(vals.back());
    ++row;
  }
  m.length = row;
  if (m.length == 0) throw FormatError("'" + path + "': no score rows");
  if (m.first_scored < 0 || m.first_scored >= m.length)
    throw FormatError("'" + path + "': first_scored out of range");
  return m;
}

void write_metrics_file(const std::string& path, const AnomalyReport& r,
                        const std::string& mode) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "# metrics-v1\n"
                "{\n"
                "  \"precision\": %.17g,\n"
                "  \"recall\": %.17g,\n"
                "  \"f1\": %.17g,\n"
                "  \"threshold\": %.17g,\n"
                "  \"mode\": \"%s\"\n"
                "}\n",
                r.metrics.precision, r.metrics.recall, r.metrics.f1,
                r.threshold, mode.c_str());
  out << buf;
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace dpad::scoring
