#include "dpad/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dpad/errors.hpp"

namespace dpad::train {

KlForm kl_form_from_string(const std::string& s) {
  if (s == "bernoulli") return KlForm::Bernoulli;
  if (s == "edge_term") return KlForm::EdgeTermOnly;
  throw ConfigError("unknown kl_form '" + s +
                    "' (expected 'bernoulli' or 'edge_term')");
}

std::string to_string(KlForm f) {
  return f == KlForm::Bernoulli ? "bernoulli" : "edge_term";
}

Tensor kl_loss(const std::vector<Tensor>& probs_masked,
               const std::vector<double>& priors, KlForm form) {
  if (probs_masked.empty())
    throw ContractError("kl_loss needs at least one head");
  if (probs_masked.size() != priors.size())
    throw DimensionError("kl_loss got " + std::to_string(probs_masked.size()) +
                         " heads but " + std::to_string(priors.size()) +
                         " priors");
  for (double pr : priors)
    if (!(pr > 0.0 && pr < 1.0))
      throw ParameterError("edge prior " + std::to_string(pr) +
                           " lies outside (0, 1)");

  Tensor total;
  int64_t batch = 1;
  for (size_t h = 0; h < probs_masked.size(); ++h) {
    const Tensor& probs = probs_masked[h];
    if (probs.rank() != 2 && probs.rank() != 3)
      throw DimensionError("kl_loss expects (N, N) or (B, N, N) tensors");
    const int64_t N = probs.dim(probs.rank() - 1);
    if (probs.dim(probs.rank() - 2) != N)
      throw DimensionError("kl_loss expects square adjacency blocks");
    batch = probs.rank() == 3 ? probs.dim(0) : 1;

    // Zero-diagonal mask excludes self-pairs exactly by multiplication.
    std::vector<double> mv(static_cast<size_t>(N * N), 1.0);
    for (int64_t i = 0; i < N; ++i) mv[static_cast<size_t>(i * N + i)] = 0.0;
    Tensor offdiag = Tensor::from_data({N, N}, mv, probs.dtype());

    const double prior = priors[h];
    Tensor p = clamp(probs, 1e-12, 1.0 - 1e-12);
    Tensor edge = mul(p, add_scalar(log(p), -std::log(prior)));
    Tensor terms;
    if (form == KlForm::Bernoulli) {
      Tensor q = sub_from_scalar(1.0, p);
      Tensor rest = mul(q, add_scalar(log(q), -std::log(1.0 - prior)));
      terms = add(edge, rest);
    } else {
      terms = edge;
    }
    Tensor head_sum = sum_all(mul(terms, offdiag));
    total = total.defined() ? add(total, head_sum) : head_sum;
  }
  return mul_scalar(total, 1.0 / static_cast<double>(batch));
}

Tensor gaussian_nll(const Tensor& O, const Tensor& Y, const Tensor& log_var) {
  if (O.shape() != Y.shape())
    throw DimensionError("gaussian_nll got mismatched shapes " +
                         shape_str(O.shape()) + " vs " + shape_str(Y.shape()));
  if (log_var.numel() != 1)
    throw DimensionError("gaussian_nll expects a scalar log-variance");
  const int64_t batch = O.rank() >= 3 ? O.dim(0) : 1;
  const double count =
      static_cast<double>(O.numel()) / static_cast<double>(batch);
  Tensor sse = sum_all(square(sub(O, Y)));
  Tensor quad = mul_scalar(mul(sse, exp(neg(log_var))),
                           0.5 / static_cast<double>(batch));
  Tensor norm = add_scalar(mul_scalar(log_var, 0.5 * count),
                           0.5 * count * std::log(2.0 * M_PI));
  return add(quad, reshape(norm, {1}));
}

LossTerms compute_loss(const DualPathModel& model, const ModelOutput& out,
                       const Tensor& Y, KlForm form) {
  LossTerms t;
  t.kl = kl_loss(out.edge_probs, model.config().priors, form);
  t.nll = gaussian_nll(out.predictions, Y, model.log_var());
  t.total = add(t.kl, t.nll);
  t.sigma_sq = std::exp(model.log_var().item());
  return t;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(NamedParams params, double lr, double weight_decay, double beta1,
           double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1),
      b2_(beta2), eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    const size_t n = static_cast<size_t>(params_[i].second.numel());
    m_[i].assign(n, 0.0);
    v_[i].assign(n, 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.impl->has_grad()) continue;  // untouched this iteration
    std::vector<double> theta = p.to_vector();
    std::vector<double> g = p.grad_to_vector();
    for (size_t j = 0; j < theta.size(); ++j) {
      const double grad = g[j] + wd_ * theta[j];
      m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * grad;
      v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * grad * grad;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      theta[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    p.set_values(theta);
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

double clip_global_norm(const NamedParams& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.impl->has_grad()) continue;
    for (double g : p.grad_to_vector()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (const auto& [name, p] : params) {
      if (!p.impl->has_grad()) continue;
      if (p.dtype() == DType::F64)
        for (double& g : p.impl->grads<double>()) g *= scale;
      else
        for (float& g : p.impl->grads<float>())
          g = static_cast<float>(g * scale);
    }
  }
  return norm;
}

double PlateauScheduler::observe(double val_loss) {
  if (val_loss < best_) {
    best_ = val_loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    lr_ = std::max(lr_ * decay_, min_lr_);
    bad_epochs_ = 0;
  }
  return lr_;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

namespace {

struct BatchLoss {
  double total = 0.0, nll = 0.0;
};

// Forward + loss over `origins`, accumulating gradients when `backward`.
// Losses are scaled by |origins| / denom so that accumulation over micro
// batches reproduces the full-batch mean exactly.
BatchLoss run_batch(DualPathModel& model, const data::TimeSeriesDataset& ds,
                    const std::vector<int64_t>& origins, int64_t denom,
                    const TrainConfig& cfg, SamplingMode mode, Rng* rng,
                    Tape* tape) {
  const auto& mc = model.config();
  data::SampleBatch b =
      data::make_batch(ds, origins, mc.window, mc.history, mc.dtype);
  ModelOutput out = model.forward(b.W, b.P, mode, rng);
  LossTerms terms = compute_loss(model, out, b.Y, cfg.kl_form);
  const double kl = terms.kl.item(), nll = terms.nll.item();
  if (!std::isfinite(kl))
    throw NumericError("divergence loss became non-finite during training");
  if (!std::isfinite(nll))
    throw NumericError(
        "prediction likelihood loss became non-finite during training");
  const double frac = static_cast<double>(origins.size()) /
                      static_cast<double>(denom);
  if (tape) tape->backward(mul_scalar(terms.total, frac));
  BatchLoss bl;
  bl.total = (kl + nll) * frac;
  bl.nll = nll * frac;
  return bl;
}

}  // namespace

FitResult fit(DualPathModel& model,
              const std::vector<data::TrainingSample>& samples,
              const TrainConfig& cfg, const ProgressFn& progress) {
  if (samples.empty()) throw ContractError("fit needs a nonempty sample list");
  const data::TimeSeriesDataset* ds = samples.front().ds;
  for (const auto& s : samples)
    if (s.ds != ds)
      throw ContractError("all samples must reference the same series");
  if (cfg.epochs < 1 || cfg.batch < 1)
    throw ConfigError("epochs and batch size must be positive");
  if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0))
    throw ConfigError("val_fraction must lie in (0, 1)");

  const int64_t n = static_cast<int64_t>(samples.size());
  const int64_t n_val = std::max<int64_t>(
      1, static_cast<int64_t>(std::floor(cfg.val_fraction *
                                         static_cast<double>(n))));
  const int64_t n_train = n - n_val;
  if (n_train < 1)
    throw InsufficientDataError(
        "not enough samples to split train/validation: got " +
        std::to_string(n));

  std::vector<int64_t> train_origins, val_origins;
  for (int64_t i = 0; i < n_train; ++i)
    train_origins.push_back(samples[static_cast<size_t>(i)].origin);
  for (int64_t i = n_train; i < n; ++i)
    val_origins.push_back(samples[static_cast<size_t>(i)].origin);

  const int64_t micro = cfg.micro_batch > 0
                            ? std::min<int64_t>(cfg.micro_batch, cfg.batch)
                            : cfg.batch;
  Rng shuffle_rng = Rng(cfg.seed).derive(1);
  Rng sample_rng = Rng(cfg.seed).derive(2);

  Adam opt(model.parameters(), cfg.lr, cfg.weight_decay);
  PlateauScheduler sched(cfg.lr, cfg.lr_decay, cfg.plateau_patience,
                         cfg.min_lr);

  FitResult res;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_params;
  int stale = 0;

  std::vector<int64_t> order = train_origins;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Fisher-Yates with the epoch-stable shuffle stream.
    for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
      const size_t j = shuffle_rng.next_index(static_cast<size_t>(i + 1));
      std::swap(order[static_cast<size_t>(i)], order[j]);
    }

    double train_loss_sum = 0.0;
    int64_t seen = 0;
    for (int64_t start = 0; start < n_train; start += cfg.batch) {
      const int64_t bsz = std::min<int64_t>(cfg.batch, n_train - start);
      opt.zero_grad();
      double batch_loss = 0.0;
      for (int64_t ms = 0; ms < bsz; ms += micro) {
        const int64_t mlen = std::min<int64_t>(micro, bsz - ms);
        std::vector<int64_t> origins(
            order.begin() + start + ms, order.begin() + start + ms + mlen);
        Tape tape;
        {
          Tape::Scope scope(tape);
          batch_loss += run_batch(model, *ds, origins, bsz, cfg,
                                  SamplingMode::HardTraining, &sample_rng,
                                  &tape)
                            .total;
        }
      }
      if (cfg.grad_clip > 0.0)
        clip_global_norm(model.parameters(), cfg.grad_clip);
      opt.step();
      train_loss_sum += batch_loss * static_cast<double>(bsz);
      seen += bsz;
    }

    // Deterministic validation pass.
    double val_loss = 0.0, val_nll = 0.0;
    {
      NoGrad ng;
      for (int64_t start = 0; start < n_val; start += cfg.batch) {
        const int64_t bsz = std::min<int64_t>(cfg.batch, n_val - start);
        std::vector<int64_t> origins(
            val_origins.begin() + start, val_origins.begin() + start + bsz);
        BatchLoss bl = run_batch(model, *ds, origins, bsz, cfg,
                                 SamplingMode::Deterministic, nullptr, nullptr);
        val_loss += bl.total * static_cast<double>(bsz);
        val_nll += bl.nll * static_cast<double>(bsz);
      }
      val_loss /= static_cast<double>(n_val);
      val_nll /= static_cast<double>(n_val);
    }

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = train_loss_sum / static_cast<double>(seen);
    st.val_loss = val_loss;
    st.val_nll = val_nll;
    st.lr = opt.lr();
    res.history.push_back(st);
    if (progress) progress(st);
    if (cfg.verbose)
      std::fprintf(stderr,
                   "epoch %3d  train %.6f  val %.6f  val_nll %.6f  lr %.2e\n",
                   epoch, st.train_loss, st.val_loss, st.val_nll, st.lr);

    if (val_loss < best_val) {
      best_val = val_loss;
      res.best_epoch = epoch;
      stale = 0;
      best_params.clear();
      for (const auto& [name, p] : model.parameters())
        best_params.push_back(p.to_vector());
    } else if (++stale >= cfg.early_stop_patience) {
      res.early_stopped = true;
      break;
    }
    opt.set_lr(sched.observe(val_loss));
  }

  if (!best_params.empty()) {
    size_t i = 0;
    for (auto& [name, p] : model.parameters()) p.set_values(best_params[i++]);
  }
  res.best_val_loss = best_val;
  return res;
}

}  // namespace dpad::train
