#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dpad/data.hpp"
#include "dpad/model.hpp"
#include "dpad/tensor.hpp"

// Losses, optimizer, learning-rate schedule, and the training loop.

namespace dpad::train {

// Which divergence regularizes edge probabilities toward the priors.
//  Bernoulli: full two-term KL between Bernoulli(p) and Bernoulli(prior).
//  EdgeTermOnly: keeps only the p*log(p/prior) term of the divergence.
enum class KlForm { Bernoulli, EdgeTermOnly };

KlForm kl_form_from_string(const std::string& s);  // "bernoulli"|"edge_term"
std::string to_string(KlForm f);

// Sum over heads and off-diagonal pairs of the divergence between each edge
// probability and that head's prior, averaged over the batch when tensors
// are (B, N, N). Probabilities are clamped to [1e-12, 1-1e-12]; diagonal
// entries are excluded exactly via the zero-diagonal mask built in.
// Priors outside (0, 1) raise ParameterError.
Tensor kl_loss(const std::vector<Tensor>& probs_masked,
               const std::vector<double>& priors, KlForm form);

// Gaussian negative log-likelihood with a shared learned variance:
//   (1/(2 sigma^2)) * sum((O-Y)^2) + (count/2) * log(2 pi sigma^2),
// sigma^2 = exp(log_var). Rank-3 inputs treat axis 0 as the batch (mean over
// it, count = N*w); lower ranks are one sample with count = numel.
Tensor gaussian_nll(const Tensor& O, const Tensor& Y, const Tensor& log_var);

struct LossTerms {
  Tensor kl, nll, total;  // scalars; total = kl + nll in that order
  double sigma_sq = 1.0;  // exp(log_var) at evaluation time
};

LossTerms compute_loss(const DualPathModel& model, const ModelOutput& out,
                       const Tensor& Y, KlForm form);

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

// Adam with L2 regularization added to the gradient. Moment buffers are kept
// in float64 regardless of parameter dtype. Parameters whose gradient buffer
// was never touched in an iteration are skipped entirely.
class Adam {
 public:
  Adam(NamedParams params, double lr, double weight_decay, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  NamedParams params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

// Scales all gradients by max_norm / global_norm when the global L2 norm
// exceeds max_norm; returns the pre-clip norm.
double clip_global_norm(const NamedParams& params, double max_norm);

// Multiplies the learning rate by `decay` after `patience` consecutive
// epochs without validation improvement, never below min_lr; the counter
// resets on improvement or decay.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double decay, int patience, double min_lr)
      : lr_(lr), decay_(decay), patience_(patience), min_lr_(min_lr) {}

  // Observe one epoch's validation loss; returns the lr for the next epoch.
  double observe(double val_loss);
  double lr() const { return lr_; }

 private:
  double lr_, decay_;
  int patience_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 200;
  int batch = 64;
  int micro_batch = 0;  // gradient-accumulation chunk; 0 = whole batch
  double lr = 1e-3;
  double lr_decay = 0.8;
  int plateau_patience = 5;
  double min_lr = 1e-6;
  int early_stop_patience = 20;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  double val_fraction = 0.1;  // trailing fraction of samples held out
  KlForm kl_form = KlForm::Bernoulli;
  uint64_t seed = 0;
  bool verbose = false;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_nll = 0.0;
  double lr = 0.0;  // rate used during this epoch
};

struct FitResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
};

using ProgressFn = std::function<void(const EpochStats&)>;

// Trains in place: shuffled mini-batches with gradient accumulation, global
// gradient clipping, plateau-decayed Adam, early stopping, and restoration
// of the best-validation parameters at the end. The trailing val_fraction of
// the (origin-ordered) samples is held out for validation. Deterministic per
// seed. Non-finite losses abort with NumericError naming the offending term.
FitResult fit(DualPathModel& model,
              const std::vector<data::TrainingSample>& samples,
              const TrainConfig& cfg, const ProgressFn& progress = nullptr);

}  // namespace dpad::train
