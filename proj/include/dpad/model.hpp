#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dpad/checkpoint.hpp"
#include "dpad/tensor.hpp"

// Dual-path forecasting model: a short path that learns sparse inter-channel
// dependency graphs over the current window and diffuses information along
// them through a gated recurrent unit, a long path that attends over pooled
// history windows through a decayed affinity graph at multiple propagation
// scales, and a cross-attention fusion head that forecasts the next window
// per channel.

namespace dpad {

struct ModelConfig {
  int64_t n_channels = 0;  // N (set from data)
  int64_t window = 30;     // w, forecast / current-window length
  int64_t history = 300;   // h, long-context length (multiple of w)
  int64_t embed_dim = 64;  // d
  int64_t heads = 3;       // graph-learner head count
  int64_t head_dim = 0;    // scorer width; 0 means embed_dim
  std::vector<double> priors = {0.9, 0.05, 0.05};  // per-head edge priors
  double temperature = 0.5;       // relaxed-sampling temperature
  int64_t diffusion_steps = 2;    // K, graph diffusion order
  bool bidirectional_diffusion = false;
  int64_t scales = 2;             // R, long-path propagation scales
  double decay = 0.7;             // inter-window decay base in [0, 1]
  std::string scale_fusion = "sum";  // "sum" | "concat" across scales
  int64_t key_dim = 0;            // fusion d_k; 0 means embed_dim
  int64_t value_dim = 0;          // fusion d_v; 0 means embed_dim
  double leaky_slope = 0.01;      // affinity activation slope
  double norm_eps = 1e-6;         // feature-normalization epsilon
  bool literal_norm = false;      // divide by variance instead of std
  bool disable_lsgm = false;          // ablation: drop the long path
  bool disable_fusion_attention = false;  // ablation: uniform attention
  DType dtype = DType::F64;

  int64_t context_windows() const { return history / window; }  // T
  int64_t head_width() const { return head_dim > 0 ? head_dim : embed_dim; }
  int64_t key_width() const { return key_dim > 0 ? key_dim : embed_dim; }
  int64_t value_width() const { return value_dim > 0 ? value_dim : embed_dim; }
  void validate() const;  // ConfigError / ParameterError on violations
};

// How adjacency is drawn from edge probabilities.
//  HardTraining:  exact one-hot Gumbel sample, straight-through gradient.
//  SoftRelaxed:   tempered soft sample (fully differentiable; used by
//                 gradient checks).
//  Deterministic: edge iff probability >= 1/2; no sampling, no gradient.
enum class SamplingMode { HardTraining, SoftRelaxed, Deterministic };

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// ---------------------------------------------------------------------------
// Short path: sparse graph learner + diffusion recurrence
// ---------------------------------------------------------------------------

namespace sarm {

struct GraphLearnerState {
  Tensor lift_w, lift_b;         // 1 x d, d: shared per-timestep lift
  std::vector<Tensor> wq, wk;    // per head: d x head_dim pair scorers
  Tensor mask;                   // N x N constant, zero diagonal
  std::vector<double> priors;    // per-head edge prior in (0, 1)
  double temperature = 0.5;
  int64_t n = 0, d = 0, head_dim = 0;

  void build(const ModelConfig& cfg);
  void init(Rng& rng);
  void collect(NamedParams& out, const std::string& prefix);
};

struct DiffusionUnitState {
  // Per head: gate input maps over the stacked diffusion supports
  // ((1 + K * directions) * d -> d), hidden maps (d -> d), biases, and a
  // trailing d -> d output projection.
  std::vector<Tensor> wx_r, wx_u, wx_c;
  std::vector<Tensor> uh_r, uh_u, uh_c;
  std::vector<Tensor> b_r, b_u, b_c;
  std::vector<Tensor> w_out, b_out;
  int64_t k_steps = 2, d = 0;
  bool bidirectional = false;

  int64_t support_count() const {
    return 1 + k_steps * (bidirectional ? 2 : 1);
  }
  void build(const ModelConfig& cfg);
  void init(Rng& rng);
  void collect(NamedParams& out, const std::string& prefix);
};

// One graph per head. Tensors are (N, N) for a single sample or (B, N, N)
// batched; raw relaxed samples are (N*N, 2) / (B, N*N, 2).
struct SparseGraphSet {
  std::vector<Tensor> probs_masked;  // sigmoid pair scores, diagonal exactly 0
  std::vector<Tensor> adjacency;     // sampled / thresholded edges
  std::vector<Tensor> raw_samples;   // two-category relaxed samples
};

// (N, w) -> (N, d, w): shared affine lift of each channel-timestep scalar.
Tensor encode_window(const Tensor& W, const GraphLearnerState& st);
// Scores channel pairs on time-mean embeddings and samples one graph per
// head. training=true uses hard straight-through sampling (consumes rng);
// training=false thresholds probabilities deterministically.
SparseGraphSet learn_sparse_graphs(const Tensor& W_enc,
                                   const GraphLearnerState& st, Rng& rng,
                                   bool training);
// Diffusion GRU over the sampled graphs; (N, d, w) in, (N, d, w) out.
Tensor diffusion_forward(const Tensor& W_enc, const SparseGraphSet& graphs,
                         const DiffusionUnitState& st);

}  // namespace sarm

// ---------------------------------------------------------------------------
// Long path: decayed affinity over pooled history windows
// ---------------------------------------------------------------------------

namespace lsgm {

struct LsgmState {
  Tensor lift_w, lift_b;   // 1 x d, d
  Tensor pe;               // h x d constant sinusoidal position table
  Tensor pe_pooled;        // T x d constant: pe mean-pooled per window
  Tensor affinity_w;       // d x d feature projection for scoring
  std::vector<Tensor> theta_w, theta_b;  // per scale: d x d, d
  Tensor fuse_w, fuse_b;   // (R*d) x d, d, concat fusion only
  Tensor alpha, beta;      // d: learned output normalization
  Tensor decay_mat;        // T x T constant: decay^|i-j|
  double leaky_slope = 0.01, eps = 1e-6, decay = 0.7;
  bool literal = false, concat_scales = false;
  int64_t t_windows = 0, d = 0, scales = 2, n = 0, window = 0, history = 0;

  void build(const ModelConfig& cfg);
  void init(Rng& rng);
  void collect(NamedParams& out, const std::string& prefix);
};

struct AffinityGraph {
  Tensor weights;    // (T, T) or (B, T, T): post-softmax, decayed, zero diag
  Tensor pre_decay;  // same shape: rows sum to 1
  Tensor decay;      // (T, T) constant decay^|i-j|, unit diagonal
};

// (N, h) -> (N, d, h): affine lift plus sinusoidal position encoding.
Tensor encode_history(const Tensor& P, const LsgmState& st);
// (N, d, h) -> (N, d, T): non-overlapping mean pool of w-length windows.
Tensor pool_windows(const Tensor& P_enc, int64_t w);
// Scaled dot-product affinity between pooled windows with masked diagonal,
// row softmax, and elementwise decay. Requires T >= 2.
AffinityGraph build_affinity(const Tensor& S_pooled, const LsgmState& st);
// Feature-normalizes, propagates through affinity powers r = 1..R with
// per-scale maps, fuses scales, and applies the learned normalization.
Tensor propagate_multiscale(const AffinityGraph& graph, const Tensor& S_pooled,
                            const LsgmState& st);

}  // namespace lsgm

// ---------------------------------------------------------------------------
// Fusion head: per-channel cross-attention and forecast
// ---------------------------------------------------------------------------

namespace fusion {

struct FusionState {
  Tensor norm_short_alpha, norm_short_beta;  // d
  Tensor norm_long_alpha, norm_long_beta;    // d
  Tensor wq, wk, wv;   // d x d_k, d x d_k, d x d_v
  Tensor out_w, out_b; // (w * d_v) x w, w
  double eps = 1e-6;
  bool literal = false, uniform_attention = false;
  int64_t d = 0, dk = 0, dv = 0, window = 0;

  void build(const ModelConfig& cfg);
  void init(Rng& rng);
  void collect(NamedParams& out, const std::string& prefix);
};

// Normalizes both paths' features and lays them out as time-major token
// sequences: (N, d, w) -> (w, N, d) and (N, d, T) -> (T, N, d).
std::pair<Tensor, Tensor> align(const Tensor& H_short, const Tensor& H_long,
                                const FusionState& st);
// Per-channel attention: w queries from the short tokens, T keys/values from
// the long tokens; rows of the attention matrix sum to 1. (w, N, d_v) out.
Tensor cross_attend(const Tensor& T_short, const Tensor& T_long,
                    const FusionState& st);
// Per-channel linear readout of the concatenated fused features: (w, N, 1).
Tensor predict(const Tensor& Z, const FusionState& st);

}  // namespace fusion

// ---------------------------------------------------------------------------
// Composite model
// ---------------------------------------------------------------------------

struct ModelOutput {
  Tensor predictions;              // (B, N, w)
  std::vector<Tensor> edge_probs;  // per head (B, N, N), diagonal exactly 0
  std::vector<Tensor> adjacency;   // per head (B, N, N)
  Tensor affinity;                 // (B, T, T) decayed; undefined if no long path
  Tensor affinity_pre_decay;       // (B, T, T)
};

class DualPathModel {
 public:
  explicit DualPathModel(ModelConfig cfg);      // parameters left at zero
  DualPathModel(ModelConfig cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }

  // W: (B, N, w) current windows; P: (B, N, h) histories. rng is required
  // for HardTraining and SoftRelaxed sampling.
  ModelOutput forward(const Tensor& W, const Tensor& P, SamplingMode mode,
                      Rng* rng = nullptr) const;

  NamedParams& parameters() { return params_; }
  const NamedParams& parameters() const { return params_; }
  Tensor log_var() const { return log_var_; }

  const sarm::GraphLearnerState& graph_state() const { return graph_; }
  const sarm::DiffusionUnitState& diffusion_state() const { return diffusion_; }
  const lsgm::LsgmState& lsgm_state() const { return lsgm_; }
  const fusion::FusionState& fusion_state() const { return fusion_; }

  std::vector<CheckpointEntry> state_entries() const;
  // Strict: every parameter must be present with a matching shape
  // (DimensionError names the parameter); unknown "stats.*" entries are the
  // caller's business and are ignored here.
  void load_state_entries(const std::vector<CheckpointEntry>& entries);

 private:
  ModelConfig cfg_;
  sarm::GraphLearnerState graph_;
  sarm::DiffusionUnitState diffusion_;
  lsgm::LsgmState lsgm_;
  fusion::FusionState fusion_;
  Tensor log_var_;  // scalar: log of the observation noise variance
  NamedParams params_;

  void register_params();
};

}  // namespace dpad
