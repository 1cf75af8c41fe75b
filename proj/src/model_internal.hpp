#pragma once

#include "dpad/model.hpp"

// Batched building blocks shared between the composite forward pass and the
// per-sample module operations (which wrap them at B = 1). Token layouts:
// encoded windows are (B*N*w, d) rows ordered (sample, channel, timestep);
// pooled history is (B*N, T, d) rows ordered (sample, channel).

namespace dpad::detail {

// Uniform Xavier/Glorot draws in [-sqrt(6/(fan_in+fan_out)), +...).
std::vector<double> xavier_values(int64_t count, int64_t fan_in,
                                  int64_t fan_out, Rng& rng);

// (B, N, w) -> (B*N*w, d)
Tensor encode_window_tokens(const Tensor& W, const sarm::GraphLearnerState& st);

struct HeadGraphsBatch {
  std::vector<Tensor> probs;    // per head (B, N, N), diagonal exactly 0
  std::vector<Tensor> adj;      // per head (B, N, N)
  std::vector<Tensor> samples;  // per head (B, N*N, 2)
};
HeadGraphsBatch learn_graphs_batched(const Tensor& enc_tokens, int64_t B,
                                     const sarm::GraphLearnerState& st,
                                     SamplingMode mode, Rng* rng);

// -> (B*N, w, d), head-averaged diffusion GRU output
Tensor diffusion_batched(const Tensor& enc_tokens, int64_t B,
                         const std::vector<Tensor>& adj,
                         const sarm::DiffusionUnitState& st);

// (B, N, h) -> (B*N, T, d): pool, lift, add pooled position encoding. Equals
// pooling the per-position encoding because the lift is affine and the pool
// is a mean.
Tensor lsgm_pool_encode_batched(const Tensor& P, const lsgm::LsgmState& st);

struct AffinityBatch {
  Tensor weights;    // (B, T, T)
  Tensor pre_decay;  // (B, T, T)
};
AffinityBatch build_affinity_batched(const Tensor& pooled, int64_t B,
                                     const lsgm::LsgmState& st);

// -> (B*N, T, d) fused, normalized multi-scale propagation
Tensor propagate_batched(const AffinityBatch& aff, const Tensor& pooled,
                         int64_t B, const lsgm::LsgmState& st);

// Normalizes each row of (M, d) across the feature axis. Standard form:
// (x - mean) / sqrt(var + eps) * alpha + beta. Literal form: (x - mean) / var
// + eps * alpha + beta. Null alpha/beta mean "no learned affine".
Tensor feature_norm(const Tensor& rows, const Tensor* alpha,
                    const Tensor* beta, double eps, bool literal);

// (B*N, w, d) x (B*N, T, d) -> (B*N, w, d_v); inputs already normalized
Tensor cross_attend_batched(const Tensor& t_short, const Tensor& t_long,
                            const fusion::FusionState& st);

// (B*N, w, d_v) -> (B, N, w)
Tensor predict_batched(const Tensor& fused, int64_t B,
                       const fusion::FusionState& st);

}  // namespace dpad::detail
