#include "dpad/model.hpp"

#include "dpad/errors.hpp"
#include "model_internal.hpp"

namespace dpad {

void ModelConfig::validate() const {
  if (n_channels < 2)
    throw ConfigError("model needs at least 2 channels, got " +
                      std::to_string(n_channels));
  if (window < 1) throw ConfigError("window length must be positive");
  if (history < window || history % window != 0)
    throw ConfigError("history (" + std::to_string(history) +
                      ") must be a positive multiple of window (" +
                      std::to_string(window) + ")");
  if (context_windows() < 2)
    throw ConfigError("history must cover at least 2 windows");
  if (embed_dim < 1) throw ConfigError("embed_dim must be positive");
  if (heads < 1) throw ConfigError("heads must be positive");
  if (static_cast<int64_t>(priors.size()) != heads)
    throw ConfigError("expected " + std::to_string(heads) +
                      " edge priors, got " + std::to_string(priors.size()));
  for (double p : priors)
    if (!(p > 0.0 && p < 1.0))
      throw ParameterError("edge priors must lie strictly inside (0, 1)");
  if (!(temperature > 0.0))
    throw ParameterError("sampling temperature must be positive");
  if (diffusion_steps < 0)
    throw ConfigError("diffusion_steps must be non-negative");
  if (scales < 1) throw ConfigError("scales must be positive");
  if (!(decay >= 0.0 && decay <= 1.0))
    throw ParameterError("decay must lie in [0, 1]");
  if (scale_fusion != "sum" && scale_fusion != "concat")
    throw ConfigError("scale_fusion must be 'sum' or 'concat', got '" +
                      scale_fusion + "'");
  if (head_dim < 0 || key_dim < 0 || value_dim < 0)
    throw ConfigError("projection widths must be non-negative");
  if (!(norm_eps > 0.0))
    throw ParameterError("normalization epsilon must be positive");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0))
    throw ParameterError("leaky slope must lie in [0, 1)");
}

DualPathModel::DualPathModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  graph_.build(cfg_);
  diffusion_.build(cfg_);
  lsgm_.build(cfg_);
  fusion_.build(cfg_);
  log_var_ = Tensor::zeros({1}, cfg_.dtype).set_requires_grad();
  register_params();
}

DualPathModel::DualPathModel(ModelConfig cfg, uint64_t init_seed)
    : DualPathModel(std::move(cfg)) {
  Rng rng(init_seed);
  graph_.init(rng);
  diffusion_.init(rng);
  lsgm_.init(rng);
  fusion_.init(rng);
}

void DualPathModel::register_params() {
  params_.clear();
  graph_.collect(params_, "short.graph.");
  diffusion_.collect(params_, "short.gru.");
  lsgm_.collect(params_, "long.");
  fusion_.collect(params_, "fusion.");
  params_.emplace_back("noise.log_var", log_var_);
}

ModelOutput DualPathModel::forward(const Tensor& W, const Tensor& P,
                                   SamplingMode mode, Rng* rng) const {
  if (W.rank() != 3 || W.dim(1) != cfg_.n_channels || W.dim(2) != cfg_.window)
    throw DimensionError("forward expects windows (B, " +
                         std::to_string(cfg_.n_channels) + ", " +
                         std::to_string(cfg_.window) + "), got " +
                         shape_str(W.shape()));
  if (P.rank() != 3 || P.dim(0) != W.dim(0) || P.dim(1) != cfg_.n_channels ||
      P.dim(2) != cfg_.history)
    throw DimensionError("forward expects histories (B, " +
                         std::to_string(cfg_.n_channels) + ", " +
                         std::to_string(cfg_.history) + "), got " +
                         shape_str(P.shape()));
  if (W.dtype() != cfg_.dtype || P.dtype() != cfg_.dtype)
    throw DimensionError("forward inputs must use the model dtype");
  const int64_t B = W.dim(0);

  Tensor enc = detail::encode_window_tokens(W, graph_);
  detail::HeadGraphsBatch hg =
      detail::learn_graphs_batched(enc, B, graph_, mode, rng);
  Tensor h_short = detail::diffusion_batched(enc, B, hg.adj, diffusion_);

  ModelOutput out;
  out.edge_probs = std::move(hg.probs);
  out.adjacency = std::move(hg.adj);

  const int64_t M = B * cfg_.n_channels;
  Tensor ts = reshape(
      detail::feature_norm(reshape(h_short, {M * cfg_.window, cfg_.embed_dim}),
                           &fusion_.norm_short_alpha, &fusion_.norm_short_beta,
                           fusion_.eps, fusion_.literal),
      {M, cfg_.window, cfg_.embed_dim});

  Tensor fused;
  if (cfg_.disable_lsgm) {
    // Long path ablated: the forecast head consumes the value projection of
    // the normalized short tokens directly.
    fused = reshape(matmul(reshape(ts, {M * cfg_.window, cfg_.embed_dim}),
                           fusion_.wv),
                    {M, cfg_.window, fusion_.dv});
  } else {
    Tensor pooled = detail::lsgm_pool_encode_batched(P, lsgm_);
    detail::AffinityBatch aff =
        detail::build_affinity_batched(pooled, B, lsgm_);
    Tensor h_long = detail::propagate_batched(aff, pooled, B, lsgm_);
    out.affinity = aff.weights;
    out.affinity_pre_decay = aff.pre_decay;
    Tensor tl = reshape(
        detail::feature_norm(
            reshape(h_long, {M * lsgm_.t_windows, cfg_.embed_dim}),
            &fusion_.norm_long_alpha, &fusion_.norm_long_beta, fusion_.eps,
            fusion_.literal),
        {M, lsgm_.t_windows, cfg_.embed_dim});
    fused = detail::cross_attend_batched(ts, tl, fusion_);
  }
  out.predictions = detail::predict_batched(fused, B, fusion_);
  return out;
}

std::vector<CheckpointEntry> DualPathModel::state_entries() const {
  std::vector<CheckpointEntry> entries;
  for (const auto& [name, t] : params_)
    entries.push_back(CheckpointEntry{name, t.shape(), t.to_vector()});
  return entries;
}

void DualPathModel::load_state_entries(
    const std::vector<CheckpointEntry>& entries) {
  for (auto& [name, t] : params_) {
    const CheckpointEntry& e = find_entry(entries, name);
    if (e.shape != t.shape())
      throw DimensionError("checkpoint entry '" + name + "' has shape " +
                           shape_str(e.shape) +
                           ", incompatible with the configured model's " +
                           shape_str(t.shape()));
    t.set_values(e.data);
  }
}

}  // namespace dpad
