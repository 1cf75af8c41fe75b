#include <cmath>

#include "dpad/errors.hpp"
#include "model_internal.hpp"

namespace dpad {

namespace detail {

Tensor feature_norm(const Tensor& rows, const Tensor* alpha,
                    const Tensor* beta, double eps, bool literal) {
  Tensor m = mean_axis(rows, 1, true);
  Tensor xc = sub(rows, m);
  Tensor v = mean_axis(square(xc), 1, true);
  if (literal) {
    // Variance-denominator form: (x - mean)/var + eps * alpha + beta, with
    // the scale entering only through the additive eps term. A vanishing
    // guard keeps exactly-constant rows from producing 0/0.
    Tensor y = divide(xc, add_scalar(v, 1e-30));
    if (alpha) y = add(y, mul_scalar(*alpha, eps));
    if (beta) y = add(y, *beta);
    return y;
  }
  Tensor y = divide(xc, sqrt(add_scalar(v, eps)));
  if (alpha) y = mul(y, *alpha);
  if (beta) y = add(y, *beta);
  return y;
}

namespace {

// Row-tiled identity mask for the diagonal of per-sample (T x T) score
// blocks flattened to (B*T, T); entries equal to 1 are removed by softmax.
Tensor tiled_eye(int64_t B, int64_t T, DType dt) {
  std::vector<double> m(static_cast<size_t>(B * T * T), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < T; ++i)
      m[static_cast<size_t>((b * T + i) * T + i)] = 1.0;
  return Tensor::from_data({B * T, T}, m, dt);
}

}  // namespace

Tensor lsgm_pool_encode_batched(const Tensor& P, const lsgm::LsgmState& st) {
  const int64_t B = P.dim(0), N = P.dim(1);
  const int64_t T = st.t_windows, w = st.window, d = st.d;
  Tensor pooled = mean_axis(reshape(P, {B * N * T, w}), 1);   // (B*N*T)
  Tensor lifted = add(matmul(reshape(pooled, {B * N * T, 1}), st.lift_w),
                      st.lift_b);                             // (B*N*T, d)
  return add(reshape(lifted, {B * N, T, d}), st.pe_pooled);
}

AffinityBatch build_affinity_batched(const Tensor& pooled, int64_t B,
                                     const lsgm::LsgmState& st) {
  const int64_t T = st.t_windows, d = st.d;
  const int64_t N = pooled.dim(0) / B;
  if (T < 2)
    throw ContractError(
        "degenerate context: affinity needs at least 2 pooled windows");
  Tensor proj = matmul(reshape(pooled, {B * N * T, d}), st.affinity_w);
  Tensor U = reshape(transpose_axes(reshape(proj, {B, N, T, d}), 1, 2),
                     {B, T, N * d});
  const double scale = 1.0 / std::sqrt(static_cast<double>(N * d));
  Tensor scores =
      leaky_relu(mul_scalar(bmm(U, U, false, true), scale), st.leaky_slope);
  Tensor mask = tiled_eye(B, T, scores.dtype());
  Tensor pre = reshape(softmax_rows(reshape(scores, {B * T, T}), &mask),
                       {B, T, T});
  AffinityBatch out;
  out.pre_decay = pre;
  out.weights = mul(pre, st.decay_mat);
  return out;
}

Tensor propagate_batched(const AffinityBatch& aff, const Tensor& pooled,
                         int64_t B, const lsgm::LsgmState& st) {
  const int64_t T = st.t_windows, d = st.d;
  const int64_t N = pooled.dim(0) / B;
  // Normalize each feature dimension across the T pooled windows.
  Tensor across_t = reshape(transpose_axes(pooled, 1, 2), {B * N * d, T});
  Tensor sn = reshape(feature_norm(across_t, nullptr, nullptr, st.eps, false),
                      {B * N, d, T});
  Tensor SN = reshape(transpose_axes(reshape(transpose_axes(sn, 1, 2),
                                             {B, N, T, d}),
                                     1, 2),
                      {B, T, N * d});

  std::vector<Tensor> per_scale;
  Tensor Ar;
  for (int64_t r = 0; r < st.scales; ++r) {
    Ar = r == 0 ? aff.weights : bmm(Ar, aff.weights);
    Tensor Hr = bmm(Ar, SN);  // (B, T, N*d)
    Tensor rows = reshape(transpose_axes(reshape(Hr, {B, T, N, d}), 1, 2),
                          {B * N * T, d});
    per_scale.push_back(add(matmul(rows, st.theta_w[static_cast<size_t>(r)]),
                            st.theta_b[static_cast<size_t>(r)]));
  }
  Tensor fused;
  if (st.concat_scales)
    fused = add(matmul(concat(per_scale, 1), st.fuse_w), st.fuse_b);
  else
    fused = add_n(per_scale);
  Tensor normed =
      feature_norm(fused, &st.alpha, &st.beta, st.eps, st.literal);
  return reshape(normed, {B * N, T, d});
}

}  // namespace detail

namespace lsgm {

void LsgmState::build(const ModelConfig& cfg) {
  n = cfg.n_channels;
  d = cfg.embed_dim;
  window = cfg.window;
  history = cfg.history;
  t_windows = cfg.context_windows();
  scales = cfg.scales;
  decay = cfg.decay;
  leaky_slope = cfg.leaky_slope;
  eps = cfg.norm_eps;
  literal = cfg.literal_norm;
  concat_scales = cfg.scale_fusion == "concat";
  const DType dt = cfg.dtype;

  lift_w = Tensor::zeros({1, d}, dt).set_requires_grad();
  lift_b = Tensor::zeros({d}, dt).set_requires_grad();
  affinity_w = Tensor::zeros({d, d}, dt).set_requires_grad();
  theta_w.clear();
  theta_b.clear();
  for (int64_t r = 0; r < scales; ++r) {
    theta_w.push_back(Tensor::zeros({d, d}, dt).set_requires_grad());
    theta_b.push_back(Tensor::zeros({d}, dt).set_requires_grad());
  }
  if (concat_scales) {
    fuse_w = Tensor::zeros({scales * d, d}, dt).set_requires_grad();
    fuse_b = Tensor::zeros({d}, dt).set_requires_grad();
  } else {
    fuse_w = Tensor();
    fuse_b = Tensor();
  }
  alpha = Tensor::zeros({d}, dt).set_requires_grad();
  beta = Tensor::zeros({d}, dt).set_requires_grad();

  // Sinusoidal position table over the raw history and its per-window mean.
  std::vector<double> pv(static_cast<size_t>(history * d));
  for (int64_t pos = 0; pos < history; ++pos)
    for (int64_t j = 0; j < d; ++j) {
      const double expo = static_cast<double>(2 * (j / 2)) /
                          static_cast<double>(d);
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, expo);
      pv[static_cast<size_t>(pos * d + j)] =
          (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  pe = Tensor::from_data({history, d}, pv, dt);
  std::vector<double> pp(static_cast<size_t>(t_windows * d), 0.0);
  for (int64_t t = 0; t < t_windows; ++t)
    for (int64_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < window; ++k)
        s += pv[static_cast<size_t>((t * window + k) * d + j)];
      pp[static_cast<size_t>(t * d + j)] = s / static_cast<double>(window);
    }
  pe_pooled = Tensor::from_data({t_windows, d}, pp, dt);

  std::vector<double> dm(static_cast<size_t>(t_windows * t_windows));
  for (int64_t i = 0; i < t_windows; ++i)
    for (int64_t j = 0; j < t_windows; ++j)
      dm[static_cast<size_t>(i * t_windows + j)] =
          std::pow(decay, std::abs(static_cast<double>(i - j)));
  decay_mat = Tensor::from_data({t_windows, t_windows}, dm, dt);
}

void LsgmState::init(Rng& rng) {
  using detail::xavier_values;
  lift_w.set_values(xavier_values(d, 1, d, rng));
  affinity_w.set_values(xavier_values(d * d, d, d, rng));
  for (int64_t r = 0; r < scales; ++r)
    theta_w[static_cast<size_t>(r)].set_values(xavier_values(d * d, d, d, rng));
  if (concat_scales)
    fuse_w.set_values(xavier_values(scales * d * d, scales * d, d, rng));
  alpha.set_values(std::vector<double>(static_cast<size_t>(d), 1.0));
}

void LsgmState::collect(NamedParams& out, const std::string& prefix) {
  out.emplace_back(prefix + "lift.w", lift_w);
  out.emplace_back(prefix + "lift.b", lift_b);
  out.emplace_back(prefix + "affinity.w", affinity_w);
  for (int64_t r = 0; r < scales; ++r) {
    out.emplace_back(prefix + "scale" + std::to_string(r) + ".w",
                     theta_w[static_cast<size_t>(r)]);
    out.emplace_back(prefix + "scale" + std::to_string(r) + ".b",
                     theta_b[static_cast<size_t>(r)]);
  }
  if (concat_scales) {
    out.emplace_back(prefix + "fuse.w", fuse_w);
    out.emplace_back(prefix + "fuse.b", fuse_b);
  }
  out.emplace_back(prefix + "norm.alpha", alpha);
  out.emplace_back(prefix + "norm.beta", beta);
}

Tensor encode_history(const Tensor& P, const LsgmState& st) {
  if (P.rank() != 2 || P.dim(0) != st.n || P.dim(1) != st.history)
    throw DimensionError("encode_history expects (" + std::to_string(st.n) +
                         ", " + std::to_string(st.history) + "), got " +
                         shape_str(P.shape()));
  Tensor in = P.dtype() == st.lift_w.dtype() ? P : P.astype(st.lift_w.dtype());
  Tensor lifted = add(matmul(reshape(in, {st.n * st.history, 1}), st.lift_w),
                      st.lift_b);
  Tensor with_pe = add(reshape(lifted, {st.n, st.history, st.d}), st.pe);
  return transpose_axes(with_pe, 1, 2);  // (N, d, h)
}

Tensor pool_windows(const Tensor& P_enc, int64_t w) {
  if (P_enc.rank() != 3)
    throw DimensionError("pool_windows expects (N, d, h), got " +
                         shape_str(P_enc.shape()));
  const int64_t N = P_enc.dim(0), d = P_enc.dim(1), h = P_enc.dim(2);
  if (w < 1 || h % w != 0)
    throw ConfigError("history length " + std::to_string(h) +
                      " is not divisible into windows of " + std::to_string(w));
  return reshape(mean_axis(reshape(P_enc, {N * d * (h / w), w}), 1),
                 {N, d, h / w});
}

AffinityGraph build_affinity(const Tensor& S_pooled, const LsgmState& st) {
  if (S_pooled.rank() != 3 || S_pooled.dim(1) != st.d ||
      S_pooled.dim(2) != st.t_windows)
    throw DimensionError("build_affinity expects (N, d, T), got " +
                         shape_str(S_pooled.shape()));
  Tensor pooled = transpose_axes(S_pooled, 1, 2);  // (N, T, d)
  detail::AffinityBatch ab = detail::build_affinity_batched(pooled, 1, st);
  AffinityGraph g;
  g.weights = reshape(ab.weights, {st.t_windows, st.t_windows});
  g.pre_decay = reshape(ab.pre_decay, {st.t_windows, st.t_windows});
  g.decay = st.decay_mat;
  return g;
}

Tensor propagate_multiscale(const AffinityGraph& graph, const Tensor& S_pooled,
                            const LsgmState& st) {
  if (S_pooled.rank() != 3 || S_pooled.dim(1) != st.d ||
      S_pooled.dim(2) != st.t_windows)
    throw DimensionError("propagate_multiscale expects (N, d, T), got " +
                         shape_str(S_pooled.shape()));
  detail::AffinityBatch ab;
  ab.weights = reshape(graph.weights, {1, st.t_windows, st.t_windows});
  ab.pre_decay = reshape(graph.pre_decay, {1, st.t_windows, st.t_windows});
  Tensor pooled = transpose_axes(S_pooled, 1, 2);  // (N, T, d)
  Tensor out = detail::propagate_batched(ab, pooled, 1, st);  // (N, T, d)
  return transpose_axes(out, 1, 2);                           // (N, d, T)
}

}  // namespace lsgm
}  // namespace dpad
