#include <cmath>

#include "dpad/errors.hpp"
#include "model_internal.hpp"

namespace dpad {

namespace detail {

Tensor cross_attend_batched(const Tensor& t_short, const Tensor& t_long,
                            const fusion::FusionState& st) {
  const int64_t M = t_short.dim(0), w = t_short.dim(1), d = t_short.dim(2);
  const int64_t T = t_long.dim(1);
  Tensor V = reshape(matmul(reshape(t_long, {M * T, d}), st.wv),
                     {M, T, st.dv});
  Tensor attn;
  if (st.uniform_attention) {
    attn = Tensor::full({M, w, T}, 1.0 / static_cast<double>(T),
                        t_short.dtype());
  } else {
    Tensor Q = reshape(matmul(reshape(t_short, {M * w, d}), st.wq),
                       {M, w, st.dk});
    Tensor K = reshape(matmul(reshape(t_long, {M * T, d}), st.wk),
                       {M, T, st.dk});
    const double scale = 1.0 / std::sqrt(static_cast<double>(st.dk));
    Tensor scores = mul_scalar(bmm(Q, K, false, true), scale);  // (M, w, T)
    attn = reshape(softmax_rows(reshape(scores, {M * w, T})), {M, w, T});
  }
  return bmm(attn, V);  // (M, w, dv)
}

Tensor predict_batched(const Tensor& fused, int64_t B,
                       const fusion::FusionState& st) {
  const int64_t M = fused.dim(0), w = fused.dim(1);
  Tensor out = add(matmul(reshape(fused, {M, w * st.dv}), st.out_w), st.out_b);
  return reshape(out, {B, M / B, w});
}

}  // namespace detail

namespace fusion {

void FusionState::build(const ModelConfig& cfg) {
  d = cfg.embed_dim;
  dk = cfg.key_width();
  dv = cfg.value_width();
  window = cfg.window;
  eps = cfg.norm_eps;
  literal = cfg.literal_norm;
  uniform_attention = cfg.disable_fusion_attention;
  const DType dt = cfg.dtype;
  norm_short_alpha = Tensor::zeros({d}, dt).set_requires_grad();
  norm_short_beta = Tensor::zeros({d}, dt).set_requires_grad();
  norm_long_alpha = Tensor::zeros({d}, dt).set_requires_grad();
  norm_long_beta = Tensor::zeros({d}, dt).set_requires_grad();
  wq = Tensor::zeros({d, dk}, dt).set_requires_grad();
  wk = Tensor::zeros({d, dk}, dt).set_requires_grad();
  wv = Tensor::zeros({d, dv}, dt).set_requires_grad();
  out_w = Tensor::zeros({window * dv, window}, dt).set_requires_grad();
  out_b = Tensor::zeros({window}, dt).set_requires_grad();
}

void FusionState::init(Rng& rng) {
  using detail::xavier_values;
  const std::vector<double> ones(static_cast<size_t>(d), 1.0);
  norm_short_alpha.set_values(ones);
  norm_long_alpha.set_values(ones);
  wq.set_values(xavier_values(d * dk, d, dk, rng));
  wk.set_values(xavier_values(d * dk, d, dk, rng));
  wv.set_values(xavier_values(d * dv, d, dv, rng));
  out_w.set_values(xavier_values(window * dv * window, window * dv, window, rng));
}

void FusionState::collect(NamedParams& out, const std::string& prefix) {
  out.emplace_back(prefix + "norm_short.alpha", norm_short_alpha);
  out.emplace_back(prefix + "norm_short.beta", norm_short_beta);
  out.emplace_back(prefix + "norm_long.alpha", norm_long_alpha);
  out.emplace_back(prefix + "norm_long.beta", norm_long_beta);
  out.emplace_back(prefix + "wq", wq);
  out.emplace_back(prefix + "wk", wk);
  out.emplace_back(prefix + "wv", wv);
  out.emplace_back(prefix + "out.w", out_w);
  out.emplace_back(prefix + "out.b", out_b);
}

std::pair<Tensor, Tensor> align(const Tensor& H_short, const Tensor& H_long,
                                const FusionState& st) {
  if (H_short.rank() != 3 || H_short.dim(1) != st.d)
    throw DimensionError("align expects short features (N, d, w), got " +
                         shape_str(H_short.shape()));
  if (H_long.rank() != 3 || H_long.dim(1) != st.d ||
      H_long.dim(0) != H_short.dim(0))
    throw DimensionError("align expects long features (N, d, T), got " +
                         shape_str(H_long.shape()));
  const int64_t N = H_short.dim(0), w = H_short.dim(2), T = H_long.dim(2);
  Tensor s_rows = reshape(transpose_axes(H_short, 1, 2), {N * w, st.d});
  Tensor l_rows = reshape(transpose_axes(H_long, 1, 2), {N * T, st.d});
  Tensor s = detail::feature_norm(s_rows, &st.norm_short_alpha,
                                  &st.norm_short_beta, st.eps, st.literal);
  Tensor l = detail::feature_norm(l_rows, &st.norm_long_alpha,
                                  &st.norm_long_beta, st.eps, st.literal);
  return {transpose_axes(reshape(s, {N, w, st.d}), 0, 1),   // (w, N, d)
          transpose_axes(reshape(l, {N, T, st.d}), 0, 1)};  // (T, N, d)
}

Tensor cross_attend(const Tensor& T_short, const Tensor& T_long,
                    const FusionState& st) {
  if (T_short.rank() != 3 || T_short.dim(2) != st.d ||
      T_long.rank() != 3 || T_long.dim(2) != st.d ||
      T_short.dim(1) != T_long.dim(1))
    throw DimensionError("cross_attend expects (w, N, d) and (T, N, d) with "
                         "matching N");
  Tensor ts = transpose_axes(T_short, 0, 1);  // (N, w, d)
  Tensor tl = transpose_axes(T_long, 0, 1);   // (N, T, d)
  Tensor z = detail::cross_attend_batched(ts, tl, st);  // (N, w, dv)
  return transpose_axes(z, 0, 1);                       // (w, N, dv)
}

Tensor predict(const Tensor& Z, const FusionState& st) {
  if (Z.rank() != 3 || Z.dim(2) != st.dv || Z.dim(0) != st.window)
    throw DimensionError("predict expects (w, N, d_v), got " +
                         shape_str(Z.shape()));
  const int64_t N = Z.dim(1);
  Tensor preds = detail::predict_batched(transpose_axes(Z, 0, 1), 1, st);
  return reshape(transpose(reshape(preds, {N, st.window})),
                 {st.window, N, 1});
}

}  // namespace fusion
}  // namespace dpad
