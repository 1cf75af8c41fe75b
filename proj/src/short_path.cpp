#include <cmath>

#include "dpad/errors.hpp"
#include "model_internal.hpp"

namespace dpad {

namespace detail {

std::vector<double> xavier_values(int64_t count, int64_t fan_in,
                                  int64_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> vals(static_cast<size_t>(count));
  for (double& v : vals) v = bound * (2.0 * rng.uniform() - 1.0);
  return vals;
}

Tensor encode_window_tokens(const Tensor& W,
                            const sarm::GraphLearnerState& st) {
  const int64_t B = W.dim(0), N = W.dim(1), w = W.dim(2);
  Tensor flat = reshape(W, {B * N * w, 1});
  return add(matmul(flat, st.lift_w), st.lift_b);
}

HeadGraphsBatch learn_graphs_batched(const Tensor& enc_tokens, int64_t B,
                                     const sarm::GraphLearnerState& st,
                                     SamplingMode mode, Rng* rng) {
  if (mode != SamplingMode::Deterministic && rng == nullptr)
    throw ContractError("sampling modes other than Deterministic need an rng");
  const int64_t N = st.n, d = st.d;
  const int64_t w = enc_tokens.dim(0) / (B * N);
  Tensor emb = mean_axis(reshape(enc_tokens, {B * N, w, d}), 1);  // (B*N, d)

  HeadGraphsBatch out;
  const double scale = 1.0 / std::sqrt(static_cast<double>(st.head_dim));
  for (size_t hd = 0; hd < st.wq.size(); ++hd) {
    Tensor Q = reshape(matmul(emb, st.wq[hd]), {B, N, st.head_dim});
    Tensor K = reshape(matmul(emb, st.wk[hd]), {B, N, st.head_dim});
    Tensor probs = mul(sigmoid(mul_scalar(bmm(Q, K, false, true), scale)),
                       st.mask);  // (B, N, N), diagonal exactly 0

    Tensor adj, samples;
    if (mode == SamplingMode::Deterministic) {
      adj = mul(hard_threshold(probs, 0.5), st.mask);
      Tensor edge = reshape(adj, {B, N * N, 1});
      samples = concat({edge, sub_from_scalar(1.0, edge)}, 2);
    } else {
      Tensor pc = clamp(probs, 1e-12, 1.0 - 1e-12);
      Tensor logit_edge = reshape(log(pc), {B * N * N, 1});
      Tensor logit_none = reshape(log(sub_from_scalar(1.0, pc)), {B * N * N, 1});
      Tensor logits = concat({logit_edge, logit_none}, 1);  // (B*N*N, 2)
      Tensor e = gumbel_softmax(logits, st.temperature,
                                mode == SamplingMode::HardTraining
                                    ? GumbelMode::HardStraightThrough
                                    : GumbelMode::Soft,
                                *rng);
      samples = reshape(e, {B, N * N, 2});
      adj = mul(reshape(slice(e, 1, 0, 1), {B, N, N}), st.mask);
    }
    out.probs.push_back(probs);
    out.adj.push_back(adj);
    out.samples.push_back(samples);
  }
  return out;
}

Tensor diffusion_batched(const Tensor& enc_tokens, int64_t B,
                         const std::vector<Tensor>& adj,
                         const sarm::DiffusionUnitState& st) {
  const int64_t d = st.d;
  const int64_t N = adj.at(0).dim(1);
  const int64_t w = enc_tokens.dim(0) / (B * N);
  Tensor X = reshape(enc_tokens, {B, N, w * d});

  Tensor head_sum;
  for (size_t hd = 0; hd < adj.size(); ++hd) {
    // Diffusion supports: the raw tokens plus K hops along the sampled graph
    // (both directions when bidirectional). Zero-degree rows diffuse as
    // identity, so isolated channels keep their own signal.
    std::vector<Tensor> supports = {enc_tokens};
    Tensor P = row_normalize_or_identity(adj[hd]);
    Tensor S = X;
    for (int64_t k = 0; k < st.k_steps; ++k) {
      S = bmm(P, S);
      supports.push_back(reshape(S, {B * N * w, d}));
    }
    if (st.bidirectional) {
      Tensor Pt = row_normalize_or_identity(transpose_axes(adj[hd], 1, 2));
      Tensor Sb = X;
      for (int64_t k = 0; k < st.k_steps; ++k) {
        Sb = bmm(Pt, Sb);
        supports.push_back(reshape(Sb, {B * N * w, d}));
      }
    }
    Tensor G = concat(supports, 1);  // (B*N*w, supports*d)

    Tensor xr = add(matmul(G, st.wx_r[hd]), st.b_r[hd]);
    Tensor xu = add(matmul(G, st.wx_u[hd]), st.b_u[hd]);
    Tensor xc = add(matmul(G, st.wx_c[hd]), st.b_c[hd]);
    auto step_view = [&](const Tensor& t) {
      return transpose_axes(reshape(t, {B * N, w, d}), 0, 1);  // (w, B*N, d)
    };
    Tensor xr3 = step_view(xr), xu3 = step_view(xu), xc3 = step_view(xc);
    auto at_step = [&](const Tensor& t3, int64_t t) {
      return reshape(slice(t3, 0, t, 1), {B * N, d});
    };

    Tensor H;
    std::vector<Tensor> hs;
    for (int64_t t = 0; t < w; ++t) {
      Tensor r, u, c;
      if (t == 0) {  // hidden state starts at zero, so hidden terms vanish
        u = sigmoid(at_step(xu3, t));
        c = tanh(at_step(xc3, t));
        H = mul(sub_from_scalar(1.0, u), c);
      } else {
        r = sigmoid(add(at_step(xr3, t), matmul(H, st.uh_r[hd])));
        u = sigmoid(add(at_step(xu3, t), matmul(H, st.uh_u[hd])));
        c = tanh(add(at_step(xc3, t), matmul(mul(r, H), st.uh_c[hd])));
        H = add(mul(u, H), mul(sub_from_scalar(1.0, u), c));
      }
      hs.push_back(reshape(H, {1, B * N, d}));
    }
    Tensor seq = concat(hs, 0);  // (w, B*N, d)
    Tensor proj = add(matmul(reshape(seq, {w * B * N, d}), st.w_out[hd]),
                      st.b_out[hd]);
    head_sum = head_sum.defined() ? add(head_sum, proj) : proj;
  }
  Tensor mean = mul_scalar(head_sum, 1.0 / static_cast<double>(adj.size()));
  return transpose_axes(reshape(mean, {w, B * N, d}), 0, 1);  // (B*N, w, d)
}

}  // namespace detail

namespace sarm {

void GraphLearnerState::build(const ModelConfig& cfg) {
  n = cfg.n_channels;
  d = cfg.embed_dim;
  head_dim = cfg.head_width();
  priors = cfg.priors;
  temperature = cfg.temperature;
  const DType dt = cfg.dtype;
  lift_w = Tensor::zeros({1, d}, dt).set_requires_grad();
  lift_b = Tensor::zeros({d}, dt).set_requires_grad();
  wq.clear();
  wk.clear();
  for (int64_t h = 0; h < cfg.heads; ++h) {
    wq.push_back(Tensor::zeros({d, head_dim}, dt).set_requires_grad());
    wk.push_back(Tensor::zeros({d, head_dim}, dt).set_requires_grad());
  }
  std::vector<double> m(static_cast<size_t>(n * n), 1.0);
  for (int64_t i = 0; i < n; ++i) m[static_cast<size_t>(i * n + i)] = 0.0;
  mask = Tensor::from_data({n, n}, m, dt);
}

void GraphLearnerState::init(Rng& rng) {
  using detail::xavier_values;
  lift_w.set_values(xavier_values(d, 1, d, rng));
  for (size_t h = 0; h < wq.size(); ++h) {
    wq[h].set_values(xavier_values(d * head_dim, d, head_dim, rng));
    wk[h].set_values(xavier_values(d * head_dim, d, head_dim, rng));
  }
}

void GraphLearnerState::collect(NamedParams& out, const std::string& prefix) {
  out.emplace_back(prefix + "lift.w", lift_w);
  out.emplace_back(prefix + "lift.b", lift_b);
  for (size_t h = 0; h < wq.size(); ++h) {
    out.emplace_back(prefix + "h" + std::to_string(h) + ".wq", wq[h]);
    out.emplace_back(prefix + "h" + std::to_string(h) + ".wk", wk[h]);
  }
}

void DiffusionUnitState::build(const ModelConfig& cfg) {
  d = cfg.embed_dim;
  k_steps = cfg.diffusion_steps;
  bidirectional = cfg.bidirectional_diffusion;
  const DType dt = cfg.dtype;
  const int64_t gd = support_count() * d;
  auto zeros2 = [&](int64_t r, int64_t c) {
    return Tensor::zeros({r, c}, dt).set_requires_grad();
  };
  auto zeros1 = [&](int64_t r) {
    return Tensor::zeros({r}, dt).set_requires_grad();
  };
  wx_r.clear(); wx_u.clear(); wx_c.clear();
  uh_r.clear(); uh_u.clear(); uh_c.clear();
  b_r.clear(); b_u.clear(); b_c.clear();
  w_out.clear(); b_out.clear();
  for (int64_t h = 0; h < cfg.heads; ++h) {
    wx_r.push_back(zeros2(gd, d));
    wx_u.push_back(zeros2(gd, d));
    wx_c.push_back(zeros2(gd, d));
    uh_r.push_back(zeros2(d, d));
    uh_u.push_back(zeros2(d, d));
    uh_c.push_back(zeros2(d, d));
    b_r.push_back(zeros1(d));
    b_u.push_back(zeros1(d));
    b_c.push_back(zeros1(d));
    w_out.push_back(zeros2(d, d));
    b_out.push_back(zeros1(d));
  }
}

void DiffusionUnitState::init(Rng& rng) {
  using detail::xavier_values;
  const int64_t gd = support_count() * d;
  for (size_t h = 0; h < wx_r.size(); ++h) {
    wx_r[h].set_values(xavier_values(gd * d, gd, d, rng));
    wx_u[h].set_values(xavier_values(gd * d, gd, d, rng));
    wx_c[h].set_values(xavier_values(gd * d, gd, d, rng));
    uh_r[h].set_values(xavier_values(d * d, d, d, rng));
    uh_u[h].set_values(xavier_values(d * d, d, d, rng));
    uh_c[h].set_values(xavier_values(d * d, d, d, rng));
    w_out[h].set_values(xavier_values(d * d, d, d, rng));
  }
}

void DiffusionUnitState::collect(NamedParams& out, const std::string& prefix) {
  for (size_t h = 0; h < wx_r.size(); ++h) {
    const std::string p = prefix + "h" + std::to_string(h) + ".";
    out.emplace_back(p + "wx_r", wx_r[h]);
    out.emplace_back(p + "wx_u", wx_u[h]);
    out.emplace_back(p + "wx_c", wx_c[h]);
    out.emplace_back(p + "uh_r", uh_r[h]);
    out.emplace_back(p + "uh_u", uh_u[h]);
    out.emplace_back(p + "uh_c", uh_c[h]);
    out.emplace_back(p + "b_r", b_r[h]);
    out.emplace_back(p + "b_u", b_u[h]);
    out.emplace_back(p + "b_c", b_c[h]);
    out.emplace_back(p + "w_out", w_out[h]);
    out.emplace_back(p + "b_out", b_out[h]);
  }
}

Tensor encode_window(const Tensor& W, const GraphLearnerState& st) {
  if (W.rank() != 2 || W.dim(0) != st.n)
    throw DimensionError("encode_window expects (" + std::to_string(st.n) +
                         ", w), got " + shape_str(W.shape()));
  Tensor in = W.dtype() == st.lift_w.dtype() ? W : W.astype(st.lift_w.dtype());
  const int64_t w = W.dim(1);
  Tensor tokens =
      detail::encode_window_tokens(reshape(in, {1, st.n, w}), st);
  return transpose_axes(reshape(tokens, {st.n, w, st.d}), 1, 2);  // (N, d, w)
}

SparseGraphSet learn_sparse_graphs(const Tensor& W_enc,
                                   const GraphLearnerState& st, Rng& rng,
                                   bool training) {
  if (W_enc.rank() != 3 || W_enc.dim(0) != st.n || W_enc.dim(1) != st.d)
    throw DimensionError("learn_sparse_graphs expects (N, d, w), got " +
                         shape_str(W_enc.shape()));
  const int64_t w = W_enc.dim(2);
  Tensor tokens = reshape(transpose_axes(W_enc, 1, 2), {st.n * w, st.d});
  detail::HeadGraphsBatch hg = detail::learn_graphs_batched(
      tokens, 1, st,
      training ? SamplingMode::HardTraining : SamplingMode::Deterministic,
      &rng);
  SparseGraphSet out;
  for (size_t h = 0; h < hg.probs.size(); ++h) {
    out.probs_masked.push_back(reshape(hg.probs[h], {st.n, st.n}));
    out.adjacency.push_back(reshape(hg.adj[h], {st.n, st.n}));
    out.raw_samples.push_back(reshape(hg.samples[h], {st.n * st.n, 2}));
  }
  return out;
}

Tensor diffusion_forward(const Tensor& W_enc, const SparseGraphSet& graphs,
                         const DiffusionUnitState& st) {
  if (W_enc.rank() != 3 || W_enc.dim(1) != st.d)
    throw DimensionError("diffusion_forward expects (N, d, w), got " +
                         shape_str(W_enc.shape()));
  if (graphs.adjacency.empty())
    throw ContractError("diffusion_forward needs at least one sampled graph");
  const int64_t N = W_enc.dim(0), w = W_enc.dim(2);
  Tensor tokens = reshape(transpose_axes(W_enc, 1, 2), {N * w, st.d});
  std::vector<Tensor> adj;
  for (const Tensor& a : graphs.adjacency)
    adj.push_back(reshape(a, {1, N, N}));
  Tensor out = detail::diffusion_batched(tokens, 1, adj, st);  // (N, w, d)
  return transpose_axes(out, 1, 2);                            // (N, d, w)
}

}  // namespace sarm
}  // namespace dpad
