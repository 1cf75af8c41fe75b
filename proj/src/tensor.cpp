#include "dpad/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace dpad {

namespace {

template <typename T>
using MatMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Runs f with a value of the tensor's scalar type as a type tag.
template <typename F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::F64) return f(double{});
  return f(float{});
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, DType dt) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dt;
  impl->data.assign(static_cast<size_t>(impl->numel()) * dtype_size(dt),
                    std::byte{0});
  return impl;
}

bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::recording()) return false;
  for (const Tensor* t : inputs) {
    if (t->impl->tracked) return true;
  }
  return false;
}

// Marks the output tracked and records the backward closure if needed.
void finish_op(Tensor& out, std::initializer_list<const Tensor*> inputs,
               std::function<void()> backward) {
  if (!want_grad(inputs)) return;
  out.impl->tracked = true;
  Tape::active()->record(std::move(backward));
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw DimensionError(std::string(op) + ": dtype mismatch (" +
                         dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()) +
                         ")");
  }
}

int64_t checked_axis(const Tensor& a, int axis, const char* op) {
  if (axis < 0 || axis >= a.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(a.shape()));
  }
  return axis;
}

// Row-major element strides.
std::vector<int64_t> element_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * s[i + 1];
  }
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) +
                           " and " + shape_str(b) + " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` aligned to the broadcast result `out`; 0 on broadcast axes.
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  size_t r = out.size(), ri = in.size();
  std::vector<int64_t> st(r, 0);
  auto es = element_strides(in);
  for (size_t i = 0; i < ri; ++i) {
    size_t oi = i + (r - ri);
    st[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : es[i];
  }
  return st;
}

// Calls f(i_out, i_a, i_b) for every element of `out` in row-major order.
template <typename F>
void for_each_pair(const Shape& out, const std::vector<int64_t>& sa,
                   const std::vector<int64_t>& sb, F&& f) {
  const int r = static_cast<int>(out.size());
  const int64_t n = shape_numel(out);
  std::vector<int64_t> idx(out.size(), 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

// Calls f(i_out, i_in) where i_in walks `in_strides` over the out shape.
template <typename F>
void for_each_strided(const Shape& out, const std::vector<int64_t>& strides,
                      F&& f) {
  const int r = static_cast<int>(out.size());
  const int64_t n = shape_numel(out);
  std::vector<int64_t> idx(out.size(), 0);
  int64_t ii = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, ii);
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      ii += strides[ax];
      if (idx[ax] < out[ax]) break;
      ii -= strides[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

// True when b's shape is a suffix of a's shape (fast path for bias adds and
// shared masks: out[i] pairs with b[i % b.numel()]).
bool is_suffix_shape(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  for (size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
  }
  return true;
}

enum class BinKind { Add, Sub, Mul, Div };

template <typename T>
inline T bin_eval(BinKind k, T x, T y) {
  switch (k) {
    case BinKind::Add: return x + y;
    case BinKind::Sub: return x - y;
    case BinKind::Mul: return x * y;
    default: return x / y;
  }
}

// d(out)/dx and d(out)/dy.
template <typename T>
inline void bin_partials(BinKind k, T x, T y, T& px, T& py) {
  switch (k) {
    case BinKind::Add: px = T(1); py = T(1); return;
    case BinKind::Sub: px = T(1); py = T(-1); return;
    case BinKind::Mul: px = y; py = x; return;
    default: px = T(1) / y; py = -x / (y * y); return;
  }
}

const char* bin_name(BinKind k) {
  switch (k) {
    case BinKind::Add: return "add";
    case BinKind::Sub: return "sub";
    case BinKind::Mul: return "mul";
    default: return "div";
  }
}

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
  require_same_dtype(a, b, bin_name(kind));
  Shape oshape = broadcast_shape(a.shape(), b.shape(), bin_name(kind));
  auto out = make_impl(oshape, a.dtype());
  auto ai = a.impl, bi = b.impl;

  const bool same = a.shape() == oshape && b.shape() == oshape;
  const bool suffix = !same && is_suffix_shape(a.shape(), b.shape()) &&
                      a.shape() == oshape;

  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xa = ai->values<T>();
    auto xb = bi->values<T>();
    auto xo = out->values<T>();
    if (same) {
      for (int64_t i = 0; i < static_cast<int64_t>(xo.size()); ++i) {
        xo[i] = bin_eval(kind, xa[i], xb[i]);
      }
    } else if (suffix) {
      const int64_t nb = static_cast<int64_t>(xb.size());
      for (int64_t o = 0; o < static_cast<int64_t>(xo.size()); o += nb) {
        for (int64_t j = 0; j < nb; ++j) {
          xo[o + j] = bin_eval(kind, xa[o + j], xb[j]);
        }
      }
    } else {
      auto sa = broadcast_strides(a.shape(), oshape);
      auto sb = broadcast_strides(b.shape(), oshape);
      for_each_pair(oshape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
        xo[i] = bin_eval(kind, xa[ia], xb[ib]);
      });
    }
  });

  Tensor result(out);
  finish_op(result, {&a, &b}, [ai, bi, out, kind, same, suffix, oshape]() {
    if (!out->has_grad()) return;
    const bool ga = ai->tracked, gb = bi->tracked;
    if (ga) ai->ensure_grad();
    if (gb) bi->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto xa = ai->values<T>();
      auto xb = bi->values<T>();
      auto g = out->grads<T>();
      auto da = ai->grads<T>();
      auto db = bi->grads<T>();
      T px, py;
      if (same) {
        for (int64_t i = 0; i < static_cast<int64_t>(g.size()); ++i) {
          bin_partials(kind, xa[i], xb[i], px, py);
          if (ga) da[i] += px * g[i];
          if (gb) db[i] += py * g[i];
        }
      } else if (suffix) {
        const int64_t nb = static_cast<int64_t>(xb.size());
        for (int64_t o = 0; o < static_cast<int64_t>(g.size()); o += nb) {
          for (int64_t j = 0; j < nb; ++j) {
            bin_partials(kind, xa[o + j], xb[j], px, py);
            if (ga) da[o + j] += px * g[o + j];
            if (gb) db[j] += py * g[o + j];
          }
        }
      } else {
        auto sa = broadcast_strides(ai->shape, oshape);
        auto sb = broadcast_strides(bi->shape, oshape);
        for_each_pair(oshape, sa, sb, [&](int64_t i, int64_t iia, int64_t iib) {
          bin_partials(kind, xa[iia], xb[iib], px, py);
          if (ga) da[iia] += px * g[i];
          if (gb) db[iib] += py * g[i];
        });
      }
    });
  });
  return result;
}

// Unary op with an output-and-input based derivative: dx = dfn(x, y) * g.
template <typename FwdF, typename DerF>
Tensor unary_op(const Tensor& a, FwdF&& fwd, DerF&& der) {
  auto out = make_impl(a.shape(), a.dtype());
  auto ai = a.impl;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = ai->values<T>();
    auto y = out->values<T>();
    for (int64_t i = 0; i < static_cast<int64_t>(y.size()); ++i) {
      y[i] = static_cast<T>(fwd(static_cast<double>(x[i])));
    }
  });
  Tensor result(out);
  finish_op(result, {&a}, [ai, out, der]() {
    if (!out->has_grad()) return;
    ai->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto x = ai->values<T>();
      auto y = out->values<T>();
      auto g = out->grads<T>();
      auto da = ai->grads<T>();
      for (int64_t i = 0; i < static_cast<int64_t>(g.size()); ++i) {
        da[i] += static_cast<T>(
            der(static_cast<double>(x[i]), static_cast<double>(y[i])) *
            static_cast<double>(g[i]));
      }
    });
  });
  return result;
}

thread_local Tape* g_active_tape = nullptr;
thread_local int g_no_grad_depth = 0;

}  // namespace

// ---------------------------------------------------------------------------
// Shape helpers / TensorImpl / Tensor
// ---------------------------------------------------------------------------

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

void TensorImpl::ensure_grad() {
  if (grad.empty()) {
    grad.assign(static_cast<size_t>(numel()) * dtype_size(dtype), std::byte{0});
  }
}

Tensor Tensor::zeros(Shape shape, DType dt) {
  for (int64_t d : shape) {
    if (d <= 0) throw DimensionError("zeros: non-positive dim in " + shape_str(shape));
  }
  return Tensor(make_impl(std::move(shape), dt));
}

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto v = t.impl->values<T>();
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_data(Shape shape, const std::vector<double>& values, DType dt) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("from_data: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  Tensor t = zeros(std::move(shape), dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto v = t.impl->values<T>();
    for (size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto v = t.impl->values<T>();
    for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * rng.uniform());
  });
  return t;
}

Tensor& Tensor::set_requires_grad(bool v) {
  impl->requires_grad = v;
  impl->tracked = v;
  return *this;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor has shape " + shape_str(shape()));
  }
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    return static_cast<double>(impl->values<T>()[0]);
  });
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw DimensionError("at: index rank mismatch");
  }
  auto st = element_strides(shape());
  int64_t off = 0;
  size_t i = 0;
  for (int64_t ix : index) {
    if (ix < 0 || ix >= shape()[i]) throw DimensionError("at: index out of range");
    off += ix * st[i++];
  }
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    return static_cast<double>(impl->values<T>()[off]);
  });
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<size_t>(numel()));
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = impl->values<T>();
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(v[i]);
  });
  return out;
}

std::vector<double> Tensor::grad_to_vector() const {
  std::vector<double> out(static_cast<size_t>(numel()), 0.0);
  if (!impl->has_grad()) return out;
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = impl->grads<T>();
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(v[i]);
  });
  return out;
}

void Tensor::set_values(const std::vector<double>& values) {
  if (static_cast<int64_t>(values.size()) != numel()) {
    throw DimensionError("set_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape()));
  }
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = impl->values<T>();
    for (size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  });
}

void Tensor::zero_grad() { impl->grad.clear(); }

Tensor Tensor::detach() const {
  auto copy = make_impl(shape(), dtype());
  copy->data = impl->data;
  return Tensor(copy);
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype()) return detach();
  Tensor t = zeros(shape(), dt);
  auto vals = to_vector();
  t.set_values(vals);
  return t;
}

// ---------------------------------------------------------------------------
// Tape / NoGrad
// ---------------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

bool Tape::recording() { return g_active_tape != nullptr && g_no_grad_depth == 0; }

Tape::Scope::Scope(Tape& t) {
  if (g_active_tape != nullptr) {
    throw ContractError("Tape::Scope: a tape is already active");
  }
  g_active_tape = &t;
}

Tape::Scope::~Scope() { g_active_tape = nullptr; }

void Tape::clear() { records_.clear(); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a defined scalar tensor");
  }
  if (!loss.impl->tracked) {
    throw ContractError("backward: loss is not connected to any tracked tensor");
  }
  loss.impl->ensure_grad();
  dispatch(loss.dtype(), [&](auto tag) {
    using T = decltype(tag);
    loss.impl->grads<T>()[0] = T(1);
  });
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    (*it)();
  }
  clear();
}

NoGrad::NoGrad() { ++g_no_grad_depth; }
NoGrad::~NoGrad() { --g_no_grad_depth; }

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

namespace {
uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
}  // namespace

double Rng::uniform() {
  return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::gumbel() {
  double u = uniform();
  u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

uint64_t Rng::next_index(uint64_t n) {
  if (n == 0) throw ParameterError("next_index: n must be positive");
  return gen_() % n;  // modulo bias is ~n/2^64, irrelevant at our sizes
}

Rng Rng::derive(uint64_t tag) const {
  return Rng(splitmix64(seed_state_ ^ splitmix64(tag)));
}

// seed_state_ is captured at construction (the generator itself is opaque).

// ---------------------------------------------------------------------------
// matmul / bmm
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " @ " + shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_impl({m, n}, a.dtype());
  auto ai = a.impl, bi = b.impl;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    CMatMap<T> A(ai->values<T>().data(), m, k);
    CMatMap<T> B(bi->values<T>().data(), k, n);
    MatMap<T> C(out->values<T>().data(), m, n);
    C.noalias() = A * B;
  });
  Tensor result(out);
  finish_op(result, {&a, &b}, [ai, bi, out, m, k, n]() {
    if (!out->has_grad()) return;
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      CMatMap<T> A(ai->values<T>().data(), m, k);
      CMatMap<T> B(bi->values<T>().data(), k, n);
      CMatMap<T> G(out->grads<T>().data(), m, n);
      if (ai->tracked) {
        ai->ensure_grad();
        MatMap<T> dA(ai->grads<T>().data(), m, k);
        dA.noalias() += G * B.transpose();
      }
      if (bi->tracked) {
        bi->ensure_grad();
        MatMap<T> dB(bi->grads<T>().data(), k, n);
        dB.noalias() += A.transpose() * G;
      }
    });
  });
  return result;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require_same_dtype(a, b, "bmm");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw DimensionError("bmm: expected matching 3-D batches, got " +
                         shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  }
  const int64_t g = a.dim(0);
  const int64_t am = a.dim(1), an = a.dim(2);
  const int64_t bm = b.dim(1), bn = b.dim(2);
  const int64_t m = trans_a ? an : am;
  const int64_t ka = trans_a ? am : an;
  const int64_t kb = trans_b ? bn : bm;
  const int64_t n = trans_b ? bm : bn;
  if (ka != kb) {
    throw DimensionError("bmm: inner dims differ for " + shape_str(a.shape()) +
                         " @ " + shape_str(b.shape()));
  }
  auto out = make_impl({g, m, n}, a.dtype());
  auto ai = a.impl, bi = b.impl;
  const int64_t k = ka;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = ai->values<T>().data();
    const T* pb = bi->values<T>().data();
    T* pc = out->values<T>().data();
    for (int64_t i = 0; i < g; ++i) {
      CMatMap<T> A(pa + i * am * an, am, an);
      CMatMap<T> B(pb + i * bm * bn, bm, bn);
      MatMap<T> C(pc + i * m * n, m, n);
      if (!trans_a && !trans_b) C.noalias() = A * B;
      else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
      else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
      else C.noalias() = A.transpose() * B.transpose();
    }
  });
  Tensor result(out);
  finish_op(result, {&a, &b},
            [ai, bi, out, g, am, an, bm, bn, m, n, k, trans_a, trans_b]() {
    if (!out->has_grad()) return;
    if (ai->tracked) ai->ensure_grad();
    if (bi->tracked) bi->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* pa = ai->values<T>().data();
      const T* pb = bi->values<T>().data();
      const T* pg = out->grads<T>().data();
      T* pda = ai->tracked ? ai->grads<T>().data() : nullptr;
      T* pdb = bi->tracked ? bi->grads<T>().data() : nullptr;
      for (int64_t i = 0; i < g; ++i) {
        CMatMap<T> A(pa + i * am * an, am, an);
        CMatMap<T> B(pb + i * bm * bn, bm, bn);
        CMatMap<T> G(pg + i * m * n, m, n);
        // With MA = opA(A) (m x k) and MB = opB(B) (k x n):
        //   dMA = G * MB^T, dMB = MA^T * G, transposed back onto A/B.
        if (pda) {
          MatMap<T> dA(pda + i * am * an, am, an);
          if (!trans_a && !trans_b) dA.noalias() += G * B.transpose();
          else if (!trans_a && trans_b) dA.noalias() += G * B;
          else if (trans_a && !trans_b) dA.noalias() += B * G.transpose();
          else dA.noalias() += B.transpose() * G.transpose();
        }
        if (pdb) {
          MatMap<T> dB(pdb + i * bm * bn, bm, bn);
          if (!trans_a && !trans_b) dB.noalias() += A.transpose() * G;
          else if (!trans_a && trans_b) dB.noalias() += G.transpose() * A;
          else if (trans_a && !trans_b) dB.noalias() += A * G;
          else dB.noalias() += G.transpose() * A.transpose();
        }
      }
    });
  });
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul); }
Tensor divide(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Div); }

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x * c; },
                  [c](double, double) { return c; });
}

Tensor sub_from_scalar(double c, const Tensor& a) {
  return unary_op(a, [c](double x) { return c - x; },
                  [](double, double) { return -1.0; });
}

Tensor add_n(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ContractError("add_n: empty input list");
  for (const Tensor& t : xs) {
    if (t.shape() != xs[0].shape() || t.dtype() != xs[0].dtype()) {
      throw DimensionError("add_n: mismatched inputs");
    }
  }
  auto out = make_impl(xs[0].shape(), xs[0].dtype());
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(xs.size());
  for (const Tensor& t : xs) impls.push_back(t.impl);
  dispatch(out->dtype, [&](auto tag) {
    using T = decltype(tag);
    auto y = out->values<T>();
    for (auto& impl : impls) {
      auto x = impl->values<T>();
      for (int64_t i = 0; i < static_cast<int64_t>(y.size()); ++i) y[i] += x[i];
    }
  });
  Tensor result(out);
  std::vector<const Tensor*> ptrs;
  bool any = false;
  for (const Tensor& t : xs) any = any || t.impl->tracked;
  if (Tape::recording() && any) {
    result.impl->tracked = true;
    Tape::active()->record([impls, out]() {
      if (!out->has_grad()) return;
      dispatch(out->dtype, [&](auto tag) {
        using T = decltype(tag);
        auto g = out->grads<T>();
        for (auto& impl : impls) {
          if (!impl->tracked) continue;
          impl->ensure_grad();
          auto d = impl->grads<T>();
          for (int64_t i = 0; i < static_cast<int64_t>(g.size()); ++i) d[i] += g[i];
        }
      });
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_op(a, [slope](double x) { return x > 0 ? x : slope * x; },
                  [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a,
                  [](double x) {
                    if (!(x > 0.0)) {
                      throw DomainError(
                          "log: input must be strictly positive, got " +
                          std::to_string(x));
                    }
                    return std::log(x);
                  },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(a,
                  [](double x) {
                    if (x < 0.0) throw DomainError("sqrt: negative input");
                    return std::sqrt(x);
                  },
                  [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ParameterError("clamp: lo must be <= hi");
  return unary_op(a,
                  [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                  [lo, hi](double x, double) {
                    return (x >= lo && x <= hi) ? 1.0 : 0.0;
                  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  int64_t known = 1, infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: multiple -1 dims");
      infer = static_cast<int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.numel() % known != 0) {
      throw DimensionError("reshape: cannot infer dim for " + shape_str(shape));
    }
    shape[static_cast<size_t>(infer)] = a.numel() / known;
  }
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " +
                         shape_str(shape) + " changes element count");
  }
  auto out = make_impl(shape, a.dtype());
  out->data = a.impl->data;
  auto ai = a.impl;
  Tensor result(out);
  finish_op(result, {&a}, [ai, out]() {
    if (!out->has_grad()) return;
    ai->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto g = out->grads<T>();
      auto d = ai->grads<T>();
      for (int64_t i = 0; i < static_cast<int64_t>(g.size()); ++i) d[i] += g[i];
    });
  });
  return result;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected 2-D tensor");
  return transpose_axes(a, 0, 1);
}

Tensor transpose_axes(const Tensor& a, int axis0, int axis1) {
  checked_axis(a, axis0, "transpose_axes");
  checked_axis(a, axis1, "transpose_axes");
  Shape oshape = a.shape();
  std::swap(oshape[static_cast<size_t>(axis0)], oshape[static_cast<size_t>(axis1)]);
  // in-strides rearranged to out axis order
  auto istr = element_strides(a.shape());
  std::swap(istr[static_cast<size_t>(axis0)], istr[static_cast<size_t>(axis1)]);
  auto out = make_impl(oshape, a.dtype());
  auto ai = a.impl;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = ai->values<T>();
    auto y = out->values<T>();
    for_each_strided(oshape, istr, [&](int64_t io, int64_t ii) { y[io] = x[ii]; });
  });
  Tensor result(out);
  finish_op(result, {&a}, [ai, out, oshape, istr]() {
    if (!out->has_grad()) return;
    ai->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto g = out->grads<T>();
      auto d = ai->grads<T>();
      for_each_strided(oshape, istr, [&](int64_t io, int64_t ii) { d[ii] += g[io]; });
    });
  });
  return result;
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  checked_axis(a, axis, "slice");
  const int64_t dim = a.dim(axis);
  if (start < 0 || len <= 0 || start + len > dim) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for axis " +
                         std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  Shape oshape = a.shape();
  oshape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  auto out = make_impl(oshape, a.dtype());
  auto ai = a.impl;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = ai->values<T>();
    auto y = out->values<T>();
    for (int64_t o = 0; o < outer; ++o) {
      const T* src = x.data() + (o * dim + start) * inner;
      T* dst = y.data() + o * len * inner;
      std::copy(src, src + len * inner, dst);
    }
  });
  Tensor result(out);
  finish_op(result, {&a}, [ai, out, outer, inner, dim, start, len]() {
    if (!out->has_grad()) return;
    ai->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto g = out->grads<T>();
      auto d = ai->grads<T>();
      for (int64_t o = 0; o < outer; ++o) {
        const T* src = g.data() + o * len * inner;
        T* dst = d.data() + (o * dim + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  });
  return result;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat: empty input list");
  const Tensor& first = xs[0];
  checked_axis(first, axis, "concat");
  int64_t cat_dim = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != first.rank() || t.dtype() != first.dtype()) {
      throw DimensionError("concat: mismatched inputs");
    }
    for (int i = 0; i < first.rank(); ++i) {
      if (i != axis && t.dim(i) != first.dim(i)) {
        throw DimensionError("concat: shape " + shape_str(t.shape()) +
                             " incompatible with " + shape_str(first.shape()));
      }
    }
    cat_dim += t.dim(axis);
  }
  Shape oshape = first.shape();
  oshape[static_cast<size_t>(axis)] = cat_dim;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(i);
  for (int i = axis + 1; i < first.rank(); ++i) inner *= first.dim(i);
  auto out = make_impl(oshape, first.dtype());
  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<int64_t> dims;
  for (const Tensor& t : xs) {
    impls.push_back(t.impl);
    dims.push_back(t.dim(axis));
  }
  dispatch(first.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto y = out->values<T>();
    int64_t off = 0;
    for (size_t j = 0; j < impls.size(); ++j) {
      auto x = impls[j]->values<T>();
      for (int64_t o = 0; o < outer; ++o) {
        const T* src = x.data() + o * dims[j] * inner;
        T* dst = y.data() + (o * cat_dim + off) * inner;
        std::copy(src, src + dims[j] * inner, dst);
      }
      off += dims[j];
    }
  });
  Tensor result(out);
  bool any = false;
  for (const Tensor& t : xs) any = any || t.impl->tracked;
  if (Tape::recording() && any) {
    result.impl->tracked = true;
    Tape::active()->record([impls, dims, out, outer, inner, cat_dim]() {
      if (!out->has_grad()) return;
      dispatch(out->dtype, [&](auto tag) {
        using T = decltype(tag);
        auto g = out->grads<T>();
        int64_t off = 0;
        for (size_t j = 0; j < impls.size(); ++j) {
          if (impls[j]->tracked) {
            impls[j]->ensure_grad();
            auto d = impls[j]->grads<T>();
            for (int64_t o = 0; o < outer; ++o) {
              const T* src = g.data() + (o * cat_dim + off) * inner;
              T* dst = d.data() + o * dims[j] * inner;
              for (int64_t i = 0; i < dims[j] * inner; ++i) dst[i] += src[i];
            }
          }
          off += dims[j];
        }
      });
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  auto out = make_impl({1}, a.dtype());
  auto ai = a.impl;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = ai->values<T>();
    T s = 0;
    for (T v : x) s += v;
    out->values<T>()[0] = s;
  });
  Tensor result(out);
  finish_op(result, {&a}, [ai, out]() {
    if (!out->has_grad()) return;
    ai->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      T g = out->grads<T>()[0];
      auto d = ai->grads<T>();
      for (auto& v : d) v += g;
    });
  });
  return result;
}

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
  checked_axis(a, axis, "sum_axis");
  const int64_t mid = a.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  Shape oshape;
  for (int i = 0; i < a.rank(); ++i) {
    if (i == axis) {
      if (keepdim) oshape.push_back(1);
    } else {
      oshape.push_back(a.dim(i));
    }
  }
  if (oshape.empty()) oshape.push_back(1);
  auto out = make_impl(oshape, a.dtype());
  auto ai = a.impl;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = ai->values<T>();
    auto y = out->values<T>();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t m = 0; m < mid; ++m) {
        const T* src = x.data() + (o * mid + m) * inner;
        T* dst = y.data() + o * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
  Tensor result(out);
  finish_op(result, {&a}, [ai, out, outer, mid, inner]() {
    if (!out->has_grad()) return;
    ai->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto g = out->grads<T>();
      auto d = ai->grads<T>();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t m = 0; m < mid; ++m) {
          T* dst = d.data() + (o * mid + m) * inner;
          const T* src = g.data() + o * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      }
    });
  });
  return result;
}

Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_axis(const Tensor& a, int axis, bool keepdim) {
  checked_axis(a, axis, "mean_axis");
  return mul_scalar(sum_axis(a, axis, keepdim),
                    1.0 / static_cast<double>(a.dim(axis)));
}

// ---------------------------------------------------------------------------
// softmax / gumbel / graph helpers
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x, const Tensor* mask) {
  if (x.rank() != 2) throw DimensionError("softmax_rows: expected 2-D tensor");
  if (mask != nullptr && mask->shape() != x.shape()) {
    throw DimensionError("softmax_rows: mask shape " + shape_str(mask->shape()) +
                         " != input shape " + shape_str(x.shape()));
  }
  const int64_t rows = x.dim(0), cols = x.dim(1);
  auto out = make_impl(x.shape(), x.dtype());
  auto xi = x.impl;
  auto mi = mask != nullptr ? mask->impl : nullptr;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = xi->values<T>();
    auto yv = out->values<T>();
    std::span<const T> mv;
    if (mi) mv = mi->values<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = xv.data() + r * cols;
      T* yr = yv.data() + r * cols;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < cols; ++c) {
        bool removed = mi && static_cast<double>(mv[r * cols + c]) > 0.5;
        if (!removed) mx = std::max(mx, static_cast<double>(xr[c]));
      }
      if (!std::isfinite(mx)) {
        throw DomainError("softmax_rows: row " + std::to_string(r) +
                          " is fully masked");
      }
      double sum = 0.0;
      for (int64_t c = 0; c < cols; ++c) {
        bool removed = mi && static_cast<double>(mv[r * cols + c]) > 0.5;
        double e = removed ? 0.0 : std::exp(static_cast<double>(xr[c]) - mx);
        yr[c] = static_cast<T>(e);
        sum += e;
      }
      for (int64_t c = 0; c < cols; ++c) {
        yr[c] = static_cast<T>(static_cast<double>(yr[c]) / sum);
      }
    }
  });
  Tensor result(out);
  finish_op(result, {&x}, [xi, out, rows, cols]() {
    if (!out->has_grad()) return;
    xi->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto y = out->values<T>();
      auto g = out->grads<T>();
      auto d = xi->grads<T>();
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * cols;
        const T* gr = g.data() + r * cols;
        T* dr = d.data() + r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
          dot += static_cast<double>(gr[c]) * static_cast<double>(yr[c]);
        }
        for (int64_t c = 0; c < cols; ++c) {
          dr[c] += static_cast<T>(static_cast<double>(yr[c]) *
                                  (static_cast<double>(gr[c]) - dot));
        }
      }
    });
  });
  return result;
}

Tensor gumbel_softmax(const Tensor& logits, double tau, GumbelMode mode,
                      Rng& rng) {
  if (!(tau > 0.0)) throw ParameterError("gumbel_softmax: temperature must be > 0");
  if (logits.rank() < 1 || logits.dim(logits.rank() - 1) < 2) {
    throw DimensionError("gumbel_softmax: last axis needs >= 2 categories");
  }
  const int64_t cols = logits.dim(logits.rank() - 1);
  const int64_t rows = logits.numel() / cols;
  auto out = make_impl(logits.shape(), logits.dtype());
  auto li = logits.impl;
  // Soft probabilities are kept (in double) for the straight-through gradient.
  auto soft = std::make_shared<std::vector<double>>(
      static_cast<size_t>(logits.numel()));
  dispatch(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto lv = li->values<T>();
    auto yv = out->values<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* lr = lv.data() + r * cols;
      T* yr = yv.data() + r * cols;
      double* sr = soft->data() + r * cols;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < cols; ++c) {
        double z = (static_cast<double>(lr[c]) + rng.gumbel()) / tau;
        sr[c] = z;
        mx = std::max(mx, z);
      }
      double sum = 0.0;
      for (int64_t c = 0; c < cols; ++c) {
        sr[c] = std::exp(sr[c] - mx);
        sum += sr[c];
      }
      int64_t arg = 0;
      for (int64_t c = 0; c < cols; ++c) {
        sr[c] /= sum;
        if (sr[c] > sr[arg]) arg = c;
      }
      if (mode == GumbelMode::Soft) {
        for (int64_t c = 0; c < cols; ++c) yr[c] = static_cast<T>(sr[c]);
      } else {
        for (int64_t c = 0; c < cols; ++c) yr[c] = static_cast<T>(c == arg ? 1.0 : 0.0);
      }
    }
  });
  Tensor result(out);
  finish_op(result, {&logits}, [li, out, soft, rows, cols, tau]() {
    if (!out->has_grad()) return;
    li->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto g = out->grads<T>();
      auto d = li->grads<T>();
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g.data() + r * cols;
        const double* sr = soft->data() + r * cols;
        T* dr = d.data() + r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
          dot += static_cast<double>(gr[c]) * sr[c];
        }
        for (int64_t c = 0; c < cols; ++c) {
          dr[c] += static_cast<T>(sr[c] * (static_cast<double>(gr[c]) - dot) / tau);
        }
      }
    });
  });
  return result;
}

Tensor hard_threshold(const Tensor& a, double thr) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.impl->values<T>();
    auto y = out.impl->values<T>();
    for (int64_t i = 0; i < static_cast<int64_t>(x.size()); ++i) {
      y[i] = static_cast<T>(static_cast<double>(x[i]) >= thr ? 1.0 : 0.0);
    }
  });
  return out;
}

Tensor row_normalize_or_identity(const Tensor& a) {
  if (a.rank() != 2 && a.rank() != 3) {
    throw DimensionError("row_normalize_or_identity: expected 2-D or 3-D tensor");
  }
  const int64_t n = a.dim(a.rank() - 1);
  if (a.dim(a.rank() - 2) != n) {
    throw DimensionError("row_normalize_or_identity: trailing dims must be square, got " +
                         shape_str(a.shape()));
  }
  const int64_t groups = a.numel() / (n * n);
  auto out = make_impl(a.shape(), a.dtype());
  auto ai = a.impl;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = ai->values<T>();
    auto y = out->values<T>();
    for (int64_t gidx = 0; gidx < groups; ++gidx) {
      for (int64_t r = 0; r < n; ++r) {
        const T* xr = x.data() + (gidx * n + r) * n;
        T* yr = y.data() + (gidx * n + r) * n;
        double s = 0.0;
        for (int64_t c = 0; c < n; ++c) s += static_cast<double>(xr[c]);
        if (s == 0.0) {
          for (int64_t c = 0; c < n; ++c) yr[c] = static_cast<T>(c == r ? 1.0 : 0.0);
        } else if (s < 0.0) {
          throw DomainError("row_normalize_or_identity: negative row sum");
        } else {
          for (int64_t c = 0; c < n; ++c) {
            yr[c] = static_cast<T>(static_cast<double>(xr[c]) / s);
          }
        }
      }
    }
  });
  Tensor result(out);
  finish_op(result, {&a}, [ai, out, groups, n]() {
    if (!out->has_grad()) return;
    ai->ensure_grad();
    dispatch(out->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto x = ai->values<T>();
      auto y = out->values<T>();
      auto g = out->grads<T>();
      auto d = ai->grads<T>();
      for (int64_t gidx = 0; gidx < groups; ++gidx) {
        for (int64_t r = 0; r < n; ++r) {
          const int64_t base = (gidx * n + r) * n;
          double s = 0.0;
          for (int64_t c = 0; c < n; ++c) s += static_cast<double>(x[base + c]);
          if (s == 0.0) continue;  // identity row: no dependence on inputs
          double dot = 0.0;
          for (int64_t c = 0; c < n; ++c) {
            dot += static_cast<double>(g[base + c]) * static_cast<double>(y[base + c]);
          }
          for (int64_t c = 0; c < n; ++c) {
            d[base + c] += static_cast<T>(
                (static_cast<double>(g[base + c]) - dot) / s);
          }
        }
      }
    });
  });
  return result;
}

bool all_finite(const Tensor& a) {
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.impl->values<T>();
    for (T v : x) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  });
}

void check_finite(const Tensor& a, const std::string& what) {
  if (!all_finite(a)) {
    throw NumericError(what + ": non-finite value encountered");
  }
}

}  // namespace dpad
