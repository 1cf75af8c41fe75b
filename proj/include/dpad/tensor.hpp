#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dpad/errors.hpp"

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every operation computes its result eagerly and, while a Tape is active,
// records a closure that propagates gradients from the output back to its
// inputs. Tape::backward replays the records in reverse and then clears the
// tape. Gradients accumulate (+=) into lazily allocated buffers, so shared
// subexpressions are handled correctly.
//
// Storage is float64 by default; float32 is available for training where the
// precision is acceptable. Binary operations require matching dtypes.
//
// Broadcasting follows the usual trailing-alignment rules: shapes are aligned
// at the last axis, and each axis pair must be equal or one of them 1.

namespace dpad {

enum class DType : uint8_t { F64, F32 };

inline size_t dtype_size(DType dt) { return dt == DType::F64 ? 8 : 4; }
inline const char* dtype_name(DType dt) { return dt == DType::F64 ? "f64" : "f32"; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Rng;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::F64;
  bool requires_grad = false;  // leaf parameter flag
  bool tracked = false;        // reachable from a leaf within the active tape
  std::vector<std::byte> data;
  std::vector<std::byte> grad;  // empty until first accumulation

  int64_t numel() const { return shape_numel(shape); }

  template <typename T>
  std::span<T> values() {
    return {reinterpret_cast<T*>(data.data()), data.size() / sizeof(T)};
  }
  template <typename T>
  std::span<const T> values() const {
    return {reinterpret_cast<const T*>(data.data()), data.size() / sizeof(T)};
  }
  template <typename T>
  std::span<T> grads() {
    return {reinterpret_cast<T*>(grad.data()), grad.size() / sizeof(T)};
  }

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad();  // allocate zero-filled gradient buffer if absent
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt = DType::F64);
  static Tensor full(Shape shape, double value, DType dt = DType::F64);
  static Tensor from_data(Shape shape, const std::vector<double>& values,
                          DType dt = DType::F64);
  static Tensor scalar(double value, DType dt = DType::F64);
  // Elementwise uniform draws in [lo, hi); consumes numel draws from rng.
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        DType dt = DType::F64);

  bool defined() const { return impl != nullptr; }
  const Shape& shape() const { return impl->shape; }
  int rank() const { return static_cast<int>(impl->shape.size()); }
  int64_t dim(int axis) const { return impl->shape[static_cast<size_t>(axis)]; }
  int64_t numel() const { return impl->numel(); }
  DType dtype() const { return impl->dtype; }

  Tensor& set_requires_grad(bool v = true);
  bool requires_grad() const { return impl->requires_grad; }
  bool tracked() const { return impl->tracked; }

  // Scalar/value access; converts to double regardless of dtype.
  double item() const;
  double at(std::initializer_list<int64_t> index) const;
  std::vector<double> to_vector() const;
  std::vector<double> grad_to_vector() const;  // zeros if no grad accumulated

  // Leaf mutation used by optimizers and loaders; never recorded on a tape.
  void set_values(const std::vector<double>& values);
  void zero_grad();

  Tensor detach() const;          // value copy, not tracked
  Tensor astype(DType dt) const;  // value copy-cast, not tracked

  std::shared_ptr<TensorImpl> impl;

  explicit Tensor(std::shared_ptr<TensorImpl> i) : impl(std::move(i)) {}
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  // Propagates d(loss)/d(x) into the grad buffers of every tracked tensor that
  // participated in loss, then clears the tape. loss must be a tracked scalar.
  void backward(const Tensor& loss);
  void clear();
  size_t size() const { return records_.size(); }

  void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

  static Tape* active();
  // True when an op should record: a tape is active and no NoGrad scope is open.
  static bool recording();

  // RAII activation; nesting a second scope while one is active is an error.
  struct Scope {
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
  };

 private:
  std::vector<std::function<void()>> records_;
};

// Suspends recording (and tracked-flag propagation) while alive.
struct NoGrad {
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

// ---------------------------------------------------------------------------
// Deterministic random source
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed), seed_state_(seed) {}

  // [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller (second draw of each pair is cached).
  double normal();
  // Standard Gumbel: -log(-log(u)), u clamped to [1e-12, 1 - 1e-12].
  double gumbel();
  // Integer in [0, n).
  uint64_t next_index(uint64_t n);
  // Independent deterministic substream.
  Rng derive(uint64_t tag) const;

 private:
  std::mt19937_64 gen_;
  uint64_t seed_state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// matmul: (m x k) @ (k x n) -> (m x n)
Tensor matmul(const Tensor& a, const Tensor& b);
// bmm: (g x m x k) @ (g x k x n) -> (g x m x n); trans_a/trans_b transpose the
// trailing two axes of the corresponding input before multiplying.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false,
           bool trans_b = false);

// Elementwise with broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor sub_from_scalar(double c, const Tensor& a);  // c - a
inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// Elementwise sum of same-shaped tensors.
Tensor add_n(const std::vector<Tensor>& xs);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // DomainError on non-positive input
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
// Gradient passes through inside [lo, hi] (inclusive) and is zero outside.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor reshape(const Tensor& a, Shape shape);  // one axis may be -1
Tensor transpose(const Tensor& a);             // 2-D
Tensor transpose_axes(const Tensor& a, int axis0, int axis1);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& xs, int axis);

Tensor sum_all(const Tensor& a);  // -> scalar (shape {1})
Tensor sum_axis(const Tensor& a, int axis, bool keepdim = false);
Tensor mean_all(const Tensor& a);
Tensor mean_axis(const Tensor& a, int axis, bool keepdim = false);

// Row softmax over a 2-D tensor, stabilized by row-max subtraction. mask, if
// given, has the same shape; entries equal to 1 are REMOVED (probability 0).
// A fully removed row raises DomainError.
Tensor softmax_rows(const Tensor& x, const Tensor* mask = nullptr);

enum class GumbelMode { Soft, HardStraightThrough };

// Samples relaxed categorical variables over the last axis of `logits` (size
// 2 categories or more). Soft returns the tempered softmax; HardStraightThrough
// returns exact one-hot rows whose gradient is that of the soft sample.
// Consumes one gumbel draw per logit, in row-major order.
Tensor gumbel_softmax(const Tensor& logits, double tau, GumbelMode mode,
                      Rng& rng);

// 1.0 where a >= thr else 0.0; never differentiated.
Tensor hard_threshold(const Tensor& a, double thr);

// Row-normalizes the trailing (N x N) matrices: each row is divided by its
// sum; an exactly all-zero row becomes the corresponding identity row e_i.
// Negative row sums raise DomainError.
Tensor row_normalize_or_identity(const Tensor& a);

bool all_finite(const Tensor& a);
// Throws NumericError mentioning `what` if any element is NaN/Inf.
void check_finite(const Tensor& a, const std::string& what);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return sub_from_scalar(c, a); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return mul_scalar(a, 1.0 / c); }

}  // namespace dpad
