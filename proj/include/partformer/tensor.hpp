#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "partformer/errors.hpp"

namespace pf {

// All tensor math runs in double precision. The desk-scale model is small
// enough that the training path does not need a float32 variant, and the
// gradient checks require doubles anyway.
using Scalar = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData;

// Reverse-mode autodiff handle. A Tensor wraps a shared node holding the
// value buffer, an optional gradient buffer, and the recorded backward
// closure linking it to its inputs. Values are immutable by convention once
// a node has consumers; gradients accumulate during backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<Scalar> data,
                          bool requires_grad = false);
  static Tensor scalar(Scalar v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t i) const;

  std::vector<Scalar>& data();
  const std::vector<Scalar>& data() const;
  bool requires_grad() const;
  void set_requires_grad(bool v);

  bool has_grad() const;
  std::vector<Scalar>& grad();              // allocates zeros on first use
  const std::vector<Scalar>& grad() const;  // throws if absent
  void zero_grad();

  Scalar item() const;  // numel()==1 only
  Scalar at(const std::vector<std::size_t>& idx) const;

  // Same value buffer, detached from the graph (no parents, no grad).
  Tensor detached() const;

  std::shared_ptr<TensorData> node() const { return node_; }
  std::uint64_t id() const;

 private:
  explicit Tensor(std::shared_ptr<TensorData> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorData> node_;
  friend struct TapeBuilder;
};

struct TensorData {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // empty until needed; sized like value after
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TensorData>> parents;
  // Adjoint of this node: reads grad, accumulates into parents' grads.
  std::function<void(TensorData&)> backward_fn;

  void ensure_grad();
};

// Scoped switch that disables tape recording (inference/eval paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// Runs reverse-mode accumulation from a scalar loss. Every recorded node is
// visited exactly once, in reverse creation order (a valid reverse
// topological order since inputs always precede outputs).
void backward(const Tensor& loss);

// ---- primitive ops -------------------------------------------------------
// Elementwise ops require exactly matching shapes; there is no implicit
// broadcasting. Explicit expansion ops (tile0, add_rowvec) cover the model's
// needs and fail loudly on anything else.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, Scalar v);
Tensor mul_scalar(const Tensor& a, Scalar v);
Tensor square(const Tensor& a);
// max(x, 0); subgradient 0 at x == 0.
Tensor relu0(const Tensor& a);
// sqrt with derivative defined as 0 at x == 0 (used on clamped squared
// distances whose zeros are structural).
Tensor sqrt_safe(const Tensor& a);
Tensor abs_val(const Tensor& a);
Tensor softplus(const Tensor& a);  // ln(1 + e^x), overflow-stable
Tensor gelu(const Tensor& a);      // tanh approximation

// 2-D matrix product with optional transposes: op(a) [m,k] x op(b) [k,n].
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);
// x [..., k] times w [k, n] -> [..., n]; leading dims collapse into rows.
Tensor matmul_collapsed(const Tensor& x, const Tensor& w);
// Batched matmul, identical leading dims: a [B..., m, k] x b [B..., k, n].
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false,
           bool trans_b = false);

// x [..., n] + v [n] on every row (last-dim affine bias).
Tensor add_rowvec(const Tensor& x, const Tensor& v);

Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);
// Per-row standardization over the last dim, then affine. eps = 1e-6.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_lastdim(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
// Repeat x along a new leading axis: [d...] -> [reps, d...].
Tensor tile0(const Tensor& x, std::size_t reps);
// Repeat each row along a new middle axis: [a, c] -> [a, reps, c].
Tensor expand_mid(const Tensor& x, std::size_t reps);
// out[i, :] = table[ids[i], :]; gradient scatter-adds into the table.
Tensor rows_lookup(const Tensor& table, const std::vector<int>& ids);
// x [..., C] -> [..., J], row r picks idx[r*J .. r*J+J-1] from its C slots.
Tensor gather_lastdim(const Tensor& x, const std::vector<int>& idx,
                      std::size_t j);

// Escape hatch for composite modules that define their own adjoint. The
// backward closure reads out.grad and accumulates into the inputs' grads.
Tensor make_tape_op(Shape shape, const std::vector<Tensor>& inputs,
                    std::function<void(TensorData&)> backward);

// ---- gradient checking ---------------------------------------------------

// Central finite differences against the autodiff gradient of a scalar
// function. Returns max over coordinates of
// |autodiff - fd| / max(1, |fd|). Checks all coordinates.
Scalar grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  Scalar step = 1e-5);
// Same, but only a random subset of at most max_coords coordinates.
Scalar grad_check_sampled(const std::function<Tensor(const Tensor&)>& f,
                          Tensor x, Scalar step, std::size_t max_coords,
                          std::mt19937_64& rng);

// ---- rng helpers ---------------------------------------------------------

struct Rng {
  explicit Rng(std::uint64_t seed) : gen(seed) {}
  std::mt19937_64 gen;

  Scalar uniform(Scalar lo, Scalar hi);
  Scalar normal(Scalar mean, Scalar sigma);
  // Normal(0, sigma) resampled until |x| <= 2*sigma.
  Scalar trunc_normal(Scalar sigma);
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  Tensor uniform_tensor(Shape shape, Scalar lo, Scalar hi,
                        bool requires_grad = false);
  Tensor normal_tensor(Shape shape, Scalar mean, Scalar sigma,
                       bool requires_grad = false);
  Tensor trunc_normal_tensor(Shape shape, Scalar sigma,
                             bool requires_grad = false);
};

}  // namespace pf
