#include "partformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace pf {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

constexpr Scalar kLayerNormEps = 1e-6;

std::shared_ptr<TensorData> new_node(Shape shape) {
  auto n = std::make_shared<TensorData>();
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

Scalar sigmoid(Scalar x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const Scalar e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

void TensorData::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

// ---- Tensor handle ---------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = new_node(std::move(shape));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, Scalar v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<Scalar> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto n = new_node(std::move(shape));
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(Scalar v) { return full({1}, v); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= node_->shape.size()) {
    throw ShapeError("dim index " + std::to_string(i) + " out of range for " +
                     shape_str(node_->shape));
  }
  return node_->shape[i];
}

std::vector<Scalar>& Tensor::data() { return node_->value; }
const std::vector<Scalar>& Tensor::data() const { return node_->value; }
bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool v) { node_->requires_grad = v; }

bool Tensor::has_grad() const {
  return node_->grad.size() == node_->value.size();
}

std::vector<Scalar>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

const std::vector<Scalar>& Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Scalar Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

Scalar Tensor::at(const std::vector<std::size_t>& idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) {
    throw ShapeError("at(): index rank " + std::to_string(idx.size()) +
                     " vs shape " + shape_str(s));
  }
  std::size_t off = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= s[i]) throw ShapeError("at(): index out of range");
    off = off * s[i] + idx[i];
  }
  return node_->value[off];
}

Tensor Tensor::detached() const {
  auto n = new_node(node_->shape);
  n->value = node_->value;
  return Tensor(std::move(n));
}

std::uint64_t Tensor::id() const { return node_->id; }

// ---- grad mode -------------------------------------------------------------

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- op construction -------------------------------------------------------

struct TapeBuilder {
  // Builds the output node; records parents + adjoint only when some input
  // participates in the gradient path and recording is enabled.
  static Tensor make(Shape shape, const std::vector<Tensor>& inputs,
                     std::function<void(TensorData&)> bw) {
    auto n = new_node(std::move(shape));
    bool track = g_grad_enabled;
    if (track) {
      track = false;
      for (const Tensor& t : inputs) track = track || t.requires_grad();
    }
    if (track) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (const Tensor& t : inputs) n->parents.push_back(t.node());
      n->backward_fn = std::move(bw);
    }
    return Tensor(std::move(n));
  }
};

namespace {

Tensor make_op(Shape shape, const std::vector<Tensor>& inputs,
               std::function<void(TensorData&)> bw) {
  return TapeBuilder::make(std::move(shape), inputs, std::move(bw));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor make_tape_op(Shape shape, const std::vector<Tensor>& inputs,
                    std::function<void(TensorData&)> backward) {
  return TapeBuilder::make(std::move(shape), inputs, std::move(backward));
}

// ---- backward engine -------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() expects a defined scalar loss");
  }
  auto root = loss.node();
  if (!root->requires_grad) {
    throw ContractError("backward() on a tensor outside the gradient path");
  }
  std::vector<TensorData*> order;
  std::unordered_set<TensorData*> seen;
  std::vector<TensorData*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    TensorData* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  // Creation order is a topological order; walk it backwards.
  std::sort(order.begin(), order.end(),
            [](TensorData* a, TensorData* b) { return a->id > b->id; });
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (TensorData* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---- elementwise ops -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = make_op(a.shape(), {a, b}, [an = a.node(), bn = b.node()](TensorData& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
    }
  });
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = make_op(a.shape(), {a, b}, [an = a.node(), bn = b.node()](TensorData& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
    }
  });
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = make_op(a.shape(), {a, b}, [an = a.node(), bn = b.node()](TensorData& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        an->grad[i] += o.grad[i] * bn->value[i];
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        bn->grad[i] += o.grad[i] * an->value[i];
      }
    }
  });
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  return out;
}

Tensor add_scalar(const Tensor& a, Scalar v) {
  Tensor out = make_op(a.shape(), {a}, [an = a.node()](TensorData& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
  });
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + v;
  return out;
}

Tensor mul_scalar(const Tensor& a, Scalar v) {
  Tensor out = make_op(a.shape(), {a}, [an = a.node(), v](TensorData& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += v * o.grad[i];
  });
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * v;
  return out;
}

Tensor square(const Tensor& a) {
  Tensor out = make_op(a.shape(), {a}, [an = a.node()](TensorData& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      an->grad[i] += 2.0 * an->value[i] * o.grad[i];
    }
  });
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * av[i];
  return out;
}

Tensor relu0(const Tensor& a) {
  Tensor out = make_op(a.shape(), {a}, [an = a.node()](TensorData& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (an->value[i] > 0) an->grad[i] += o.grad[i];
    }
  });
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0 ? av[i] : 0.0;
  return out;
}

Tensor sqrt_safe(const Tensor& a) {
  Tensor out = make_op(a.shape(), {a}, [an = a.node()](TensorData& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (o.value[i] > 0) an->grad[i] += 0.5 / o.value[i] * o.grad[i];
    }
  });
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = av[i] > 0 ? std::sqrt(av[i]) : 0.0;
  }
  return out;
}

Tensor abs_val(const Tensor& a) {
  Tensor out = make_op(a.shape(), {a}, [an = a.node()](TensorData& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (an->value[i] > 0) {
        an->grad[i] += o.grad[i];
      } else if (an->value[i] < 0) {
        an->grad[i] -= o.grad[i];
      }
    }
  });
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::abs(av[i]);
  return out;
}

Tensor softplus(const Tensor& a) {
  Tensor out = make_op(a.shape(), {a}, [an = a.node()](TensorData& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      an->grad[i] += sigmoid(an->value[i]) * o.grad[i];
    }
  });
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const Scalar x = av[i];
    ov[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  return out;
}

Tensor gelu(const Tensor& a) {
  static const Scalar kC = std::sqrt(2.0 / M_PI);
  static constexpr Scalar kCube = 0.044715;
  Tensor out = make_op(a.shape(), {a}, [an = a.node()](TensorData& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const Scalar x = an->value[i];
      const Scalar u = kC * (x + kCube * x * x * x);
      const Scalar t = std::tanh(u);
      const Scalar du = kC * (1.0 + 3.0 * kCube * x * x);
      const Scalar d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      an->grad[i] += d * o.grad[i];
    }
  });
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const Scalar x = av[i];
    ov[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kCube * x * x * x)));
  }
  return out;
}

// ---- matmul ---------------------------------------------------------------

namespace {

// C[m,n] (+)= op(A) * op(B). Transposed operands are copied into a scratch
// buffer so the hot loop is always the vector-friendly i-k-j form.
void matmul_kernel(const Scalar* A, const Scalar* B, Scalar* C, std::size_t m,
                   std::size_t n, std::size_t k, bool trans_a, bool trans_b,
                   bool accumulate) {
  std::vector<Scalar> scratch_a, scratch_b;
  if (trans_a) {  // A stored [k, m]
    scratch_a.resize(m * k);
    for (std::size_t kk = 0; kk < k; ++kk) {
      for (std::size_t i = 0; i < m; ++i) {
        scratch_a[i * k + kk] = A[kk * m + i];
      }
    }
    A = scratch_a.data();
  }
  if (trans_b) {  // B stored [n, k]
    scratch_b.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        scratch_b[kk * n + j] = B[j * k + kk];
      }
    }
    B = scratch_b.data();
  }
  if (!accumulate) std::fill(C, C + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* arow = A + i * k;
    Scalar* crow = C + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Scalar av = arow[kk];
      const Scalar* brow = B + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct MatDims {
  std::size_t m, n, k;
};

MatDims matmul_dims(const char* op, const Shape& a, const Shape& b,
                    bool trans_a, bool trans_b) {
  const std::size_t m = trans_a ? a[1] : a[0];
  const std::size_t ka = trans_a ? a[0] : a[1];
  const std::size_t kb = trans_b ? b[1] : b[0];
  const std::size_t n = trans_b ? b[0] : b[1];
  if (ka != kb) {
    throw ShapeError(std::string(op) + ": inner extents disagree, " +
                     shape_str(a) + (trans_a ? "^T" : "") + " x " +
                     shape_str(b) + (trans_b ? "^T" : ""));
  }
  return {m, n, ka};
}

// dA and dB of C = op(A) * op(B), expressed through the same kernel.
void matmul_backward_slice(const Scalar* a, const Scalar* b, const Scalar* g,
                           Scalar* da, Scalar* db, MatDims d, bool trans_a,
                           bool trans_b) {
  const auto m = d.m, n = d.n, k = d.k;
  if (da) {
    if (!trans_a) {
      // dA[m,k] = G * op(B)^T
      matmul_kernel(g, b, da, m, k, n, false, !trans_b, true);
    } else {
      // A stored [k,m]: dA = op(B) * G^T
      matmul_kernel(b, g, da, k, m, n, trans_b, true, true);
    }
  }
  if (db) {
    if (!trans_b) {
      // dB[k,n] = op(A)^T * G
      matmul_kernel(a, g, db, k, n, m, !trans_a, false, true);
    } else {
      // B stored [n,k]: dB = G^T * op(A)
      matmul_kernel(g, a, db, n, k, m, true, trans_a, true);
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw ShapeError("matmul: expects 2-D operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const MatDims d = matmul_dims("matmul", a.shape(), b.shape(), trans_a, trans_b);
  Tensor out = make_op(
      {d.m, d.n}, {a, b},
      [an = a.node(), bn = b.node(), d, trans_a, trans_b](TensorData& o) {
        Scalar* da = nullptr;
        Scalar* db = nullptr;
        if (an->requires_grad) {
          an->ensure_grad();
          da = an->grad.data();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          db = bn->grad.data();
        }
        matmul_backward_slice(an->value.data(), bn->value.data(), o.grad.data(),
                              da, db, d, trans_a, trans_b);
      });
  matmul_kernel(a.data().data(), b.data().data(), out.data().data(), d.m, d.n,
                d.k, trans_a, trans_b, false);
  return out;
}

Tensor matmul_collapsed(const Tensor& x, const Tensor& w) {
  if (x.ndim() < 1 || w.ndim() != 2) {
    throw ShapeError("matmul_collapsed: got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  const std::size_t k = x.shape().back();
  if (k != w.dim(0)) {
    throw ShapeError("matmul_collapsed: inner extents disagree, " +
                     shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t n = w.dim(1);
  const std::size_t rows = x.numel() / k;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(n);
  const MatDims d{rows, n, k};
  Tensor out = make_op(
      std::move(out_shape), {x, w}, [xn = x.node(), wn = w.node(), d](TensorData& o) {
        Scalar* dx = nullptr;
        Scalar* dw = nullptr;
        if (xn->requires_grad) {
          xn->ensure_grad();
          dx = xn->grad.data();
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          dw = wn->grad.data();
        }
        matmul_backward_slice(xn->value.data(), wn->value.data(), o.grad.data(),
                              dx, dw, d, false, false);
      });
  matmul_kernel(x.data().data(), w.data().data(), out.data().data(), d.m, d.n,
                d.k, false, false, false);
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.ndim() < 2 || a.ndim() != b.ndim()) {
    throw ShapeError("bmm: rank mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t nd = a.ndim();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < nd; ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw ShapeError("bmm: leading extents disagree, " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    batch *= a.shape()[i];
  }
  const Shape as{a.shape()[nd - 2], a.shape()[nd - 1]};
  const Shape bs{b.shape()[nd - 2], b.shape()[nd - 1]};
  const MatDims d = matmul_dims("bmm", as, bs, trans_a, trans_b);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(d.m);
  out_shape.push_back(d.n);
  const std::size_t a_step = as[0] * as[1];
  const std::size_t b_step = bs[0] * bs[1];
  const std::size_t o_step = d.m * d.n;
  Tensor out = make_op(
      std::move(out_shape), {a, b},
      [an = a.node(), bn = b.node(), d, batch, a_step, b_step, o_step, trans_a,
       trans_b](TensorData& o) {
        const bool ga = an->requires_grad;
        const bool gb = bn->requires_grad;
        if (ga) an->ensure_grad();
        if (gb) bn->ensure_grad();
        for (std::size_t s = 0; s < batch; ++s) {
          matmul_backward_slice(an->value.data() + s * a_step,
                                bn->value.data() + s * b_step,
                                o.grad.data() + s * o_step,
                                ga ? an->grad.data() + s * a_step : nullptr,
                                gb ? bn->grad.data() + s * b_step : nullptr, d,
                                trans_a, trans_b);
        }
      });
  for (std::size_t s = 0; s < batch; ++s) {
    matmul_kernel(a.data().data() + s * a_step, b.data().data() + s * b_step,
                  out.data().data() + s * o_step, d.m, d.n, d.k, trans_a,
                  trans_b, false);
  }
  return out;
}

// ---- row/last-dim ops ------------------------------------------------------

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (v.ndim() != 1 || x.ndim() < 1 || x.shape().back() != v.dim(0)) {
    throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " + " +
                     shape_str(v.shape()));
  }
  const std::size_t n = v.dim(0);
  const std::size_t rows = x.numel() / n;
  Tensor out = make_op(x.shape(), {x, v},
                       [xn = x.node(), vn = v.node(), rows, n](TensorData& o) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const Scalar* g = o.grad.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) vn->grad[j] += g[j];
      }
    }
  });
  const auto& xv = x.data();
  const auto& vv = v.data();
  auto& ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] + vv[j];
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.ndim() < 1 || x.shape().back() < 1) {
    throw ShapeError("softmax_lastdim: bad shape " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  for (Scalar v : x.data()) {
    if (!std::isfinite(v)) {
      throw NumericError("softmax_lastdim: non-finite input");
    }
  }
  Tensor out = make_op(x.shape(), {x}, [xn = x.node(), rows, n](TensorData& o) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* y = o.value.data() + r * n;
      const Scalar* g = o.grad.data() + r * n;
      Scalar dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      Scalar* dx = xn->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  });
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xv.data() + r * n;
    Scalar* y = ov.data() + r * n;
    Scalar mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    Scalar sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(in[j] - mx);
      sum += y[j];
    }
    const Scalar inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
  }
  return out;
}

Tensor log_softmax_lastdim(const Tensor& x) {
  if (x.ndim() < 1 || x.shape().back() < 1) {
    throw ShapeError("log_softmax_lastdim: bad shape " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor out = make_op(x.shape(), {x}, [xn = x.node(), rows, n](TensorData& o) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* y = o.value.data() + r * n;
      const Scalar* g = o.grad.data() + r * n;
      Scalar gsum = 0;
      for (std::size_t j = 0; j < n; ++j) gsum += g[j];
      Scalar* dx = xn->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xv.data() + r * n;
    Scalar* y = ov.data() + r * n;
    Scalar mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    Scalar sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(in[j] - mx);
    const Scalar lse = mx + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) y[j] = in[j] - lse;
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.ndim() < 1) throw ShapeError("layernorm: bad input shape");
  const std::size_t c = x.shape().back();
  if (c < 2) {
    throw ContractError("layernorm: last dim must be >= 2, got " +
                        shape_str(x.shape()));
  }
  if (gain.ndim() != 1 || gain.dim(0) != c || bias.ndim() != 1 ||
      bias.dim(0) != c) {
    throw ShapeError("layernorm: affine params " + shape_str(gain.shape()) +
                     "/" + shape_str(bias.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  // Saved per-row inv-std and normalized values for the adjoint.
  auto inv_std = std::make_shared<std::vector<Scalar>>(rows);
  auto xhat = std::make_shared<std::vector<Scalar>>(rows * c);
  Tensor out = make_op(
      x.shape(), {x, gain, bias},
      [xn = x.node(), gn = gain.node(), bn = bias.node(), inv_std, xhat, rows,
       c](TensorData& o) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* g = o.grad.data() + r * c;
          const Scalar* xh = xhat->data() + r * c;
          if (gn->requires_grad) {
            for (std::size_t j = 0; j < c; ++j) gn->grad[j] += g[j] * xh[j];
          }
          if (bn->requires_grad) {
            for (std::size_t j = 0; j < c; ++j) bn->grad[j] += g[j];
          }
          if (xn->requires_grad) {
            Scalar s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const Scalar dxh = g[j] * gn->value[j];
              s1 += dxh;
              s2 += dxh * xh[j];
            }
            s1 /= static_cast<Scalar>(c);
            s2 /= static_cast<Scalar>(c);
            Scalar* dx = xn->grad.data() + r * c;
            const Scalar inv = (*inv_std)[r];
            for (std::size_t j = 0; j < c; ++j) {
              const Scalar dxh = g[j] * gn->value[j];
              dx[j] += inv * (dxh - s1 - xh[j] * s2);
            }
          }
        }
      });
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  auto& ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xv.data() + r * c;
    Scalar mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += in[j];
    mu /= static_cast<Scalar>(c);
    Scalar var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const Scalar d = in[j] - mu;
      var += d * d;
    }
    var /= static_cast<Scalar>(c);
    const Scalar inv = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = inv;
    Scalar* xh = xhat->data() + r * c;
    Scalar* y = ov.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      xh[j] = (in[j] - mu) * inv;
      y[j] = xh[j] * gv[j] + bv[j];
    }
  }
  return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  Tensor out = make_op({1}, {x}, [xn = x.node()](TensorData& o) {
    xn->ensure_grad();
    const Scalar g = o.grad[0];
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  });
  Scalar s = 0;
  for (Scalar v : x.data()) s += v;
  out.data()[0] = s;
  return out;
}

Tensor mean_all(const Tensor& x) {
  const Scalar inv = 1.0 / static_cast<Scalar>(x.numel());
  Tensor out = make_op({1}, {x}, [xn = x.node(), inv](TensorData& o) {
    xn->ensure_grad();
    const Scalar g = o.grad[0] * inv;
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  });
  Scalar s = 0;
  for (Scalar v : x.data()) s += v;
  out.data()[0] = s * inv;
  return out;
}

Tensor sum_lastdim(const Tensor& x) {
  if (x.ndim() < 1) throw ShapeError("sum_lastdim: bad shape");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out = make_op(std::move(out_shape), {x},
                       [xn = x.node(), rows, n](TensorData& o) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar g = o.grad[r];
      Scalar* dx = xn->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += g;
    }
  });
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar s = 0;
    for (std::size_t j = 0; j < n; ++j) s += xv[r * n + j];
    ov[r] = s;
  }
  return out;
}

// ---- structural ops --------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  }
  Tensor out = make_op(std::move(shape), {x}, [xn = x.node()](TensorData& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
  });
  out.data() = x.data();
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len) {
  if (axis >= x.ndim() || start + len > x.dim(axis) || len == 0) {
    throw ShapeError("slice: axis " + std::to_string(axis) + " [" +
                     std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.shape()[i];
  const std::size_t d = x.dim(axis);
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  Tensor out = make_op(
      std::move(out_shape), {x},
      [xn = x.node(), outer, inner, d, start, len](TensorData& o) {
        xn->ensure_grad();
        for (std::size_t a = 0; a < outer; ++a) {
          for (std::size_t b = 0; b < len; ++b) {
            const Scalar* g = o.grad.data() + (a * len + b) * inner;
            Scalar* dst = xn->grad.data() + (a * d + start + b) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i];
          }
        }
      });
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t b = 0; b < len; ++b) {
      const Scalar* src = xv.data() + (a * d + start + b) * inner;
      Scalar* dst = ov.data() + (a * len + b) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ContractError("concat: no inputs");
  const Shape& base = xs[0].shape();
  if (axis >= base.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of " +
                     shape_str(base));
  }
  std::size_t total_axis = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != base.size()) {
      throw ShapeError("concat: rank mismatch " + shape_str(base) + " vs " +
                       shape_str(t.shape()));
    }
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (i != axis && t.shape()[i] != base[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(base) + " vs " +
                         shape_str(t.shape()));
      }
    }
    total_axis += t.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= base[i];
  for (std::size_t i = axis + 1; i < base.size(); ++i) inner *= base[i];
  Shape out_shape = base;
  out_shape[axis] = total_axis;

  std::vector<std::size_t> lens(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) lens[i] = xs[i].shape()[axis];
  std::vector<std::shared_ptr<TensorData>> nodes;
  for (const Tensor& t : xs) nodes.push_back(t.node());

  Tensor out = make_op(
      std::move(out_shape), xs,
      [nodes, lens, outer, inner, total_axis](TensorData& o) {
        std::size_t off = 0;
        for (std::size_t t = 0; t < nodes.size(); ++t) {
          const std::size_t len = lens[t];
          if (nodes[t]->requires_grad) {
            nodes[t]->ensure_grad();
            for (std::size_t a = 0; a < outer; ++a) {
              for (std::size_t b = 0; b < len; ++b) {
                const Scalar* g =
                    o.grad.data() + (a * total_axis + off + b) * inner;
                Scalar* dst = nodes[t]->grad.data() + (a * len + b) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i];
              }
            }
          }
          off += len;
        }
      });
  auto& ov = out.data();
  std::size_t off = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    const std::size_t len = lens[t];
    const auto& xv = xs[t].data();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t b = 0; b < len; ++b) {
        const Scalar* src = xv.data() + (a * len + b) * inner;
        Scalar* dst = ov.data() + (a * total_axis + off + b) * inner;
        std::copy(src, src + inner, dst);
      }
    }
    off += len;
  }
  return out;
}

Tensor tile0(const Tensor& x, std::size_t reps) {
  if (reps == 0) throw ContractError("tile0: reps must be positive");
  Shape out_shape;
  out_shape.push_back(reps);
  for (std::size_t d : x.shape()) out_shape.push_back(d);
  const std::size_t n = x.numel();
  Tensor out =
      make_op(std::move(out_shape), {x}, [xn = x.node(), reps, n](TensorData& o) {
        xn->ensure_grad();
        for (std::size_t r = 0; r < reps; ++r) {
          const Scalar* g = o.grad.data() + r * n;
          for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g[i];
        }
      });
  auto& ov = out.data();
  const auto& xv = x.data();
  for (std::size_t r = 0; r < reps; ++r) {
    std::copy(xv.begin(), xv.end(), ov.begin() + r * n);
  }
  return out;
}

Tensor expand_mid(const Tensor& x, std::size_t reps) {
  if (x.ndim() != 2 || reps == 0) {
    throw ShapeError("expand_mid: needs a 2-D input, got " +
                     shape_str(x.shape()));
  }
  const std::size_t a = x.dim(0);
  const std::size_t c = x.dim(1);
  Tensor out = make_op({a, reps, c}, {x},
                       [xn = x.node(), a, reps, c](TensorData& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < a; ++i) {
      Scalar* dst = xn->grad.data() + i * c;
      for (std::size_t r = 0; r < reps; ++r) {
        const Scalar* g = o.grad.data() + (i * reps + r) * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
      }
    }
  });
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < a; ++i) {
    const Scalar* src = xv.data() + i * c;
    for (std::size_t r = 0; r < reps; ++r) {
      std::copy(src, src + c, ov.data() + (i * reps + r) * c);
    }
  }
  return out;
}

Tensor rows_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) {
    throw ShapeError("rows_lookup: table must be 2-D, got " +
                     shape_str(table.shape()));
  }
  const std::size_t k = table.dim(0);
  const std::size_t c = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= k) {
      throw DataError("rows_lookup: row id " + std::to_string(id) +
                      " outside table " + shape_str(table.shape()));
    }
  }
  const std::size_t b = ids.size();
  Tensor out = make_op({b, c}, {table}, [tn = table.node(), ids, c](TensorData& o) {
    tn->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Scalar* g = o.grad.data() + i * c;
      Scalar* dst = tn->grad.data() + static_cast<std::size_t>(ids[i]) * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
    }
  });
  const auto& tv = table.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < b; ++i) {
    const Scalar* src = tv.data() + static_cast<std::size_t>(ids[i]) * c;
    std::copy(src, src + c, ov.data() + i * c);
  }
  return out;
}

Tensor gather_lastdim(const Tensor& x, const std::vector<int>& idx,
                      std::size_t j) {
  if (x.ndim() < 1 || j == 0) throw ContractError("gather_lastdim: bad args");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  if (idx.size() != rows * j) {
    throw ContractError("gather_lastdim: expected " + std::to_string(rows * j) +
                        " indices, got " + std::to_string(idx.size()));
  }
  for (int v : idx) {
    if (v < 0 || static_cast<std::size_t>(v) >= c) {
      throw DataError("gather_lastdim: index " + std::to_string(v) +
                      " outside last dim of " + shape_str(x.shape()));
    }
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(j);
  Tensor out = make_op(std::move(out_shape), {x},
                       [xn = x.node(), idx, rows, c, j](TensorData& o) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* g = o.grad.data() + r * j;
      Scalar* dx = xn->grad.data() + r * c;
      for (std::size_t t = 0; t < j; ++t) {
        dx[static_cast<std::size_t>(idx[r * j + t])] += g[t];
      }
    }
  });
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* src = xv.data() + r * c;
    for (std::size_t t = 0; t < j; ++t) {
      ov[r * j + t] = src[static_cast<std::size_t>(idx[r * j + t])];
    }
  }
  return out;
}

// ---- gradient checking ------------------------------------------------------

namespace {

Scalar check_coords(const std::function<Tensor(const Tensor&)>& f, Tensor& x,
                    Scalar step, const std::vector<std::size_t>& coords) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor y = f(x);
  if (y.numel() != 1) {
    throw ContractError("grad_check: function output has shape " +
                        shape_str(y.shape()) + ", expected a scalar");
  }
  backward(y);
  std::vector<Scalar> ad = x.grad();
  Scalar max_err = 0;
  NoGradGuard ng;
  for (std::size_t i : coords) {
    const Scalar saved = x.data()[i];
    x.data()[i] = saved + step;
    const Scalar fp = f(x).item();
    x.data()[i] = saved - step;
    const Scalar fm = f(x).item();
    x.data()[i] = saved;
    const Scalar fd = (fp - fm) / (2.0 * step);
    const Scalar err = std::abs(ad[i] - fd) / std::max(1.0, std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace

Scalar grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  Scalar step) {
  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), 0);
  return check_coords(f, x, step, coords);
}

Scalar grad_check_sampled(const std::function<Tensor(const Tensor&)>& f,
                          Tensor x, Scalar step, std::size_t max_coords,
                          std::mt19937_64& rng) {
  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), 0);
  if (coords.size() > max_coords) {
    for (std::size_t i = 0; i < max_coords; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, coords.size() - 1);
      std::swap(coords[i], coords[d(rng)]);
    }
    coords.resize(max_coords);
  }
  return check_coords(f, x, step, coords);
}

// ---- rng --------------------------------------------------------------------

Scalar Rng::uniform(Scalar lo, Scalar hi) {
  std::uniform_real_distribution<Scalar> d(lo, hi);
  return d(gen);
}

Scalar Rng::normal(Scalar mean, Scalar sigma) {
  std::normal_distribution<Scalar> d(mean, sigma);
  return d(gen);
}

Scalar Rng::trunc_normal(Scalar sigma) {
  for (;;) {
    const Scalar v = normal(0.0, sigma);
    if (std::abs(v) <= 2.0 * sigma) return v;
  }
}

std::size_t Rng::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> d(0, n - 1);
  return d(gen);
}

Tensor Rng::uniform_tensor(Shape shape, Scalar lo, Scalar hi,
                           bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (Scalar& v : t.data()) v = uniform(lo, hi);
  return t;
}

Tensor Rng::normal_tensor(Shape shape, Scalar mean, Scalar sigma,
                          bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (Scalar& v : t.data()) v = normal(mean, sigma);
  return t;
}

Tensor Rng::trunc_normal_tensor(Shape shape, Scalar sigma, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (Scalar& v : t.data()) v = trunc_normal(sigma);
  return t;
}

}  // namespace pf
