#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "partformer/tensor.hpp"

using namespace pf;

namespace {

// Reference triple-loop product, independent of the library kernel.
std::vector<Scalar> naive_matmul(const std::vector<Scalar>& a,
                                 const std::vector<Scalar>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<Scalar> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Scalar s = 0;
      for (std::size_t kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = s;
    }
  }
  return c;
}

Scalar max_abs_diff(const std::vector<Scalar>& a, const std::vector<Scalar>& b) {
  REQUIRE(a.size() == b.size());
  Scalar m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

}  // namespace

TEST_CASE("matmul identity and orthogonal cases") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor prod = matmul(eye, m);
  CHECK(max_abs_diff(prod.data(), m.data()) == 0.0);

  Tensor row = Tensor::from_data({1, 2}, {1, 0});
  Tensor col = Tensor::from_data({2, 1}, {0, 1});
  CHECK(matmul(row, col).item() == 0.0);
}

TEST_CASE("matmul matches the naive triple loop") {
  Rng rng(31);
  Tensor a = rng.uniform_tensor({3, 4}, -1, 1);
  Tensor b = rng.uniform_tensor({4, 2}, -1, 1);
  auto expect = naive_matmul(a.data(), b.data(), 3, 4, 2);
  CHECK(max_abs_diff(matmul(a, b).data(), expect) < 1e-12);
}

TEST_CASE("matmul transpose flags against the naive oracle") {
  Rng rng(7);
  const std::size_t m = 5, k = 3, n = 4;
  Tensor a = rng.uniform_tensor({m, k}, -1, 1);
  Tensor at = rng.uniform_tensor({k, m}, -1, 1);
  Tensor b = rng.uniform_tensor({k, n}, -1, 1);
  Tensor bt = rng.uniform_tensor({n, k}, -1, 1);

  auto transpose = [](const std::vector<Scalar>& v, std::size_t r, std::size_t c) {
    std::vector<Scalar> out(v.size());
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
    }
    return out;
  };
  CHECK(max_abs_diff(matmul(at, b, true, false).data(),
                     naive_matmul(transpose(at.data(), k, m), b.data(), m, k, n)) <
        1e-12);
  CHECK(max_abs_diff(matmul(a, bt, false, true).data(),
                     naive_matmul(a.data(), transpose(bt.data(), n, k), m, k, n)) <
        1e-12);
  CHECK(max_abs_diff(matmul(at, bt, true, true).data(),
                     naive_matmul(transpose(at.data(), k, m),
                                  transpose(bt.data(), n, k), m, k, n)) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul associativity on random conformable triples") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    Tensor a = rng.uniform_tensor({4, 6}, -1, 1);
    Tensor b = rng.uniform_tensor({6, 3}, -1, 1);
    Tensor c = rng.uniform_tensor({3, 5}, -1, 1);
    Tensor left = matmul(matmul(a, b), c);
    Tensor right = matmul(a, matmul(b, c));
    CHECK(max_abs_diff(left.data(), right.data()) < 1e-9);
  }
}

TEST_CASE("bmm equals per-slice naive product") {
  Rng rng(9);
  Tensor a = rng.uniform_tensor({2, 3, 4, 2}, -1, 1);
  Tensor b = rng.uniform_tensor({2, 3, 2, 5}, -1, 1);
  Tensor c = bmm(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 4, 5});
  for (std::size_t s = 0; s < 6; ++s) {
    std::vector<Scalar> as(a.data().begin() + s * 8, a.data().begin() + (s + 1) * 8);
    std::vector<Scalar> bs(b.data().begin() + s * 10, b.data().begin() + (s + 1) * 10);
    std::vector<Scalar> cs(c.data().begin() + s * 20, c.data().begin() + (s + 1) * 20);
    CHECK(max_abs_diff(cs, naive_matmul(as, bs, 4, 2, 5)) < 1e-12);
  }
}

TEST_CASE("softmax closed forms") {
  Tensor u = softmax_lastdim(Tensor::from_data({3}, {0, 0, 0}));
  for (Scalar v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor t = softmax_lastdim(
      Tensor::from_data({2}, {std::log(1.0), std::log(3.0)}));
  CHECK(t.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(t.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

  Tensor big = softmax_lastdim(Tensor::from_data({2}, {1000.0, 0.0}));
  CHECK(std::isfinite(big.data()[0]));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] == doctest::Approx(0.0));
}

TEST_CASE("softmax rows: simplex membership and shift invariance") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(400 + seed);
    Tensor x = rng.uniform_tensor({4, 7}, -5, 5);
    Tensor y = softmax_lastdim(x);
    for (std::size_t r = 0; r < 4; ++r) {
      Scalar sum = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(y.data()[r * 7 + j] >= 0.0);
        sum += y.data()[r * 7 + j];
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
    const Scalar shift = rng.uniform(-3, 3);
    Tensor y2 = softmax_lastdim(add_scalar(x, shift));
    CHECK(max_abs_diff(y.data(), y2.data()) < 1e-9);
  }
}

TEST_CASE("softmax rejects non-finite input") {
  Tensor x = Tensor::from_data({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(softmax_lastdim(x), NumericError);
}

TEST_CASE("log_softmax agrees with log of softmax") {
  Rng rng(12);
  Tensor x = rng.uniform_tensor({3, 5}, -4, 4);
  Tensor a = log_softmax_lastdim(x);
  Tensor b = softmax_lastdim(x);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(a.data()[i] == doctest::Approx(std::log(b.data()[i])).epsilon(1e-10));
  }
}

TEST_CASE("layernorm closed forms") {
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});
  // Constant slice: zero variance, epsilon keeps it finite -> all zeros.
  Tensor c = layernorm(Tensor::full({4}, 3.5), gain, bias);
  for (Scalar v : c.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor y = layernorm(Tensor::from_data({2}, {1.0, -1.0}), g2, b2);
  const Scalar expect = 1.0 / std::sqrt(1.0 + 1e-6);  // mean 0, variance 1
  CHECK(y.data()[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(-expect).epsilon(1e-12));

  Tensor gz = Tensor::zeros({4});
  Tensor bz = Tensor::from_data({4}, {1, 2, 3, 4});
  Rng rng(5);
  Tensor x = rng.uniform_tensor({3, 4}, -2, 2);
  Tensor z = layernorm(x, gz, bz);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(z.data()[r * 4 + j] == bz.data()[j]);
    }
  }
}

TEST_CASE("layernorm requires at least two channels") {
  Tensor g = Tensor::full({1}, 1.0);
  Tensor b = Tensor::zeros({1});
  CHECK_THROWS_AS(layernorm(Tensor::zeros({3, 1}), g, b), ContractError);
}

TEST_CASE("gelu closed forms") {
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(gelu(Tensor::scalar(20.0)).item() == doctest::Approx(20.0).epsilon(1e-9));
  // Independent scalar evaluation of the tanh form.
  const Scalar x = 1.0;
  const Scalar ref =
      0.5 * x *
      (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  CHECK(gelu(Tensor::scalar(x)).item() == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("grad_check closed cases") {
  Rng rng(77);
  // Quadratic: exact at any point.
  auto quad = [](const Tensor& x) { return sum_all(square(x)); };
  CHECK(grad_check(quad, rng.uniform_tensor({6}, -2, 2)) < 1e-8);

  // sum(softmax(x)) is constant 1; the gradient is identically zero.
  auto simplex = [](const Tensor& x) { return sum_all(softmax_lastdim(x)); };
  Tensor x = rng.uniform_tensor({5}, -2, 2);
  CHECK(grad_check(simplex, x) < 1e-8);
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor y = sum_all(softmax_lastdim(x));
  backward(y);
  for (Scalar g : x.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("grad_check rejects non-scalar outputs") {
  auto vec = [](const Tensor& x) { return square(x); };
  CHECK_THROWS_AS(grad_check(vec, Tensor::zeros({3})), ContractError);
}

TEST_CASE("grad_check flags a corrupted adjoint") {
  // An op whose recorded backward is deliberately wrong.
  auto broken_square = [](const Tensor& x) {
    Tensor out = make_tape_op(x.shape(), {x}, [xn = x.node()](TensorData& o) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        xn->grad[i] += 3.0 * xn->value[i] * o.grad[i];  // should be 2x
      }
    });
    for (std::size_t i = 0; i < x.numel(); ++i) {
      out.data()[i] = x.data()[i] * x.data()[i];
    }
    return out;
  };
  Rng rng(3);
  auto f = [&](const Tensor& x) { return sum_all(broken_square(x)); };
  CHECK(grad_check(f, rng.uniform_tensor({4}, 0.5, 2.0)) > 1e-2);
}

TEST_CASE("every primitive's backward matches finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(1000 + seed);
    const Scalar tol = 1e-5;

    CHECK(grad_check([&](const Tensor& x) { return mean_all(gelu(x)); },
                     rng.uniform_tensor({3, 4}, -2, 2)) < tol);
    CHECK(grad_check([&](const Tensor& x) { return mean_all(softplus(x)); },
                     rng.uniform_tensor({5}, -3, 3)) < tol);
    CHECK(grad_check([&](const Tensor& x) { return sum_all(square(x)); },
                     rng.uniform_tensor({4}, -2, 2)) < tol);
    CHECK(grad_check(
              [&](const Tensor& x) { return sum_all(abs_val(x)); },
              rng.uniform_tensor({6}, 0.2, 2.0)) < tol);  // keep away from 0
    CHECK(grad_check([&](const Tensor& x) { return sum_all(sqrt_safe(x)); },
                     rng.uniform_tensor({6}, 0.5, 3.0)) < tol);
    CHECK(grad_check([&](const Tensor& x) { return sum_all(relu0(x)); },
                     rng.uniform_tensor({6}, 0.2, 2.0)) < tol);

    Tensor w = rng.uniform_tensor({4, 3}, -1, 1);
    CHECK(grad_check(
              [&](const Tensor& x) { return mean_all(matmul(x, w)); },
              rng.uniform_tensor({2, 4}, -1, 1)) < tol);
    Tensor xin = rng.uniform_tensor({2, 4}, -1, 1);
    CHECK(grad_check(
              [&](const Tensor& ww) { return mean_all(matmul(xin, ww)); },
              rng.uniform_tensor({4, 3}, -1, 1)) < tol);
    CHECK(grad_check(
              [&](const Tensor& x) {
                return mean_all(matmul_collapsed(x, w));
              },
              rng.uniform_tensor({2, 3, 4}, -1, 1)) < tol);
    Tensor bb = rng.uniform_tensor({2, 2, 3}, -1, 1);
    CHECK(grad_check(
              [&](const Tensor& x) { return mean_all(bmm(x, bb)); },
              rng.uniform_tensor({2, 4, 2}, -1, 1)) < tol);
    CHECK(grad_check(
              [&](const Tensor& x) { return mean_all(bmm(x, bb, false, true)); },
              rng.uniform_tensor({2, 4, 3}, -1, 1)) < tol);

    Tensor vec = rng.uniform_tensor({3}, -1, 1);
    CHECK(grad_check(
              [&](const Tensor& x) { return mean_all(add_rowvec(x, vec)); },
              rng.uniform_tensor({4, 3}, -1, 1)) < tol);
    Tensor mat = rng.uniform_tensor({4, 3}, -1, 1);
    CHECK(grad_check(
              [&](const Tensor& v) { return mean_all(add_rowvec(mat, v)); },
              rng.uniform_tensor({3}, -1, 1)) < tol);

    CHECK(grad_check(
              [&](const Tensor& x) {
                return sum_all(mul(softmax_lastdim(x), x));
              },
              rng.uniform_tensor({2, 5}, -2, 2)) < tol);
    CHECK(grad_check(
              [&](const Tensor& x) {
                return mean_all(gather_lastdim(log_softmax_lastdim(x),
                                               {1, 0, 2}, 1));
              },
              rng.uniform_tensor({3, 4}, -2, 2)) < tol);

    Tensor g = rng.uniform_tensor({4}, 0.5, 1.5);
    Tensor b = rng.uniform_tensor({4}, -0.5, 0.5);
    CHECK(grad_check(
              [&](const Tensor& x) { return mean_all(layernorm(x, g, b)); },
              rng.uniform_tensor({3, 4}, -2, 2)) < tol);
    Tensor lx = rng.uniform_tensor({3, 4}, -2, 2);
    CHECK(grad_check(
              [&](const Tensor& gg) {
                return mean_all(square(layernorm(lx, gg, b)));
              },
              rng.uniform_tensor({4}, 0.5, 1.5)) < tol);

    CHECK(grad_check(
              [&](const Tensor& x) {
                return sum_all(square(slice(x, 1, 1, 2)));
              },
              rng.uniform_tensor({2, 4, 3}, -1, 1)) < tol);
    Tensor other = rng.uniform_tensor({2, 2}, -1, 1);
    CHECK(grad_check(
              [&](const Tensor& x) {
                return sum_all(square(concat({x, other}, 0)));
              },
              rng.uniform_tensor({3, 2}, -1, 1)) < tol);
    CHECK(grad_check(
              [&](const Tensor& x) { return sum_all(square(tile0(x, 3))); },
              rng.uniform_tensor({2, 2}, -1, 1)) < tol);
    CHECK(grad_check(
              [&](const Tensor& x) { return sum_all(square(expand_mid(x, 3))); },
              rng.uniform_tensor({2, 4}, -1, 1)) < tol);
    CHECK(grad_check(
              [&](const Tensor& t) {
                return sum_all(square(rows_lookup(t, {0, 2, 0})));
              },
              rng.uniform_tensor({3, 2}, -1, 1)) < tol);
    CHECK(grad_check(
              [&](const Tensor& x) { return mean_all(sum_lastdim(square(x))); },
              rng.uniform_tensor({3, 4}, -1, 1)) < tol);
    CHECK(grad_check(
              [&](const Tensor& x) {
                return sum_all(square(reshape(x, {6})));
              },
              rng.uniform_tensor({2, 3}, -1, 1)) < tol);
  }
}

TEST_CASE("gradient accumulates once through shared subexpressions") {
  Tensor x = Tensor::scalar(1.5);
  x.set_requires_grad(true);
  Tensor s = add(x, x);
  Tensor t = mul(s, s);  // t = 4x^2, dt/dx = 8x
  backward(t);
  CHECK(x.grad()[0] == doctest::Approx(8.0 * 1.5).epsilon(1e-14));
}

TEST_CASE("tape replay is deterministic for identical seeds") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = rng.uniform_tensor({4, 6}, -1, 1);
    Tensor w1 = rng.uniform_tensor({6, 5}, -1, 1, true);
    Tensor w2 = rng.uniform_tensor({5, 2}, -1, 1, true);
    Tensor h = gelu(matmul(x, w1));
    Tensor loss = mean_all(square(matmul(h, w2)));
    backward(loss);
    return std::tuple{loss.item(), w1.grad(), w2.grad()};
  };
  auto [l1, g1a, g1b] = run(42);
  auto [l2, g2a, g2b] = run(42);
  CHECK(l1 == l2);
  CHECK(g1a == g2a);
  CHECK(g1b == g2b);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::full({3}, 2.0, true);
  NoGradGuard ng;
  Tensor y = square(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("elementwise ops refuse mismatched shapes") {
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(mul(Tensor::zeros({4}), Tensor::zeros({5})), ShapeError);
}

TEST_CASE("rows_lookup validates indices") {
  Tensor table = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(rows_lookup(table, {0, 3}), DataError);
  CHECK_THROWS_AS(rows_lookup(table, {-1}), DataError);
}
