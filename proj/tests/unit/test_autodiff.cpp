#include <gtest/gtest.h>

#include <functional>
#include <memory>

#include "../support/oracles.hpp"
#include "mgslab/autodiff.hpp"

using namespace mgslab;
using ad::Var;

namespace {

using ScalarFn = std::function<Var(const Var&)>;

double value_at(const ScalarFn& f, const Tensor& x) {
  ad::NoGradGuard ng;
  return f(Var::constant(x)).item();
}

// Gradient of a scalar function of one tensor by central differences.
std::vector<double> fd(const ScalarFn& f, const Tensor& x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (value_at(f, a) - value_at(f, b)) / (2 * h);
  }
  return g;
}

std::vector<double> reverse(const ScalarFn& f, const Tensor& x) {
  Var v = Var::leaf(x);
  auto g = ad::grad(f(v), {v});
  return {g[0].value().data().begin(), g[0].value().data().end()};
}

// First and second order: checks grad f and grad of ||grad f||^2 against differences.
void check_op(const ScalarFn& f, const Tensor& x, double tol = 1e-6) {
  // Differences at h = 1e-6 carry ~1e-10 absolute roundoff, so components far below the
  // largest one are compared against a floor of 1e-4 of it.
  EXPECT_LT(oracle::max_rel_err(reverse(f, x), fd(f, x), 1e-4), tol);
  ScalarFn h = [&](const Var& v) {
    auto g = ad::grad(f(v), {v}, true);
    return ad::sum(ad::square(g[0]));
  };
  ScalarFn h_first = [&](const Var& v) {
    // Value of h needs a graph through v even in finite-difference mode.
    ad::GradModeGuard on(true);
    Var leaf = Var::leaf(v.value());
    auto g = ad::grad(f(leaf), {leaf});
    return Var::constant(Tensor::scalar([&] {
      double s = 0;
      for (double e : g[0].value().data()) s += e * e;
      return s;
    }()));
  };
  EXPECT_LT(oracle::max_rel_err(reverse(h, x), fd(h_first, x), 1e-4), 50 * tol);
}

Tensor rand(Rng& rng, Shape s, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST(Autodiff, ElementwiseOps) {
  Rng rng(1);
  const Tensor x = rand(rng, {3, 4});
  const auto c = std::make_shared<const Tensor>(rand(rng, {3, 4}));
  check_op([](const Var& v) { return ad::sum(ad::mul(v, ad::exp(v))); }, x);
  check_op([](const Var& v) { return ad::sum(ad::div(ad::square(v), ad::add_scalar(ad::square(v), 1.0))); }, x);
  check_op([](const Var& v) { return ad::sum(ad::log(ad::add_scalar(ad::square(v), 0.5))); }, x);
  check_op([](const Var& v) { return ad::sum(ad::sqrt(ad::add_scalar(ad::square(v), 1.0))); }, x);
  const ScalarFn quad = [c](const Var& v) { return ad::sum(ad::square(ad::mul_const(ad::sub(v, ad::scale(v, 0.3)), c))); };
  check_op(quad, x);
  const auto g = reverse(quad, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i], 2 * 0.49 * (*c)[i] * (*c)[i] * x[i], 1e-14);
}

TEST(Autodiff, Reductions) {
  Rng rng(2);
  const Tensor x = rand(rng, {3, 4});
  check_op([](const Var& v) { return ad::sum(ad::square(ad::row_sum(ad::square(v)))); }, x);
  check_op([](const Var& v) { return ad::sum(ad::exp(ad::sum_rows(v))); }, x);
  check_op([](const Var& v) { return ad::sum(ad::square(ad::broadcast_cols(ad::row_sum(v), 5))); }, x);
  check_op([](const Var& v) { return ad::sum(ad::square(ad::broadcast_rows(ad::sum_rows(v), 2))); }, x);
  check_op([](const Var& v) { return ad::sum(ad::square(ad::fill(ad::sum(v), {2, 2}))); }, x);
  check_op([](const Var& v) { return ad::sum(ad::square(ad::sum_groups(ad::repeat_rows(v, 2), 3))); },
           rand(rng, {6, 2}));
}

TEST(Autodiff, ShapeOps) {
  Rng rng(3);
  const Tensor x = rand(rng, {3, 4});
  const Tensor b = rand(rng, {4});
  check_op([](const Var& v) { return ad::sum(ad::exp(ad::reshape(v, {2, 6}))); }, x);
  check_op([&](const Var& v) { return ad::sum(ad::square(ad::add_row_vector(v, Var::constant(b)))); }, x);
  check_op([&](const Var& v) { return ad::sum(ad::square(ad::add_row_vector(Var::constant(x), v))); }, b);
}

TEST(Autodiff, MatmulAllTransposeCases) {
  Rng rng(4);
  const Tensor a = rand(rng, {3, 4});
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      const Tensor b = rand(rng, ta ? (tb ? Shape{2, 3} : Shape{3, 2}) : (tb ? Shape{2, 4} : Shape{4, 2}));
      check_op([&](const Var& v) { return ad::sum(ad::square(ad::matmul(v, Var::constant(b), ta, tb))); }, a);
      check_op([&](const Var& v) { return ad::sum(ad::square(ad::matmul(Var::constant(a), v, ta, tb))); }, b);
    }
  }
}

TEST(Autodiff, BatchedMatmul) {
  Rng rng(5);
  const Tensor a = rand(rng, {2, 3, 4});
  const Tensor b = rand(rng, {2, 4, 2});
  check_op([&](const Var& v) { return ad::sum(ad::square(ad::matmul(v, Var::constant(b)))); }, a);
  check_op([&](const Var& v) { return ad::sum(ad::square(ad::matmul(Var::constant(a), v))); }, b);
}

TEST(Autodiff, Im2colAndPooling) {
  Rng rng(6);
  const ad::ConvGeometry geo{5, 4, 2, 3};
  check_op([&](const Var& v) { return ad::sum(ad::square(ad::im2col(v, geo))); }, rand(rng, {2, 5 * 4 * 2}));
  const Tensor cols = rand(rng, {2 * 3 * 2, 3 * 3 * 2});
  check_op([&](const Var& v) { return ad::sum(ad::square(ad::col2im(v, geo))); }, cols);
  const ad::PoolGeometry pg{4, 2, 3};
  check_op([&](const Var& v) { return ad::sum(ad::square(ad::avg_pool2(v, pg))); }, rand(rng, {2, 4 * 2 * 3}));
  check_op([&](const Var& v) { return ad::sum(ad::square(ad::avg_unpool2(v, pg))); }, rand(rng, {2, 2 * 1 * 3}));
}

TEST(Autodiff, Im2colMatchesNaivePatches) {
  Rng rng(7);
  const ad::ConvGeometry geo{4, 5, 2, 2};
  const Tensor x = rand(rng, {1, 4 * 5 * 2});
  const Tensor cols = ad::im2col(Var::constant(x), geo).value();
  ASSERT_EQ(cols.dim(0), 3u * 4u);
  ASSERT_EQ(cols.dim(1), 2u * 2u * 2u);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t kh = 0; kh < 2; ++kh) {
        for (std::size_t kw = 0; kw < 2; ++kw) {
          for (std::size_t ch = 0; ch < 2; ++ch) {
            EXPECT_EQ(cols(r * 4 + c, (kh * 2 + kw) * 2 + ch), x[((r + kh) * 5 + (c + kw)) * 2 + ch]);
          }
        }
      }
    }
  }
}

TEST(Autodiff, LogSoftmax) {
  Rng rng(8);
  const Tensor x = rand(rng, {3, 4}, 3.0);
  const auto w = std::make_shared<const Tensor>(rand(rng, {3, 4}));
  check_op([w](const Var& v) { return ad::sum(ad::mul_const(ad::log_softmax_rows(v), w)); }, x);
  const Tensor ls = ad::log_softmax_rows(Var::constant(x)).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double z = 0.0;
    for (std::size_t c = 0; c < 4; ++c) z += std::exp(ls(i, c));
    EXPECT_NEAR(z, 1.0, 1e-14);
  }
}

TEST(Autodiff, ThirdOrderThroughCubic) {
  // f(x) = x^3: f' = 3x^2, f'' = 6x, f''' = 6.
  Var x = Var::leaf(Tensor::scalar(2.0));
  Var f = ad::mul(x, ad::square(x));
  Var g1 = ad::grad(f, {x}, true)[0];
  Var g2 = ad::grad(g1, {x}, true)[0];
  Var g3 = ad::grad(g2, {x}, true)[0];
  EXPECT_DOUBLE_EQ(g1.item(), 12.0);
  EXPECT_DOUBLE_EQ(g2.item(), 12.0);
  EXPECT_DOUBLE_EQ(g3.item(), 6.0);
}

TEST(Autodiff, UnreachedInputGetsZeroGradient) {
  Var x = Var::leaf(Tensor({2}, std::vector<double>{1, 2}));
  Var y = Var::leaf(Tensor({3}, 1.0));
  auto g = ad::grad(ad::sum(ad::square(x)), {x, y});
  EXPECT_EQ(g[1].value(), Tensor({3}, 0.0));
  EXPECT_EQ(g[0].value(), Tensor({2}, std::vector<double>{2, 4}));
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  Var x = Var::leaf(Tensor::scalar(3.0));
  ad::NoGradGuard ng;
  Var y = ad::square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, ShapeErrors) {
  Var a = Var::constant(Tensor({2, 3}));
  Var b = Var::constant(Tensor({3, 2}));
  EXPECT_THROW(ad::add(a, b), ShapeError);
  EXPECT_THROW(ad::matmul(a, a), ShapeError);
  EXPECT_THROW(ad::reshape(a, {4}), ShapeError);
}
