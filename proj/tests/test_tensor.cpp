#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "distillscope/errors.hpp"
#include "distillscope/graph.hpp"
#include "test_support.hpp"

using namespace distillscope;
using testing::random_tensor;

namespace {

Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>* b, int stride,
                           int pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> out(Shape{N, F, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = b ? (*b)[f] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long y = static_cast<long>(i * stride + u) - pad, xx = static_cast<long>(j * stride + v) - pad;
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                acc += x.at({n, c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)}) * k.at({f, c, u, v});
              }
          out[((n * F + f) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("tensor construction checks the element count") {
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  Tensor<float> t(Shape{2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.at({1, 2}) == 1.5f);
  CHECK(t.all_finite());
  t[4] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("reshape keeps data and rejects a different element count") {
  Tensor<float> t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const auto r = t.reshaped(Shape{3, 2});
  CHECK(r.at({2, 1}) == 6.0f);
  CHECK_THROWS_AS(t.reshaped(Shape{4}), DimensionError);
}

TEST_CASE("stack_batch prepends the batch axis") {
  Tensor<float> a(Shape{1, 2, 2}, 1.0f), b(Shape{1, 2, 2}, 2.0f);
  const Tensor<float>* items[] = {&a, &b};
  const auto s = stack_batch<float>(items);
  CHECK(s.shape() == Shape{2, 1, 2, 2});
  CHECK(s[4] == 2.0f);
  Tensor<float> c(Shape{1, 3, 2}, 0.0f);
  const Tensor<float>* bad[] = {&a, &c};
  CHECK_THROWS_AS(stack_batch<float>(bad), DimensionError);
}

TEST_CASE("conv2d: ones kernel over ones input sums to 9") {
  Graph<double> g;
  Var x = g.leaf(Tensor<double>(Shape{1, 1, 3, 3}, 1.0), false);
  Var k = g.leaf(Tensor<double>(Shape{1, 1, 3, 3}, 1.0), false);
  Var y = conv2d(g, x, k, std::nullopt, 1, 0);
  CHECK(g.value(y).shape() == Shape{1, 1, 1, 1});
  CHECK(g.value(y)[0] == 9.0);
}

TEST_CASE("conv2d: 1x1 unit kernel is the identity") {
  Graph<double> g;
  const auto input = random_tensor<double>(Shape{2, 1, 5, 4}, 1);
  Var x = g.leaf(input, false);
  Var k = g.leaf(Tensor<double>(Shape{1, 1, 1, 1}, 1.0), false);
  CHECK(g.value(conv2d(g, x, k, std::nullopt, 1, 0)) == input);
}

TEST_CASE("conv2d matches a nested-loop oracle") {
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      const auto input = random_tensor<double>(Shape{2, 3, 8, 8}, 11);
      const auto kernel = random_tensor<double>(Shape{4, 3, 3, 3}, 12);
      const auto bias = random_tensor<double>(Shape{4}, 13);
      Graph<double> g;
      Var y = conv2d(g, g.leaf(input, false), g.leaf(kernel, false), g.leaf(bias, false), stride, pad);
      CHECK(max_abs_diff(g.value(y), conv_oracle(input, kernel, &bias, stride, pad)) < 1e-6);

      Graph<float> gf;
      Var yf = conv2d(gf, gf.leaf(input.cast<float>(), false), gf.leaf(kernel.cast<float>(), false),
                      gf.leaf(bias.cast<float>(), false), stride, pad);
      CHECK(max_abs_diff(gf.value(yf).cast<double>(), conv_oracle(input, kernel, &bias, stride, pad)) < 1e-5);
    }
}

TEST_CASE("conv2d reports the offending axes") {
  Graph<float> g;
  Var x = g.leaf(Tensor<float>(Shape{1, 2, 5, 5}, 0.0f), false);
  Var k = g.leaf(Tensor<float>(Shape{1, 3, 3, 3}, 0.0f), false);
  CHECK_THROWS_AS(conv2d(g, x, k, std::nullopt, 1, 0), DimensionError);
  Var big = g.leaf(Tensor<float>(Shape{1, 2, 7, 7}, 0.0f), false);
  CHECK_THROWS_AS(conv2d(g, x, big, std::nullopt, 1, 0), DimensionError);
  Var k2 = g.leaf(Tensor<float>(Shape{1, 2, 3, 3}, 0.0f), false);
  CHECK_THROWS_AS(conv2d(g, x, k2, std::nullopt, 0, 0), ParameterError);
}

TEST_CASE("relu forward and both backward modes") {
  {
    Graph<double> g;
    Var x = g.leaf(Tensor<double>(Shape{3}, std::vector<double>{-1, 0, 2}), false);
    CHECK(g.value(relu(g, x)) == Tensor<double>(Shape{3}, std::vector<double>{0, 0, 2}));
  }
  {
    Graph<double> g;
    Var x = g.leaf(Tensor<double>(Shape{2}, std::vector<double>{-1, 2}), true);
    Var loss = sum(g, relu(g, x));
    g.backward(loss);
    CHECK(g.grad(x) == Tensor<double>(Shape{2}, std::vector<double>{0, 1}));
  }
  {
    // upstream gradient [-1, 1] injected through a multiply by a constant
    Graph<double> g(BackwardMode::Guided);
    Var x = g.leaf(Tensor<double>(Shape{2}, std::vector<double>{2, 2}), true);
    Var w = g.leaf(Tensor<double>(Shape{2}, std::vector<double>{-1, 1}), false);
    g.backward(sum(g, mul(g, relu(g, x), w)));
    CHECK(g.grad(x) == Tensor<double>(Shape{2}, std::vector<double>{0, 1}));
  }
}

TEST_CASE("guided backward never exceeds standard magnitude through a relu") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto xv = random_tensor<double>(Shape{16}, seed), wv = random_tensor<double>(Shape{16}, seed + 100);
    Tensor<double> gs, gg;
    for (auto mode : {BackwardMode::Standard, BackwardMode::Guided}) {
      Graph<double> g(mode);
      Var x = g.leaf(xv, true);
      g.backward(sum(g, mul(g, relu(g, x), g.leaf(wv, false))));
      (mode == BackwardMode::Standard ? gs : gg) = g.grad(x);
    }
    for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(gg[i]) <= std::abs(gs[i]));
  }
}

TEST_CASE("maxpool2d forward, tie rule and loop oracle") {
  {
    Graph<double> g;
    Var x = g.leaf(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}), false);
    Var y = maxpool2d(g, x, 2, 2);
    CHECK(g.value(y).shape() == Shape{1, 1, 1, 1});
    CHECK(g.value(y)[0] == 4.0);
  }
  {
    Graph<double> g;
    Var x = g.leaf(Tensor<double>(Shape{1, 1, 4, 4}, 3.0), true);
    Var y = maxpool2d(g, x, 2, 2);
    for (double v : g.value(y).data()) CHECK(v == 3.0);
    g.backward(sum(g, y));
    const auto gx = g.grad(x);
    // first element of each 2x2 window in row-major order
    const std::vector<double> expected{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
    CHECK(gx == Tensor<double>(Shape{1, 1, 4, 4}, expected));
  }
  {
    const auto input = random_tensor<double>(Shape{1, 1, 6, 6}, 5);
    Graph<double> g;
    Var y = maxpool2d(g, g.leaf(input, false), 2, 2);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double m = -1e300;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v) m = std::max(m, input.at({0, 0, 2 * i + u, 2 * j + v}));
        CHECK(g.value(y).at({0, 0, i, j}) == m);
      }
  }
  {
    Graph<double> g;
    Var x = g.leaf(Tensor<double>(Shape{1, 1, 2, 2}, 0.0), false);
    CHECK_THROWS_AS(maxpool2d(g, x, 3, 1), DimensionError);
  }
}

TEST_CASE("dense: identity, hand example, loop oracle and mismatch") {
  {
    Graph<double> g;
    const auto input = random_tensor<double>(Shape{3, 4}, 2);
    Tensor<double> eye(Shape{4, 4}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    Var y = dense(g, g.leaf(input, false), g.leaf(eye, false), g.leaf(Tensor<double>(Shape{4}, 0.0), false));
    CHECK(g.value(y) == input);
  }
  {
    Graph<double> g;
    Var y = dense(g, g.leaf(Tensor<double>(Shape{1, 2}, std::vector<double>{1, 2}), false),
                  g.leaf(Tensor<double>(Shape{2, 1}, 1.0), false), std::nullopt);
    CHECK(g.value(y)[0] == 3.0);
  }
  {
    const auto x = random_tensor<double>(Shape{5, 7}, 3), w = random_tensor<double>(Shape{7, 4}, 4),
               b = random_tensor<double>(Shape{4}, 5);
    Graph<double> g;
    Var y = dense(g, g.leaf(x, false), g.leaf(w, false), g.leaf(b, false));
    double worst = 0.0;
    for (std::size_t n = 0; n < 5; ++n)
      for (std::size_t k = 0; k < 4; ++k) {
        double acc = b[k];
        for (std::size_t d = 0; d < 7; ++d) acc += x.at({n, d}) * w.at({d, k});
        worst = std::max(worst, std::abs(acc - g.value(y).at({n, k})));
      }
    CHECK(worst < 1e-6);
  }
  {
    Graph<double> g;
    CHECK_THROWS_AS(dense(g, g.leaf(Tensor<double>(Shape{1, 3}, 0.0), false),
                          g.leaf(Tensor<double>(Shape{2, 1}, 0.0), false), std::nullopt),
                    DimensionError);
  }
}

TEST_CASE("backward: sum and sum of squares") {
  {
    Graph<double> g;
    Var x = g.leaf(random_tensor<double>(Shape{2, 3, 2}, 9), true);
    g.backward(sum(g, x));
    const auto gx = g.grad(x);
    for (double v : gx.data()) CHECK(v == 1.0);
  }
  {
    Graph<double> g;
    Var x = g.leaf(Tensor<double>(Shape{2}, std::vector<double>{1, -2}), true);
    g.backward(sum(g, mul(g, x, x)));
    CHECK(g.grad(x) == Tensor<double>(Shape{2}, std::vector<double>{2, -4}));
  }
}

TEST_CASE("backward contract and numeric errors") {
  Graph<double> g;
  Var x = g.leaf(Tensor<double>(Shape{2}, 1.0), true);
  CHECK_THROWS_AS(g.backward(x), ContractError);

  CHECK_THROWS_AS(g.leaf(Tensor<double>(Shape{1}, std::nan("")), false), NumericError);

  // finite values whose gradient overflows on the way back
  Graph<double> h;
  Var y = h.leaf(Tensor<double>(Shape{1}, 1e-310), true);
  Var s = sum(h, scale(h, scale(h, y, 1e155), 1e155));
  try {
    h.backward(s);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("node #") != std::string::npos);
  }
}

TEST_CASE("composed ops match central differences on at least 95% of coordinates") {
  const auto input = random_tensor<double>(Shape{2, 2, 6, 6}, 21);
  const auto kernel = random_tensor<double>(Shape{3, 2, 3, 3}, 22);
  const auto bias = random_tensor<double>(Shape{3}, 23);
  const auto weight = random_tensor<double>(Shape{27, 2}, 24);
  auto build = [&](Graph<double>& g, const Tensor<double>& xv, bool grad) {
    Var x = g.leaf(xv, grad);
    Var k = g.leaf(kernel, grad);
    Var b = g.leaf(bias, grad);
    Var w = g.leaf(weight, grad);
    Var h = maxpool2d(g, relu(g, conv2d(g, x, k, b, 1, 1)), 2, 2);
    Var o = dense(g, flatten(g, h), w, std::nullopt);
    return std::tuple{x, k, b, w, sum(g, mul(g, o, o))};
  };
  Graph<double> g;
  auto [x, k, b, w, loss] = build(g, input, true);
  g.backward(loss);
  auto f_of_input = [&](const Tensor<double>& xv) {
    Graph<double> h;
    return h.value(std::get<4>(build(h, xv, false)))[0];
  };
  std::size_t ok = 0, total = 0;
  for (std::size_t i = 0; i < input.numel(); ++i) {
    const double num = testing::central_difference(f_of_input, input, i, 1e-3);
    ok += testing::gradients_agree(g.grad(x)[i], num, 1e-4, 1e-6) ? 1 : 0;
    ++total;
  }
  CHECK(static_cast<double>(ok) / total >= 0.95);
}

TEST_CASE("backward is linear in the loss") {
  const auto xv = random_tensor<double>(Shape{1, 1, 5, 5}, 31);
  const auto kv = random_tensor<double>(Shape{2, 1, 3, 3}, 32);
  auto grad_of = [&](double a, double b) {
    Graph<double> g;
    Var x = g.leaf(xv, true);
    Var h = relu(g, conv2d(g, x, g.leaf(kv, false), std::nullopt, 1, 1));
    Var l1 = sum(g, h);
    Var l2 = sum(g, mul(g, h, h));
    g.backward(add(g, scale(g, l1, a), scale(g, l2, b)));
    return g.grad(x);
  };
  const auto combined = grad_of(2.0, -3.0), g1 = grad_of(1.0, 0.0), g2 = grad_of(0.0, 1.0);
  for (std::size_t i = 0; i < combined.numel(); ++i) CHECK(std::abs(combined[i] - (2.0 * g1[i] - 3.0 * g2[i])) < 1e-6);
}

TEST_CASE("forward and backward are deterministic") {
  const auto xv = random_tensor<float>(Shape{2, 1, 8, 8}, 41);
  const auto kv = random_tensor<float>(Shape{4, 1, 3, 3}, 42);
  auto run = [&] {
    Graph<float> g;
    Var x = g.leaf(xv, true);
    Var y = maxpool2d(g, relu(g, conv2d(g, x, g.leaf(kv, true), std::nullopt, 1, 1)), 2, 2);
    g.backward(sum(g, mul(g, y, y)));
    return std::pair{g.value(y), g.grad(x)};
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("unreached nodes report zero gradients") {
  Graph<double> g;
  Var x = g.leaf(Tensor<double>(Shape{3}, 1.0), true);
  Var unused = g.leaf(Tensor<double>(Shape{2}, 1.0), true);
  g.backward(sum(g, x));
  CHECK(g.grad(unused) == Tensor<double>(Shape{2}, 0.0));
}
