#include <doctest.h>

#include <cmath>

#include "garfont/common.hpp"
#include "garfont/gradcheck.hpp"
#include "garfont/nn.hpp"
#include "garfont/rng.hpp"
#include "garfont/tensor.hpp"

using namespace garfont;
using nn::ParamStore;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  std::vector<double> v(s.numel());
  for (auto& x : v) x = rng.normal(0, scale);
  return Tensor::from_data(s, std::move(v));
}

// finite-difference check for a scalar function of one input tensor
double max_grad_error(const std::function<Tensor(const Tensor&)>& f,
                      const Shape& in_shape, Rng& rng, double eps = 1e-6) {
  Tensor x = random_tensor(in_shape, rng, 0.7);
  x.set_requires_grad(true);
  Tensor y = f(x);
  y.backward();
  std::vector<double> g = x.grad();
  double worst = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    NoGradGuard ng;
    const double orig = x.data()[i];
    x.data()[i] = orig + eps;
    const double fp = f(x).item();
    x.data()[i] = orig - eps;
    const double fm = f(x).item();
    x.data()[i] = orig;
    const double fd = (fp - fm) / (2 * eps);
    worst = std::max(worst, std::abs(fd - g[i]) /
                                std::max({std::abs(fd), std::abs(g[i]), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise forward values") {
  Tensor a = Tensor::from_data({2, 2}, {1.0, -2.0, 0.5, 0.0});
  Tensor b = Tensor::from_data({2, 2}, {3.0, 1.0, -1.0, 2.0});
  CHECK(add(a, b).data()[0] == doctest::Approx(4.0));
  CHECK(sub(a, b).data()[1] == doctest::Approx(-3.0));
  CHECK(mul(a, b).data()[2] == doctest::Approx(-0.5));
  CHECK(relu(a).data()[1] == 0.0);
  CHECK(abs_t(a).data()[1] == doctest::Approx(2.0));
  CHECK(sigmoid(Tensor::from_data({1}, {0.0})).item() == doctest::Approx(0.5));
  CHECK_THROWS_AS(add(a, Tensor::from_data({3}, {1, 2, 3})), ValidationError);
}

TEST_CASE("matmul against hand-rolled loops") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Tensor c = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += a.data()[i * 4 + k] * b.data()[k * 5 + j];
      CHECK(c.data()[i * 5 + j] == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("primitive op gradients match finite differences") {
  Rng rng(11);
  auto scalarize = [](Tensor t) {
    // weighted sum so gradients are non-uniform
    std::vector<double> w(t.numel());
    for (int64_t i = 0; i < t.numel(); ++i) w[i] = 0.1 * (i + 1);
    return sum_all(mul(t, Tensor::from_data(t.shape(), std::move(w))));
  };

  CHECK(max_grad_error([&](const Tensor& x) { return scalarize(relu(x)); },
                       {4, 3}, rng) < 1e-5);
  CHECK(max_grad_error([&](const Tensor& x) { return scalarize(gelu(x)); },
                       {4, 3}, rng) < 1e-5);
  CHECK(max_grad_error([&](const Tensor& x) { return scalarize(sigmoid(x)); },
                       {4, 3}, rng) < 1e-5);
  CHECK(max_grad_error([&](const Tensor& x) { return scalarize(tanh_t(x)); },
                       {4, 3}, rng) < 1e-5);
  CHECK(max_grad_error([&](const Tensor& x) { return scalarize(square(x)); },
                       {4, 3}, rng) < 1e-5);
  CHECK(max_grad_error([&](const Tensor& x) { return scalarize(exp_t(x)); },
                       {4, 3}, rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(softmax_rows(x)); }, {4, 6},
            rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(log_softmax_rows(x)); },
            {4, 6}, rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(transpose(x)); }, {3, 5},
            rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) {
              return scalarize(slice_cols(slice_rows(x, 1, 4), 0, 2));
            },
            {5, 4}, rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) {
              return scalarize(concat_cols({x, square(x)}));
            },
            {3, 2}, rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(mean_rows(x)); }, {4, 3},
            rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(sum_cols(x)); }, {4, 3},
            rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(repeat_rows(sum_rows(x), 5)); },
            {2, 3}, rng) < 1e-5);

  Rng rng2(13);
  Tensor other = random_tensor({4, 4}, rng2);
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(matmul(x, other)); },
            {3, 4}, rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(matmul(other, x)); },
            {4, 2}, rng) < 1e-5);
  Tensor vec = random_tensor({4}, rng2);
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(add_rowvec(x, vec)); },
            {3, 4}, rng) < 1e-5);
  CHECK(max_grad_error(
            [&](const Tensor& x) {
              return scalarize(add_colvec(x, sum_cols(square(x))));
            },
            {3, 4}, rng) < 1e-5);
  std::vector<int> idx = {2, 0, 1, 2};
  CHECK(max_grad_error(
            [&](const Tensor& x) { return scalarize(gather_rows(x, idx)); },
            {3, 4}, rng) < 1e-5);
}

TEST_CASE("layer norm gradient and normalization") {
  Rng rng(5);
  Tensor gain = random_tensor({6}, rng, 0.5);
  Tensor bias = random_tensor({6}, rng, 0.5);
  auto f = [&](const Tensor& x) {
    Tensor y = layer_norm(x, gain, bias);
    std::vector<double> w(y.numel());
    for (int64_t i = 0; i < y.numel(); ++i) w[i] = 0.05 * (i + 1);
    return sum_all(mul(y, Tensor::from_data(y.shape(), std::move(w))));
  };
  CHECK(max_grad_error(f, {3, 6}, rng) < 1e-5);

  // normalized rows have mean ~0, var ~1 with unit affine
  Tensor x = random_tensor({2, 6}, rng, 2.0);
  Tensor y = layer_norm(x, Tensor::full({6}, 1.0), Tensor::full({6}, 0.0));
  for (int r = 0; r < 2; ++r) {
    double mean = 0;
    for (int c = 0; c < 6; ++c) mean += y.data()[r * 6 + c];
    CHECK(std::abs(mean / 6) < 1e-12);
  }

  // affine parameter gradients
  ParamStore ps;
  Rng prng(3);
  Tensor g2 = ps.create("ln.g", {6}, 0.02, prng);
  Tensor b2 = ps.create("ln.b", {6}, 0.02, prng);
  Tensor xin = random_tensor({4, 6}, rng);
  auto loss_fn = [&]() {
    return mean_all(square(layer_norm(xin, g2, b2)));
  };
  Rng crng(1);
  auto rep = nn::grad_check(loss_fn, ps, 1e-6, 1e-6, crng);
  CHECK(rep.pass);
}

TEST_CASE("conv2d and conv_transpose2d gradients") {
  Rng rng(17);
  ParamStore ps;
  Rng prng(23);
  Tensor w = ps.create("conv.w", {3, 2, 3, 3}, 0.2, prng);
  Tensor b = ps.create("conv.b", {3}, 0.2, prng);
  Tensor x = random_tensor({2, 6, 6}, rng);
  x.set_requires_grad(true);

  SUBCASE("conv stride 1") {
    auto loss = [&]() { return mean_all(square(conv2d(x, w, b, 1, 1))); };
    Rng crng(2);
    auto rep = nn::grad_check(loss, ps, 1e-6, 1e-6, crng, 1000);
    CHECK(rep.pass);
    CHECK(conv2d(x, w, b, 1, 1).shape() == Shape{3, 6, 6});
  }
  SUBCASE("conv stride 2") {
    auto loss = [&]() { return mean_all(square(conv2d(x, w, b, 2, 1))); };
    Rng crng(2);
    auto rep = nn::grad_check(loss, ps, 1e-6, 1e-6, crng, 1000);
    CHECK(rep.pass);
    CHECK(conv2d(x, w, b, 2, 1).shape() == Shape{3, 3, 3});
  }
  SUBCASE("conv input gradient") {
    auto f = [&](const Tensor& xi) {
      return mean_all(square(conv2d(xi, w, b, 2, 1)));
    };
    CHECK(max_grad_error(f, {2, 6, 6}, rng) < 1e-5);
  }
  SUBCASE("conv transpose") {
    ParamStore ps2;
    Rng prng2(29);
    Tensor wt = ps2.create("deconv.w", {2, 3, 4, 4}, 0.2, prng2);
    Tensor bt = ps2.create("deconv.b", {3}, 0.2, prng2);
    Tensor xt = random_tensor({2, 3, 3}, rng);
    CHECK(conv_transpose2d(xt, wt, bt, 2, 1).shape() == Shape{3, 6, 6});
    auto loss = [&]() {
      return mean_all(square(conv_transpose2d(xt, wt, bt, 2, 1)));
    };
    Rng crng(2);
    auto rep = nn::grad_check(loss, ps2, 1e-6, 1e-6, crng, 1000);
    CHECK(rep.pass);
    auto f = [&](const Tensor& xi) {
      return mean_all(square(conv_transpose2d(xi, wt, bt, 2, 1)));
    };
    CHECK(max_grad_error(f, {2, 3, 3}, rng) < 1e-5);
  }
}

TEST_CASE("cross entropy matches log-softmax composition") {
  Rng rng(31);
  Tensor logits = random_tensor({5, 7}, rng);
  std::vector<int> targets = {1, 0, 6, 3, 3};
  Tensor ce = cross_entropy_mean(logits, targets);
  Tensor ls = log_softmax_rows(logits);
  double manual = 0;
  for (int r = 0; r < 5; ++r) manual -= ls.data()[r * 7 + targets[r]];
  manual /= 5;
  CHECK(ce.item() == doctest::Approx(manual).epsilon(1e-12));

  auto f = [&](const Tensor& x) { return cross_entropy_mean(x, targets); };
  CHECK(max_grad_error(f, {5, 7}, rng) < 1e-5);

  // uniform logits -> ln(K)
  Tensor uni = Tensor::full({2, 256}, 0.37);
  CHECK(cross_entropy_mean(uni, {0, 100}).item() ==
        doctest::Approx(std::log(256.0)).epsilon(1e-12));
}

TEST_CASE("detach blocks gradient flow") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y = sum_all(mul(detach(x), x));  // d/dx = detach(x) only
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(1.0));
  CHECK(x.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  NoGradGuard ng;
  Tensor y = sum_all(square(x));
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("grad accumulates across uses") {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  Tensor y = add(square(x), scale(x, 2.0));  // x^2 + 2x, dy/dx = 2x + 2 = 8
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("grad_check validates eps and non-finite loss") {
  ParamStore ps;
  Rng prng(1);
  Tensor p = ps.create("p", {4}, 0.5, prng);
  auto quad = [&]() { return sum_all(square(p)); };
  Rng crng(9);
  CHECK_THROWS_AS(nn::grad_check(quad, ps, 0.0, 1e-8, crng), ValidationError);
  auto rep = nn::grad_check(quad, ps, 1e-6, 1e-8, crng);
  CHECK(rep.pass);  // quadratics are exact up to roundoff
  CHECK(rep.worst() <= 1e-8);

  auto bad = [&]() {
    return log_t(Tensor::from_data({1}, {-1.0}));  // NaN
  };
  CHECK_THROWS_AS(nn::grad_check(bad, ps, 1e-6, 1e-8, crng), DiagnosticError);
}
