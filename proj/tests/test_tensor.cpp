#include <doctest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "rcn/error.hpp"
#include "rcn/gradcheck.hpp"
#include "rcn/optim.hpp"

using namespace rcn;
using namespace testutil;

TEST_CASE("conv2d small cases") {
  Tensor x(Shape{1, 1, 1, 1}, {2});
  Tensor w(Shape{1, 1, 1, 1}, {3});
  Tensor b(Shape{1}, {1});
  CHECK(conv2d(x, w, b, {1, 0, 1})[0] == Real(7));

  Tensor x2(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w2(Shape{1, 1, 2, 2}, {1, 0, 0, 1});
  auto y = conv2d(x2, w2, Tensor(Shape{1}, Real(0)), {1, 0, 1});
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == Real(5));

  std::mt19937_64 rng(3);
  auto big = random_tensor({1, 3, 60, 60}, rng);
  auto wk = random_tensor({16, 3, 3, 3}, rng);
  CHECK(conv2d(big, wk, Tensor(Shape{16}, Real(0)), {3, 1, 1}).shape() == Shape{1, 16, 20, 20});
  CHECK(conv_out_extent(100, 3, {3, 1, 1}) == 34);
  CHECK_THROWS_AS(conv_out_extent(2, 5, {1, 0, 1}), ShapeError);
  CHECK_THROWS_AS(conv2d(big, random_tensor({4, 2, 3, 3}, rng), Tensor(Shape{4}), {1, 1, 1}), ShapeError);
}

TEST_CASE("dilated convolution") {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 3, 60, 60}, rng);
  for (std::size_t d = 1; d <= 3; ++d) {
    auto w = random_tensor({4, 3, 3, 3}, rng);
    CHECK(conv2d(x, w, Tensor(Shape{4}), {3, d, d}).shape() == Shape{2, 4, 20, 20});
  }
  // d = 1 goes through the same code path as plain conv.
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  auto a1 = conv2d(x, w, b, {1, 1, 1});
  auto a2 = conv2d(x, w, b, ConvSpec{1, 1});
  CHECK(std::equal(a1.data().begin(), a1.data().end(), a2.data().begin()));

  Tensor delta(Shape{1, 1, 5, 5}, Real(0));
  delta.data()[12] = 1;
  auto out = conv2d(delta, Tensor(Shape{1, 1, 3, 3}, Real(1)), Tensor(Shape{1}), {1, 2, 2});
  REQUIRE(out.shape() == Shape{1, 1, 5, 5});
  for (int y = 0; y < 5; ++y)
    for (int x2 = 0; x2 < 5; ++x2) {
      const bool tap = (y == 0 || y == 2 || y == 4) && (x2 == 0 || x2 == 2 || x2 == 4);
      CHECK(out[std::size_t(y * 5 + x2)] == Real(tap ? 1 : 0));
    }
}

TEST_CASE("conv2d matches nested-loop oracle exactly") {
  std::mt19937_64 rng(11);
  const ConvSpec specs[] = {{3, 1, 1}, {1, 0, 1}, {1, 1, 1}, {3, 2, 2}, {3, 3, 3}, {2, 1, 1}, {1, 2, 2}};
  const std::size_t kernels[] = {3, 1, 3, 3, 3, 3, 3};
  std::uniform_int_distribution<std::size_t> dim(1, 4), side(3, 8);
  int cases = 0;
  for (int rep = 0; rep < 30; ++rep) {
    for (std::size_t s = 0; s < std::size(specs); ++s) {
      const std::size_t n = dim(rng), ci = dim(rng), co = dim(rng), h = side(rng), w = side(rng);
      const std::size_t k = kernels[s];
      if (h + 2 * specs[s].padding < specs[s].dilation * (k - 1) + 1) continue;
      if (w + 2 * specs[s].padding < specs[s].dilation * (k - 1) + 1) continue;
      auto x = random_tensor({n, ci, h, w}, rng);
      auto wt = random_tensor({co, ci, k, k}, rng);
      auto b = random_tensor({co}, rng);
      auto got = conv2d(x, wt, b, specs[s]);
      auto want = naive_conv(x, wt, b, specs[s]);
      REQUIRE(got.numel() == want.size());
      bool same = true;
      for (std::size_t i = 0; i < want.size(); ++i) same = same && got[i] == want[i];
      CHECK(same);
      ++cases;
    }
  }
  CHECK(cases >= 200);
}

TEST_CASE("conv2d is linear in its input") {
  std::mt19937_64 rng(13);
  auto a = random_tensor({2, 4, 9, 9}, rng), b = random_tensor({2, 4, 9, 9}, rng);
  auto w = random_tensor({5, 4, 3, 3}, rng);
  Tensor zero(Shape{5});
  const ConvSpec s{1, 1, 1};
  auto lhs = conv2d(add(a, b), w, zero, s);
  auto rhs = add(conv2d(a, w, zero, s), conv2d(b, w, zero, s));
  auto sc = conv2d(scale(a, Real(2.5)), w, zero, s);
  auto sref = scale(conv2d(a, w, zero, s), Real(2.5));
  double worst = 0;
  for (std::size_t i = 0; i < lhs.numel(); ++i) {
    worst = std::max(worst, std::abs(double(lhs[i]) - rhs[i]) / std::max(1.0, std::abs(double(rhs[i]))));
    worst = std::max(worst, std::abs(double(sc[i]) - sref[i]) / std::max(1.0, std::abs(double(sref[i]))));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("batchnorm2d") {
  BatchNorm2d bn(1);
  bn.beta.data()[0] = Real(0.5);
  auto y = batchnorm2d(Tensor(Shape{2, 1, 3, 3}, Real(4)), bn, true);
  for (Real v : y.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-6));

  BatchNorm2d bn2(1);
  bn2.gamma.data()[0] = 2;
  auto z = batchnorm2d(Tensor(Shape{2, 1, 1, 1}, {-1, 1}), bn2, true);
  CHECK(z[0] == doctest::Approx(-2.0).epsilon(1e-4));
  CHECK(z[1] == doctest::Approx(2.0).epsilon(1e-4));
  // running stats: momentum 0.1, unbiased variance 2
  CHECK(bn2.running_mean[0] == doctest::Approx(0.0));
  CHECK(bn2.running_var[0] == doctest::Approx(0.9 + 0.1 * 2.0));

  std::mt19937_64 rng(2);
  auto x = random_tensor({4, 2, 5, 5}, rng);
  auto e1 = batchnorm2d(x, bn2 = BatchNorm2d(2), false);
  CHECK(e1[7] == doctest::Approx(x[7] / std::sqrt(1 + 1e-5)));
}

TEST_CASE("activation, pooling and resampling") {
  auto r = relu(Tensor(Shape{3}, {-1, 0, 2}));
  CHECK(r[0] == 0);
  CHECK(r[1] == 0);
  CHECK(r[2] == 2);

  std::mt19937_64 rng(4);
  CHECK(maxpool2d(random_tensor({1, 2, 20, 20}, rng)).shape() == Shape{1, 2, 10, 10});
  CHECK(maxpool2d(random_tensor({1, 2, 17, 17}, rng)).shape() == Shape{1, 2, 8, 8});

  for (std::size_t K : {1, 3, 5, 7, 9}) {
    auto p = adaptive_avgpool2d(Tensor(Shape{1, 2, 7, 7}, Real(0.25)), K);
    CHECK(p.shape() == Shape{1, 2, K, K});
    for (Real v : p.data()) CHECK(v == doctest::Approx(0.25));
  }
  // K > H: bins repeat pixels
  auto rep = adaptive_avgpool2d(Tensor(Shape{1, 1, 2, 2}, {0, 1, 2, 3}), 3);
  CHECK(rep[0] == 0);
  CHECK(rep[1] == doctest::Approx(0.5));
  CHECK(rep[4] == doctest::Approx(1.5));

  auto up = upsample_bilinear(Tensor(Shape{1, 1, 3, 3}, Real(0.7)), 11, 11);
  for (Real v : up.data()) CHECK(v == Real(0.7));

  // ties: first index wins
  Tensor t(Shape{1, 1, 2, 2}, Real(1), true);
  auto m = maxpool2d(t);
  sum(m).backward();
  CHECK(t.grad()[0] == 1);
  CHECK(t.grad()[1] == 0);
  CHECK(t.grad()[3] == 0);
}

TEST_CASE("linear and softmax") {
  Tensor eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = linear(Tensor(Shape{1, 3}, {1, 2, 3}), eye, Tensor(Shape{3}));
  CHECK(y[0] == 1);
  CHECK(y[1] == 2);
  CHECK(y[2] == 3);

  auto u = softmax(Tensor(Shape{1, 3}, Real(0)));
  for (Real v : u.data()) CHECK(v == doctest::Approx(1.0 / 3));
  auto big = softmax(Tensor(Shape{1, 3}, {1000, 1000, 999}));
  CHECK(big[0] == doctest::Approx(0.4223).epsilon(1e-3));
  CHECK(big[1] == doctest::Approx(0.4223).epsilon(1e-3));
  CHECK(big[2] == doctest::Approx(0.1554).epsilon(1e-3));

  std::mt19937_64 rng(8);
  auto logits = random_tensor({6, 3}, rng, -5, 5);
  auto p = softmax(logits);
  auto shifted = softmax(add(logits, Tensor(Shape{6, 3}, Real(3.5))));
  for (std::size_t n = 0; n < 6; ++n) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      s += p[n * 3 + c];
      CHECK(std::abs(double(p[n * 3 + c]) - shifted[n * 3 + c]) < 1e-6);
    }
    CHECK(std::abs(s - 1) < 1e-6);
  }
  CHECK_THROWS_AS(linear(Tensor(Shape{1, 4}), eye, Tensor(Shape{3})), ShapeError);
}

TEST_CASE("dropout") {
  Rng rng(1);
  std::mt19937_64 g(1);
  auto x = random_tensor({4, 5}, g);
  auto same = dropout(x, 0, true, rng);
  auto eval = dropout(x, Real(0.5), false, rng);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(same[i] == x[i]);
    CHECK(eval[i] == x[i]);
  }
  CHECK_THROWS_AS(dropout(x, 1, true, rng), UsageError);

  Tensor ones(Shape{1}, Real(1));
  double acc = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) acc += dropout(ones, Real(0.5), true, rng)[0];
  CHECK(std::abs(acc / trials - 1.0) < 0.02);
}

TEST_CASE("class-wise cross-entropy") {
  const int labels[] = {1};
  auto exact = loss_eq9(Tensor(Shape{1, 3}, {0, 1, 0}), labels);
  CHECK(exact.item() < 1e-5);

  auto uni = loss_eq9(Tensor(Shape{1, 3}, Real(1.0 / 3)), labels);
  CHECK(uni.item() == doctest::Approx(-(std::log(1.0 / 3) + 2 * std::log(2.0 / 3))).epsilon(1e-5));
  CHECK(uni.item() == doctest::Approx(1.9095).epsilon(1e-4));

  std::mt19937_64 rng(9);
  auto p = softmax(random_tensor({3, 3}, rng));
  const int y3[] = {0, 2, 1};
  const int y6[] = {0, 2, 1, 0, 2, 1};
  std::vector<Real> dup(p.data().begin(), p.data().end());
  dup.insert(dup.end(), p.data().begin(), p.data().end());
  CHECK(loss_eq9(p, y3).item() == doctest::Approx(loss_eq9(Tensor(Shape{6, 3}, dup), y6).item()));

  CHECK_THROWS_AS(loss_eq9(Tensor(Shape{1, 3}, {0.5, 0.5, 0.5}), labels), Error);
}

TEST_CASE("sgd with momentum") {
  Tensor w(Shape{1}, Real(0), true);
  Sgd opt({w}, {Real(0.1), Real(0.9), Real(0)});
  w.grad()[0] = 1;
  opt.step();
  CHECK(w[0] == doctest::Approx(-0.1));
  w.grad()[0] = 1;
  opt.step();
  CHECK(opt.velocity()[0][0] == doctest::Approx(1.9));
  CHECK(w[0] == doctest::Approx(-0.29));
  opt.zero_grad();
  for (int i = 0; i < 400; ++i) opt.step();
  const Real settled = w[0];
  opt.step();
  CHECK(std::abs(w[0] - settled) < 1e-6);
}

TEST_CASE("non-finite values are rejected") {
  Tensor x(Shape{2}, {1, std::numeric_limits<Real>::quiet_NaN()});
  CHECK_THROWS_AS(relu(x), NumericError);
  Tensor big(Shape{1}, std::numeric_limits<Real>::max());
  CHECK_THROWS_AS(scale(big, 10), NumericError);
}

TEST_CASE("gradient check of primitives") {
  {
    Tensor x(Shape{2}, {1, 2});
    auto r = grad_check([&] { return sum(mul(x, x)); }, {x}, kWide ? 1e-5 : 1e-2);
    CHECK(r.max_rel_error < (kWide ? 1e-8 : 1e-3));
    CHECK(x.grad()[0] == doctest::Approx(2));
    CHECK(x.grad()[1] == doctest::Approx(4));
  }
  std::mt19937_64 rng(21);
  auto weights = [&](Shape s) { return random_tensor(std::move(s), rng); };
  const int labels[] = {0, 2, 1};

  SUBCASE("conv, dilated conv") {
    auto x = weights({2, 3, 7, 7});
    auto w = weights({4, 3, 3, 3});
    auto b = weights({4});
    auto c = weights({2, 4, 4, 4});
    for (std::size_t d = 1; d <= 3; ++d) {
      auto f = [&] { return sum(mul(conv2d(x, w, b, {2, d, d}), c)); };
      CHECK(grad_check(f, {x, w, b}, kStep).max_rel_error < kGradTol);
    }
  }
  SUBCASE("batchnorm") {
    BatchNorm2d bn(3);
    auto x = weights({3, 3, 4, 4});
    auto c = weights({3, 3, 4, 4});
    auto f = [&] { return sum(mul(batchnorm2d(x, bn, true), c)); };
    CHECK(grad_check(f, {x, bn.gamma, bn.beta}, kStep).max_rel_error < kGradTol);
  }
  SUBCASE("relu and maxpool away from kinks") {
    auto x = away_from_zero({1, 2, 6, 6}, rng);
    auto c = weights({1, 2, 3, 3});
    auto f = [&] { return sum(mul(maxpool2d(relu(x)), c)); };
    CHECK(grad_check(f, {x}, kWide ? 1e-6 : 1e-3).max_rel_error < (kWide ? 1e-6 : 1e-3));
  }
  SUBCASE("pooling, upsampling, attention pieces") {
    auto x = weights({2, 3, 7, 6});
    auto c = weights({2, 3, 5, 5});
    auto f = [&] { return sum(mul(upsample_bilinear(adaptive_avgpool2d(x, 3), 5, 5), c)); };
    CHECK(grad_check(f, {x}, kStep).max_rel_error < kGradTol);
    auto m = random_tensor({2, 1, 7, 6}, rng, 0.1, 1.0);
    auto c2 = weights({2, 3, 7, 6});
    auto g = [&] { return sum(mul(mul_spatial(x, m), c2)); };
    CHECK(grad_check(g, {x, m}, kStep).max_rel_error < kGradTol);
    auto pos = random_tensor({2, 1, 4, 4}, rng, 0.1, 1.0);
    auto c3 = weights({2, 1, 4, 4});
    auto h = [&] { return sum(mul(normalize_by_max(pos), c3)); };
    CHECK(grad_check(h, {pos}, kStep).max_rel_error < kGradTol);
  }
  SUBCASE("linear, softmax, losses") {
    auto x = weights({3, 5});
    auto w = weights({3, 5});
    auto b = weights({3});
    auto f = [&] { return loss_eq9(softmax(linear(x, w, b)), labels); };
    CHECK(grad_check(f, {x, w, b}, kStep).max_rel_error < kGradTol);
    auto g = [&] { return softmax_cross_entropy(linear(x, w, b), labels); };
    CHECK(grad_check(g, {x, w, b}, kStep).max_rel_error < kGradTol);
  }
  SUBCASE("mixing pieces") {
    auto theta = weights({4});
    auto x = weights({2, 3});
    auto c = weights({4});
    auto f = [&] { return sum(mul(normalize_sum(softplus(theta)), c)); };
    CHECK(grad_check(f, {theta}, kStep).max_rel_error < kGradTol);
    auto g = [&] { return sum(scale_by(x, select(theta, 2))); };
    CHECK(grad_check(g, {x, theta}, kStep).max_rel_error < kGradTol);
  }
}
