#include <cmath>
#include <numeric>

#include "doctest.h"
#include "htr/errors.hpp"
#include "htr/gradcheck.hpp"
#include "htr/ops.hpp"
#include "test_util.hpp"

using namespace htr;
using htr::testing::random_tensor;

namespace {

// Direct triple-loop product used as the matmul oracle.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

std::size_t closed_form_extent(std::size_t h, std::size_t k, std::size_t s, std::size_t p) {
  return (h + 2 * p - k) / s + 1;
}

}  // namespace

TEST_CASE("matmul examples") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {5, 6, 7, 8});
  auto eb = matmul(eye, b);
  CHECK(std::vector<float>(eb.data().begin(), eb.data().end()) == std::vector<float>{5, 6, 7, 8});

  std::mt19937_64 rng(1);
  auto any = random_tensor<float>({3, 4}, rng);
  auto z = matmul(Tensor::zeros({2, 3}), any);
  CHECK(z.shape() == Shape{2, 4});
  for (float v : z.data()) CHECK(v == 0.0f);

  const auto expected = naive_matmul({1, 2, 3, 4}, {1, 1}, 2, 2, 1);
  auto c = matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {1, 1}));
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.data()[0] == doctest::Approx(expected[0]));
  CHECK(c.data()[1] == doctest::Approx(expected[1]));
  CHECK(expected == std::vector<double>{3, 7});
}

TEST_CASE("matmul agrees with the naive oracle, batched too") {
  std::mt19937_64 rng(2);
  auto a = random_tensor<double>({3, 5, 4}, rng);
  auto b = random_tensor<double>({3, 4, 6}, rng);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> ai(a.data().begin() + i * 20, a.data().begin() + (i + 1) * 20);
    std::vector<double> bi(b.data().begin() + i * 24, b.data().begin() + (i + 1) * 24);
    auto ref = naive_matmul(ai, bi, 5, 4, 6);
    for (std::size_t j = 0; j < ref.size(); ++j) CHECK(c.data()[i * 30 + j] == doctest::Approx(ref[j]));
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2,3] x [2,3]") != std::string::npos);
  }
}

TEST_CASE("conv2d examples") {
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({2, 1, 5, 6}, rng);
  auto id = conv2d(x, Tensor({1, 1, 1, 1}, {1}), Tensor(), {1, 0});
  CHECK(id.shape() == x.shape());
  CHECK(htr::testing::max_abs_diff(id.data(), x.data()) == 0.0);

  auto big = Tensor::zeros({1, 1, 64, 64});
  auto y = conv2d(big, Tensor::zeros({4, 1, 7, 7}), Tensor(), {2, 3});
  CHECK(y.shape() == Shape{1, 4, 32, 32});

  const float c = 2.5f;
  auto flat = Tensor::full({1, 1, 6, 6}, c);
  auto ones = Tensor::full({1, 1, 3, 3}, 1.0f);
  auto s = conv2d(flat, ones, Tensor(), {1, 1});
  // Direct summation over the 3x3 neighbourhood of interior pixel (2,2).
  double direct = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) direct += flat.data()[(2 + dy) * 6 + (2 + dx)];
  CHECK(direct == doctest::Approx(9 * c));
  CHECK(s.data()[2 * 6 + 2] == doctest::Approx(direct));
  // Corner sees only 4 in-bounds pixels under zero padding.
  CHECK(s.data()[0] == doctest::Approx(4 * c));
}

TEST_CASE("conv2d matches direct cross-correlation with stride, padding and bias") {
  std::mt19937_64 rng(4);
  auto x = random_tensor<double>({2, 3, 7, 6}, rng);
  auto w = random_tensor<double>({4, 3, 3, 2}, rng);
  auto b = random_tensor<double>({4}, rng);
  const std::size_t s = 2, p = 1;
  auto y = conv2d(x, w, b, {s, p});
  const std::size_t oh = closed_form_extent(7, 3, s, p), ow = closed_form_extent(6, 2, s, p);
  REQUIRE(y.shape() == Shape{2, 4, oh, ow});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b.data()[f];
          for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t ki = 0; ki < 3; ++ki)
              for (std::size_t kj = 0; kj < 2; ++kj) {
                const long iy = long(oy * s + ki) - long(p), ix = long(ox * s + kj) - long(p);
                if (iy < 0 || iy >= 7 || ix < 0 || ix >= 6) continue;
                acc += x.data()[((n * 3 + ch) * 7 + iy) * 6 + ix] *
                       w.data()[((f * 3 + ch) * 3 + ki) * 2 + kj];
              }
          CHECK(y.data()[((n * 4 + f) * oh + oy) * ow + ox] == doctest::Approx(acc));
        }
}

TEST_CASE("conv2d rejects non-positive output extent") {
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), Tensor(), {1, 1}),
                  DimensionError);
}

TEST_CASE("maxpool2d examples") {
  auto flat = Tensor::full({1, 2, 4, 4}, 3.0f);
  auto y = maxpool2d(flat, {2, 2, 0});
  CHECK(y.shape() == Shape{1, 2, 2, 2});
  for (float v : y.data()) CHECK(v == 3.0f);

  auto m = maxpool2d(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), {2, 2, 0});
  CHECK(m.shape() == Shape{1, 1, 1, 1});
  CHECK(m.item() == 4.0f);

  CHECK(maxpool2d(Tensor::zeros({1, 1, 64, 64}), {3, 2, 1}).shape() == Shape{1, 1, 32, 32});
  CHECK_THROWS_AS(maxpool2d(Tensor::zeros({1, 1, 2, 2}), {3, 1, 0}), DimensionError);
}

TEST_CASE("maxpool2d backward routes to the first maximum") {
  Tensor x({1, 1, 2, 2}, {5, 5, 5, 5}, true);
  Tape tape;
  TapeScope<float> scope(tape);
  auto loss = sum(maxpool2d(x, {2, 2, 0}));
  backward(tape, loss);
  CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{1, 0, 0, 0});
}

TEST_CASE("conv2d and maxpool2d shapes follow stride arithmetic") {
  for (std::size_t h = 1; h <= 12; ++h)
    for (std::size_t k = 1; k <= 5; ++k)
      for (std::size_t s = 1; s <= 3; ++s)
        for (std::size_t p = 0; p <= 2; ++p) {
          if (h + 2 * p < k) continue;
          const auto expect = closed_form_extent(h, k, s, p);
          auto x = Tensor::zeros({1, 1, h, h});
          CHECK(conv2d(x, Tensor::zeros({1, 1, k, k}), Tensor(), {s, p}).shape() ==
                Shape{1, 1, expect, expect});
          if (p < k) CHECK(maxpool2d(x, {k, s, p}).shape() == Shape{1, 1, expect, expect});
        }
}

TEST_CASE("batchnorm2d examples") {
  std::mt19937_64 rng(5);
  auto x = random_tensor<float>({2, 3, 4, 4}, rng);
  BatchNormState<float> st{Tensor::zeros({3}), Tensor::full({3}, 1.0f)};
  auto gamma = Tensor::full({3}, 1.0f), beta = Tensor::zeros({3});
  auto y = batchnorm2d(x, gamma, beta, st, false, 0.1, 1e-12);
  CHECK(htr::testing::max_abs_diff(y.data(), x.data()) < 1e-5);

  auto flat = Tensor::full({2, 1, 3, 3}, 7.0f);
  BatchNormState<float> st1{Tensor::zeros({1}), Tensor::full({1}, 1.0f)};
  auto z = batchnorm2d(flat, Tensor::full({1}, 1.0f), Tensor::zeros({1}), st1, true, 0.1, 1e-5);
  for (float v : z.data()) CHECK(v == 0.0f);

  // Batch mean 2: EMA from 0 with momentum 0.1 gives 0.1 * 2.
  Tensor two({1, 1, 1, 2}, {1, 3});
  BatchNormState<float> st2{Tensor::zeros({1}), Tensor::full({1}, 1.0f)};
  batchnorm2d(two, Tensor::full({1}, 1.0f), Tensor::zeros({1}), st2, true, 0.1, 1e-5);
  const double ema = (1 - 0.1) * 0.0 + 0.1 * 2.0;
  CHECK(st2.running_mean.data()[0] == doctest::Approx(ema));
  CHECK(ema == doctest::Approx(0.2));
  // Unbiased batch variance of {1,3} is 2.
  CHECK(st2.running_var.data()[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0));

  BatchNormState<float> st3{Tensor::zeros({1}), Tensor::full({1}, 1.0f)};
  CHECK_THROWS_AS(batchnorm2d(Tensor::zeros({1, 1, 1, 1}), Tensor::full({1}, 1.0f),
                              Tensor::zeros({1}), st3, true, 0.1, 1e-5),
                  DegenerateError);
}

TEST_CASE("layer_norm examples") {
  const double eps = 1e-5;
  auto y = layer_norm(Tensor({1, 2}, {1, -1}), Tensor::full({2}, 1.0f), Tensor::zeros({2}), eps);
  // mean 0, variance 1: (x - 0) / sqrt(1 + eps)
  CHECK(y.data()[0] == doctest::Approx(1.0 / std::sqrt(1.0 + eps)));
  CHECK(y.data()[1] == doctest::Approx(-1.0 / std::sqrt(1.0 + eps)));

  auto c = layer_norm(Tensor::full({3, 4}, 2.0f), Tensor::full({4}, 1.0f), Tensor::zeros({4}), eps);
  for (float v : c.data()) CHECK(v == 0.0f);

  std::mt19937_64 rng(6);
  auto beta = random_tensor<float>({4}, rng);
  auto b = layer_norm(random_tensor<float>({3, 4}, rng), Tensor::zeros({4}), beta, eps);
  for (std::size_t i = 0; i < 12; ++i) CHECK(b.data()[i] == beta.data()[i % 4]);
}

TEST_CASE("softmax examples and row invariants") {
  auto u = softmax(Tensor::full({2, 5}, 3.0f));
  for (float v : u.data()) CHECK(v == doctest::Approx(0.2));

  std::mt19937_64 rng(7);
  auto x = random_tensor<float>({4, 6}, rng, -5, 5);
  auto shifted = add(x, Tensor::full({4, 6}, 11.0f));
  CHECK(htr::testing::max_abs_diff(softmax(x).data(), softmax(shifted).data()) < 1e-6);

  auto p = softmax(Tensor({1, 2}, {0.0f, float(std::log(3.0))}));
  CHECK(p.data()[0] == doctest::Approx(0.25));
  CHECK(p.data()[1] == doctest::Approx(0.75));

  for (int trial = 0; trial < 20; ++trial) {
    auto r = softmax(random_tensor<float>({3, 7}, rng, -30, 30));
    for (std::size_t row = 0; row < 3; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        const float v = r.data()[row * 7 + j];
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("masked softmax zeroes blocked entries and rejects blocked rows") {
  BlockMask mask{1, 2, 3, {0, 1, 1, 0, 0, 1}};
  auto y = softmax(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), mask);
  CHECK(y.data()[0] == 1.0f);
  CHECK(y.data()[1] == 0.0f);
  CHECK(y.data()[2] == 0.0f);
  CHECK(y.data()[5] == 0.0f);
  CHECK(y.data()[3] + y.data()[4] == doctest::Approx(1.0));

  BlockMask dead{1, 2, 3, {0, 0, 0, 1, 1, 1}};
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 3}), dead), MaskError);
}

TEST_CASE("cross_entropy_masked examples") {
  std::vector<TokenId> t0{2};
  std::vector<float> margin(5, 0.0f);
  margin[2] = 20.0f;
  CHECK(cross_entropy_masked(Tensor({1, 5}, margin), t0, -1).item() < 1e-6f);

  std::vector<TokenId> t1{0, 3, 1};
  CHECK(cross_entropy_masked(Tensor::full({3, 7}, 0.4f), t1, -1).item() ==
        doctest::Approx(std::log(7.0)));

  // Two positions, the first ignored: equals the unmasked loss of the second row alone.
  Tensor two({2, 3}, {5, -1, 2, 0.5f, 1.5f, -0.5f});
  std::vector<TokenId> masked{0, 1};
  std::vector<TokenId> single{1};
  const float unmasked = cross_entropy_masked(Tensor({1, 3}, {0.5f, 1.5f, -0.5f}), single, -1).item();
  const double by_hand =
      std::log(std::exp(0.5) + std::exp(1.5) + std::exp(-0.5)) - 1.5;
  CHECK(unmasked == doctest::Approx(by_hand));
  CHECK(cross_entropy_masked(two, masked, 0).item() == doctest::Approx(by_hand));

  std::vector<TokenId> all_pad{0, 0};
  CHECK_THROWS_AS(cross_entropy_masked(two, all_pad, 0), EmptyLossError);
  std::vector<TokenId> bad{5, 1};
  CHECK_THROWS_AS(cross_entropy_masked(two, bad, 0), ContractError);
}

TEST_CASE("cross entropy gradient is zero on ignored rows") {
  Tensor logits({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<TokenId> t{0, 2};
  Tape tape;
  TapeScope<float> scope(tape);
  backward(tape, cross_entropy_masked(logits, t, 0));
  for (std::size_t j = 0; j < 3; ++j) CHECK(logits.grad()[j] == 0.0f);
  double s = 0;
  for (std::size_t j = 3; j < 6; ++j) s += logits.grad()[j];
  CHECK(std::abs(s) < 1e-6);
}

TEST_CASE("backward examples") {
  Tape tape;
  TapeScope<float> scope(tape);
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(tape, sum(x));
  for (float g : x.grad()) CHECK(g == 1.0f);

  Tensor a = Tensor::scalar(3.0f, true), b = Tensor::scalar(-2.0f, true);
  backward(tape, mul(a, b));
  CHECK(a.grad()[0] == -2.0f);
  CHECK(b.grad()[0] == 3.0f);

  CHECK_THROWS_AS(backward(tape, x), ContractError);
  Tensor orphan = Tensor::scalar(1.0f);
  CHECK_THROWS_AS(backward(tape, orphan), ContractError);
}

TEST_CASE("matmul -> relu -> sum gradients match central differences") {
  std::mt19937_64 rng(8);
  auto a = htr::testing::away_from_zero<double>({3, 4}, rng);
  auto b = htr::testing::away_from_zero<double>({4, 2}, rng);
  auto f = [&] { return sum(relu(matmul(a, b))); };
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  TapeD tape;
  {
    TapeScope<double> scope(tape);
    backward(tape, f());
  }
  const double eps = 1e-6;
  for (TensorD* t : {&a, &b}) {
    auto vals = t->mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + eps;
      const double up = f().item();
      vals[i] = saved - eps;
      const double down = f().item();
      vals[i] = saved;
      CHECK(t->grad()[i] == doctest::Approx((up - down) / (2 * eps)).epsilon(1e-6));
    }
  }
}

TEST_CASE("fan-out accumulates the sum of branch gradients") {
  std::mt19937_64 rng(9);
  auto x = random_tensor<float>({2, 3}, rng, -1, 1, true);
  auto w = random_tensor<float>({2, 3}, rng);
  Tape tape;
  TapeScope<float> scope(tape);
  // loss = sum(x*w) + sum(3x): d/dx = w + 3
  auto loss = add(sum(mul(x, w)), sum(scale(x, 3.0)));
  auto stats = backward(tape, loss);
  CHECK(stats.visited == tape.size());
  for (std::size_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == doctest::Approx(w.data()[i] + 3.0f));
}

TEST_CASE("reshape round trip is the identity on data") {
  std::mt19937_64 rng(10);
  auto x = random_tensor<float>({2, 3, 4}, rng);
  auto y = reshape(reshape(x, {4, 6}), {2, 3, 4});
  CHECK(y.shape() == x.shape());
  CHECK(htr::testing::max_abs_diff(y.data(), x.data()) == 0.0);
  CHECK_THROWS_AS(reshape(x, {5, 5}), DimensionError);
}

TEST_CASE("permute, transpose and concat layouts") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t = transpose(x, 0, 1);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(std::vector<float>(t.data().begin(), t.data().end()) == std::vector<float>{1, 4, 2, 5, 3, 6});

  Tensor y({2, 1}, {7, 8});
  auto c = concat<float>({x, y}, 1);
  CHECK(c.shape() == Shape{2, 4});
  CHECK(std::vector<float>(c.data().begin(), c.data().end()) ==
        std::vector<float>{1, 2, 3, 7, 4, 5, 6, 8});
  CHECK_THROWS_AS(concat<float>({x, Tensor::zeros({3, 1})}, 1), DimensionError);
}

TEST_CASE("embedding lookup scatters gradient into rows") {
  Tensor table({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<TokenId> ids{2, 0, 2};
  Tape tape;
  TapeScope<float> scope(tape);
  auto e = embedding_lookup(table, ids);
  CHECK(std::vector<float>(e.data().begin(), e.data().end()) == std::vector<float>{5, 6, 1, 2, 5, 6});
  backward(tape, sum(e));
  CHECK(std::vector<float>(table.grad().begin(), table.grad().end()) ==
        std::vector<float>{1, 1, 0, 0, 2, 2});
  std::vector<TokenId> bad{3};
  CHECK_THROWS_AS(embedding_lookup(table, bad), ContractError);
}

TEST_CASE("global_avgpool and add_bias") {
  auto g = global_avgpool(Tensor({1, 2, 1, 2}, {1, 3, 5, 7}));
  CHECK(g.shape() == Shape{1, 2});
  CHECK(g.data()[0] == 2.0f);
  CHECK(g.data()[1] == 6.0f);
  auto b = add_bias(Tensor::zeros({2, 2}), Tensor({2}, {1, 2}));
  CHECK(std::vector<float>(b.data().begin(), b.data().end()) == std::vector<float>{1, 2, 1, 2});
  CHECK_THROWS_AS(add(Tensor::zeros({2, 2}), Tensor::zeros({2, 1})), DimensionError);
}

TEST_CASE("dropout is identity at p=0 and inverted-scales otherwise") {
  std::mt19937_64 rng(11);
  auto x = Tensor::full({1000}, 1.0f);
  CHECK(dropout(x, 0.0, rng).node() == x.node());
  auto y = dropout(x, 0.5, rng);
  std::size_t zeros = 0;
  for (float v : y.data()) {
    CHECK((v == 0.0f || v == 2.0f));
    zeros += v == 0.0f;
  }
  CHECK(zeros > 400);
  CHECK(zeros < 600);
}

TEST_CASE("finite checks abort on NaN only when enabled") {
  Tensor x({1, 2}, {std::nanf(""), 1.0f});
  CHECK_NOTHROW(scale(x, 2.0));
  set_finite_checks(true);
  CHECK_THROWS_AS(scale(x, 2.0), NonFiniteError);
  set_finite_checks(false);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 2}, {}), DimensionError);
  Tensor x({2}, {1, 2}, true);
  x.mutable_grad();
  CHECK(x.grad().size() == x.numel());
}

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(12);
  auto w = random_tensor<double>({3, 4}, rng);
  auto x = random_tensor<double>({4, 2}, rng);
  CHECK(grad_check([&] { return sum(matmul(w, x)); }, {w, x}) < 1e-8);

  auto logits = random_tensor<double>({4, 6}, rng, -3, 3);
  std::vector<TokenId> targets{1, 0, 5, 2};
  CHECK(grad_check([&] { return cross_entropy_masked(logits, targets, -1); }, {logits}) < 1e-6);
}
