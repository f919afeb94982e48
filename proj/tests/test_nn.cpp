#include <cmath>
#include <random>

#include <doctest.h>

#include "hicap/error.hpp"
#include "hicap/nn.hpp"

using namespace hicap;
using namespace hicap::nn;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_normal(std::move(s), 1.0, rng);
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("softmax of equal logits is uniform") {
    const auto p = softmax_rows(constant(Tensor({1, 3}, 0.0)));
    for (std::size_t i = 0; i < 3; ++i) CHECK(p->value[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("cosine of a vector with itself is one") {
    const auto v = constant(random_tensor({1, 7}, 1));
    CHECK(cosine(v, v)->value.item() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK_THROWS_AS(cosine(v, constant(Tensor({1, 7}, 0.0))), UsageError);
  }

  TEST_CASE("identity matmul") {
    Tensor eye({3, 3}, 0.0);
    for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    const auto a = random_tensor({3, 5}, 2);
    CHECK(matmul(constant(eye), constant(a))->value == a);
    CHECK_THROWS_AS(matmul(constant(a), constant(a)), UsageError);
  }

  TEST_CASE("gradient of x squared") {
    auto x = leaf(Tensor::scalar(3.0), true);
    backward(mul(x, x));
    CHECK(x->grad[0] == doctest::Approx(6.0));
  }

  TEST_CASE("cross-entropy gradient is softmax minus one-hot") {
    const Tensor logits_value({1, 4}, {0.5, -1.0, 2.0, 0.1});
    auto logits = leaf(logits_value, true);
    const int target[] = {2};
    backward(nll_rows(logits, target));
    double z = 0;
    for (double v : logits_value.storage()) z += std::exp(v);
    for (std::size_t i = 0; i < 4; ++i) {
      const double expected = std::exp(logits_value[i]) / z - (i == 2 ? 1.0 : 0.0);
      CHECK(logits->grad[i] == doctest::Approx(expected).epsilon(1e-12));
    }
  }

  TEST_CASE("zero scaling gives zero gradient") {
    auto x = leaf(random_tensor({2, 3}, 3), true);
    backward(affine(sum(mul(x, x)), 0.0));
    for (double g : x->grad) CHECK(g == 0.0);
  }

  TEST_CASE("finite-difference check of primitive ops") {
    const double eps = 1e-5;
    CHECK(grad_check([](const Var& x) { return sum(mul(x, x)); }, random_tensor({1, 8}, 4), eps) < 1e-6);
    const auto w = constant(random_tensor({4, 3}, 5));
    CHECK(grad_check([&](const Var& x) { return sum(gelu(matmul(x, w))); }, random_tensor({2, 4}, 6), eps) < 1e-6);
    CHECK(grad_check([](const Var& x) { return sum(mul(softmax_rows(x), x)); }, random_tensor({3, 4}, 7), eps) < 1e-6);
    const auto gain = constant(random_tensor({1, 5}, 8));
    const auto bias = constant(random_tensor({1, 5}, 9));
    const auto mix = constant(random_tensor({3, 5}, 10));
    CHECK(grad_check([&](const Var& x) { return sum(mul(layer_norm(x, gain, bias), mix)); }, random_tensor({3, 5}, 11),
                     eps) < 1e-5);
    const auto other = constant(random_tensor({1, 6}, 12));
    CHECK(grad_check([&](const Var& x) { return cosine(x, other); }, random_tensor({1, 6}, 13), eps) < 1e-6);
    const int targets[] = {1, 0, 3};
    CHECK(grad_check([&](const Var& x) { return nll_rows(x, targets); }, random_tensor({3, 4}, 14), eps) < 1e-6);
    const std::vector<std::uint8_t> allowed = {1, 1, 0, 1, 0, 0, 1, 1, 1};
    CHECK(grad_check([&](const Var& x) { return sum(mul(masked_softmax_rows(x, allowed), x)); },
                     random_tensor({3, 3}, 15), eps) < 1e-6);
    CHECK(grad_check([](const Var& x) { return sum(mean_rows(tanh(x))); }, random_tensor({4, 2}, 16), eps) < 1e-6);
  }

  TEST_CASE("masked softmax gives disallowed entries probability zero") {
    const std::vector<std::uint8_t> allowed = {1, 0, 1, 0, 1, 0};
    const auto p = masked_softmax_rows(constant(random_tensor({2, 3}, 17)), allowed);
    CHECK(p->value.at(0, 1) == 0.0);
    CHECK(p->value.at(1, 0) == 0.0);
    CHECK(p->value.at(1, 2) == 0.0);
    CHECK(p->value.at(1, 1) == 1.0);
  }

  TEST_CASE("Adam first step matches the update formula") {
    ParameterSet params;
    const auto& w = params.add("w", Tensor::scalar(1.0));
    params.zero_grad();
    w->grad[0] = 1.0;
    Adam adam(AdamConfig{1e-4});
    adam.step(params);
    // m_hat = 1, v_hat = 1 after bias correction.
    CHECK(w->value[0] == doctest::Approx(1.0 - 1e-4 / (1.0 + 1e-8)).epsilon(1e-15));
    CHECK(w->grad[0] == 0.0);
  }

  TEST_CASE("Adam second step matches a hand-rolled recurrence") {
    ParameterSet params;
    const auto& w = params.add("w", Tensor({2}, {0.5, -0.25}));
    Adam adam(AdamConfig{0.01});
    const double grads[2][2] = {{0.3, -1.0}, {-0.2, 0.5}};
    double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {0.5, -0.25};
    for (int t = 1; t <= 2; ++t) {
      params.zero_grad();
      for (int i = 0; i < 2; ++i) {
        w->grad[i] = grads[t - 1][i];
        m[i] = 0.9 * m[i] + 0.1 * grads[t - 1][i];
        v[i] = 0.999 * v[i] + 0.001 * grads[t - 1][i] * grads[t - 1][i];
        ref[i] -= 0.01 * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
      }
      adam.step(params);
    }
    CHECK(w->value[0] == doctest::Approx(ref[0]).epsilon(1e-14));
    CHECK(w->value[1] == doctest::Approx(ref[1]).epsilon(1e-14));
  }

  TEST_CASE("zero gradients and frozen parameters leave values unchanged") {
    ParameterSet params;
    const auto& a = params.add("a", Tensor({3}, {1, 2, 3}));
    const auto& b = params.add("b", Tensor({2}, {4, 5}));
    params.freeze("b");
    params.zero_grad();
    b->grad = {1.0, -1.0};
    Adam adam;
    adam.step(params);
    CHECK(a->value == Tensor({3}, {1, 2, 3}));
    CHECK(b->value == Tensor({2}, {4, 5}));
  }

  TEST_CASE("missing gradient is an error") {
    ParameterSet params;
    params.add("a", Tensor({1}, {1}));
    Adam adam;
    CHECK_THROWS_AS(adam.step(params), UsageError);
  }

  TEST_CASE("duplicate parameter paths are rejected") {
    ParameterSet params;
    params.add("x", Tensor({1}, {0}));
    CHECK_THROWS_AS(params.add("x", Tensor({1}, {0})), UsageError);
  }

  TEST_CASE("global gradient clipping") {
    ParameterSet params;
    const auto& a = params.add("a", Tensor({2}, {0, 0}));
    const auto& b = params.add("b", Tensor({1}, {0}));
    params.zero_grad();
    a->grad = {3.0, 0.0};
    b->grad = {4.0};
    CHECK(params.grad_norm() == doctest::Approx(5.0));
    params.clip_grad_norm(1.0);
    CHECK(params.grad_norm() == doctest::Approx(1.0));
    CHECK(a->grad[0] == doctest::Approx(0.6));
    params.clip_grad_norm(10.0);
    CHECK(b->grad[0] == doctest::Approx(0.8));
  }

  TEST_CASE("backward through shared subexpressions accumulates") {
    auto x = leaf(Tensor::scalar(2.0), true);
    const auto y = mul(x, x);
    backward(add(y, y));  // 2x^2 -> 4x
    CHECK(x->grad[0] == doctest::Approx(8.0));
  }

  TEST_CASE("no-grad guard records nothing") {
    auto x = leaf(Tensor::scalar(2.0), true);
    NoGradGuard guard;
    const auto y = mul(x, x);
    CHECK_FALSE(y->requires_grad);
  }
}
