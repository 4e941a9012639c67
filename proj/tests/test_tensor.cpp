// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "support.hpp"
#include "xllm/error.hpp"
#include "xllm/grad_check.hpp"
#include "xllm/tensor.hpp"

using namespace xllm;
using xllm::testing::normal;

TEST_CASE("matmul: identity and scalar products") {
  Tensor i2 = Tensor::matrix({{1, 0}, {0, 1}});
  Tensor b = Tensor::matrix({{3, 4}, {5, 6}});
  Tensor c = matmul(i2, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.at(0, 0) == 3);
  CHECK(c.at(0, 1) == 4);
  CHECK(c.at(1, 0) == 5);
  CHECK(c.at(1, 1) == 6);
  CHECK(matmul(Tensor::matrix({{2}}), Tensor::matrix({{3}})).item() == 6);
}

TEST_CASE("matmul: inner extents must agree") {
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST_CASE("matmul: gradient of the sum matches central differences") {
  std::mt19937_64 rng(3);
  Tensor a = normal(rng, {4, 3});
  Tensor b = normal(rng, {3, 2});
  CHECK(grad_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a) < 1e-6);
  CHECK(grad_check([&](const Tensor& x) { return sum(matmul(a, x)); }, b) < 1e-6);
}

TEST_CASE("closed-form values of softmax, sigmoid and cross-entropy") {
  Tensor s = softmax(Tensor::vector({0, 0, 0}));
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  const std::vector<int> target{0};
  CHECK(cross_entropy(Tensor::matrix({{10, -10}}), target).item() < 1e-4);
  // log-sum-exp oracle
  const double expected = std::log(std::exp(10.0) + std::exp(-10.0)) - 10.0;
  CHECK(cross_entropy(Tensor::matrix({{10, -10}}), target).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("cross-entropy ignores negative targets and needs one active row") {
  Tensor logits = Tensor::matrix({{1, 2, 3}, {3, 2, 1}});
  const std::vector<int> one{2, -1};
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK(cross_entropy(logits, one).item() == doctest::Approx(lse - 3.0).epsilon(1e-12));
  const std::vector<int> none{-1, -1};
  CHECK_THROWS(cross_entropy(logits, none));
}

TEST_CASE("grad_check: sum of squares and a constant") {
  Tensor x = Tensor::vector({1, 2});
  CHECK(grad_check([](const Tensor& v) { return sum(mul(v, v)); }, x, 1e-5) < 1e-7);
  CHECK(grad_check([](const Tensor&) { return Tensor::scalar(4.0); }, x) == 0.0);
}

TEST_CASE("grad_check: non-finite values are numerical errors") {
  Tensor x = Tensor::vector({0.0, 1.0});
  CHECK_THROWS_AS(grad_check([](const Tensor& v) { return sum(reciprocal(v)); }, x), NumericalError);
}

TEST_CASE("primitive suite covers the required operations") {
  std::set<std::string> names;
  for (const auto& p : primitive_suite()) names.insert(p.name);
  for (const char* need : {"add", "mul", "softmax", "layer_norm", "sigmoid", "relu", "gelu", "conv1d", "conv2d",
                           "max_pool_time", "embedding", "cross_entropy", "mean", "sum", "concat_rows",
                           "slice_rows"}) {
    CHECK_MESSAGE(names.count(need) == 1, need);
  }
}

TEST_CASE("primitive suite: 20 random smooth points each below 1e-5") {
  std::mt19937_64 rng(11);
  for (const auto& prim : primitive_suite()) {
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
      PrimitiveCase c = prim.make_case(rng);
      worst = std::max(worst, grad_check_params(c.loss, c.inputs));
    }
    CHECK_MESSAGE(worst < 1e-5, prim.name << " " << worst);
  }
}

TEST_CASE("forward passes are deterministic") {
  auto run = [] {
    std::mt19937_64 rng(5);
    Tensor x = normal(rng, {4, 6});
    Tensor w = normal(rng, {6, 3});
    return softmax(gelu(matmul(x, w)));
  };
  CHECK(xllm::testing::bit_identical(run(), run()));
}

TEST_CASE("tape: backward visits each record once and empties the tape") {
  Tensor x = Tensor::vector({1.0, -2.0, 3.0});
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = sum(mul(x, x));
  CHECK(tape.size() == 2);
  tape.backward(y);
  CHECK(tape.size() == 0);
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == -4.0);
  CHECK(x.grad()[2] == 6.0);
}

TEST_CASE("tape: a reused input accumulates adjoints") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = add(mul(x, x), x);  // dy/dx = 2x + 1
  tape.backward(y);
  CHECK(x.grad()[0] == 7.0);
}

TEST_CASE("tape: nothing is recorded without tracked inputs or under NoGrad") {
  Tape tape;
  Tensor a = Tensor::vector({1, 2});
  (void)add(a, a);
  CHECK(tape.size() == 0);
  a.set_requires_grad(true);
  {
    NoGrad guard;
    (void)add(a, a);
  }
  CHECK(tape.size() == 0);
  (void)add(a, a);
  CHECK(tape.size() == 1);
}

TEST_CASE("max pooling routes ties to the first maximum") {
  Tensor x({4, 1}, std::vector<double>{2.0, 2.0, 1.0, 5.0});
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = max_pool_time(x, 2);
  CHECK(y.shape() == Shape{2, 1});
  CHECK(y.at(0) == 2.0);
  CHECK(y.at(1) == 5.0);
  tape.backward(sum(y));
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[3] == 1.0);
}

TEST_CASE("broadcasting rules") {
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor r = add(a, Tensor::vector({10, 20}));
  CHECK(r.at(1, 1) == 24);
  CHECK(mul(a, Tensor::scalar(2.0)).at(1, 0) == 6);
  CHECK_THROWS_AS(add(a, Tensor::vector({1, 2, 3})), DimensionError);
}

TEST_CASE("only float64 is a supported dtype") {
  CHECK(parse_dtype("float64") == DType::kFloat64);
  CHECK_THROWS_AS(parse_dtype("float16"), ConfigError);
}

TEST_CASE("tensor invariants: data length and gradient shape") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.data().size() == shape_size(t.shape()));
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));
  t.set_requires_grad(true);
  Tape tape;
  tape.backward(sum(t));
  CHECK(t.grad().size() == t.size());
}
