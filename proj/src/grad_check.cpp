// SPDX-License-Identifier: Apache-2.0
#include "xllm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xllm/error.hpp"

namespace xllm {
namespace {

double rel_err(double analytic, double fd) {
  return std::fabs(analytic - fd) / (std::fabs(analytic) + std::fabs(fd) + 1e-12);
}

double eval_scalar(const std::function<Tensor()>& f) {
  NoGrad guard;
  const double v = f().item();
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite function value");
  return v;
}

Tensor randn(std::mt19937_64& rng, Shape shape, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = nd(rng);
  return t;
}

Tensor rand_away_from_zero(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> ud(lo, hi);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = sign(rng) ? ud(rng) : -ud(rng);
  return t;
}

Tensor param(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

// Weighted sum against a fixed random tensor, so every output coordinate
// carries a distinct, non-trivial adjoint.
std::function<Tensor(const Tensor&)> projector(std::mt19937_64& rng) {
  auto seed = rng();
  return [seed](const Tensor& y) {
    std::mt19937_64 local(seed);
    Tensor w = randn(local, y.shape());
    return sum(mul(y, w));
  };
}

}  // namespace

double grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double h) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor y = f();
    if (y.size() != 1) throw DimensionError("grad_check: function must be scalar-valued");
    if (!std::isfinite(y.item())) throw NumericalError("grad_check: non-finite function value");
    tape.backward(y);
  }
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = eval_scalar(f);
      data[i] = orig - h;
      const double down = eval_scalar(f);
      data[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      if (!std::isfinite(analytic[i])) throw NumericalError("grad_check: non-finite gradient");
      worst = std::max(worst, rel_err(analytic[i], fd));
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.detach();
  return grad_check_params([&] { return f(probe); }, {probe}, h);
}

std::vector<Primitive> primitive_suite() {
  std::vector<Primitive> suite;
  auto simple = [&](std::string name, Shape shape, std::function<Tensor(const Tensor&)> op,
                    std::function<Tensor(std::mt19937_64&, Shape)> draw) {
    suite.push_back({std::move(name), [=](std::mt19937_64& rng) {
                       Tensor x = param(draw(rng, shape));
                       auto proj = projector(rng);
                       return PrimitiveCase{{x}, [=] { return proj(op(x)); }};
                     }});
  };
  auto normal = [](std::mt19937_64& rng, Shape s) { return randn(rng, std::move(s)); };

  auto binary = [&](std::string name, Shape sa, Shape sb,
                    std::function<Tensor(const Tensor&, const Tensor&)> op) {
    suite.push_back({std::move(name), [=](std::mt19937_64& rng) {
                       Tensor a = param(randn(rng, sa));
                       Tensor b = param(randn(rng, sb));
                       auto proj = projector(rng);
                       return PrimitiveCase{{a, b}, [=] { return proj(op(a, b)); }};
                     }});
  };

  binary("add", {3, 4}, {3, 4}, [](auto& a, auto& b) { return add(a, b); });
  binary("add_row_broadcast", {3, 4}, {4}, [](auto& a, auto& b) { return add(a, b); });
  binary("sub", {3, 4}, {3, 4}, [](auto& a, auto& b) { return sub(a, b); });
  binary("mul", {3, 4}, {3, 4}, [](auto& a, auto& b) { return mul(a, b); });
  binary("mul_scalar_broadcast", {5}, {1}, [](auto& a, auto& b) { return mul(a, b); });
  binary("matmul", {4, 3}, {3, 2}, [](auto& a, auto& b) { return matmul(a, b); });
  simple("scale", {3, 3}, [](const Tensor& x) { return scale(x, -1.7); }, normal);
  simple("add_scalar", {3, 3}, [](const Tensor& x) { return add_scalar(x, 0.3); }, normal);
  simple("reciprocal", {2, 3}, [](const Tensor& x) { return reciprocal(x); },
         [](std::mt19937_64& rng, Shape s) { return rand_away_from_zero(rng, std::move(s), 0.5, 2.0); });
  simple("abs", {2, 3}, [](const Tensor& x) { return abs(x); },
         [](std::mt19937_64& rng, Shape s) { return rand_away_from_zero(rng, std::move(s), 0.1, 2.0); });
  simple("transpose", {3, 5}, [](const Tensor& x) { return transpose(x); }, normal);
  simple("sigmoid", {3, 4}, [](const Tensor& x) { return sigmoid(x); }, normal);
  simple("relu", {3, 4}, [](const Tensor& x) { return relu(x); },
         [](std::mt19937_64& rng, Shape s) { return rand_away_from_zero(rng, std::move(s), 0.1, 2.0); });
  simple("gelu", {3, 4}, [](const Tensor& x) { return gelu(x); }, normal);
  simple("softmax", {3, 5}, [](const Tensor& x) { return softmax(x); }, normal);
  simple("sum", {2, 3}, [](const Tensor& x) { return scale(mul(sum(x), sum(x)), 0.5); }, normal);
  simple("mean", {2, 3}, [](const Tensor& x) { return mul(mean(x), mean(x)); }, normal);
  simple("slice_rows", {5, 3}, [](const Tensor& x) { return slice_rows(x, 1, 3); }, normal);
  simple("slice_cols", {3, 5}, [](const Tensor& x) { return slice_cols(x, 2, 2); }, normal);
  simple("reshape", {2, 6}, [](const Tensor& x) { return reshape(x, {3, 4}); }, normal);
  binary("concat_rows", {2, 3}, {4, 3}, [](auto& a, auto& b) {
    std::vector<Tensor> parts{a, b};
    return concat_rows(parts);
  });
  binary("concat_cols", {3, 2}, {3, 4}, [](auto& a, auto& b) {
    std::vector<Tensor> parts{a, b};
    return concat_cols(parts);
  });

  suite.push_back({"layer_norm", [](std::mt19937_64& rng) {
                     Tensor x = param(randn(rng, {3, 6}));
                     Tensor g = param(randn(rng, {6}));
                     Tensor b = param(randn(rng, {6}));
                     auto proj = projector(rng);
                     return PrimitiveCase{{x, g, b}, [=] { return proj(layer_norm(x, g, b)); }};
                   }});
  suite.push_back({"conv1d", [](std::mt19937_64& rng) {
                     Tensor x = param(randn(rng, {9, 3}));
                     Tensor w = param(randn(rng, {5, 3, 4}, 0.5));
                     Tensor b = param(randn(rng, {4}));
                     auto proj = projector(rng);
                     return PrimitiveCase{{x, w, b}, [=] { return proj(conv1d(x, w, b, 2, 2, 1)); }};
                   }});
  suite.push_back({"depthwise_conv1d", [](std::mt19937_64& rng) {
                     Tensor x = param(randn(rng, {7, 3}));
                     Tensor w = param(randn(rng, {3, 3}));
                     Tensor b = param(randn(rng, {3}));
                     auto proj = projector(rng);
                     return PrimitiveCase{{x, w, b}, [=] { return proj(depthwise_conv1d(x, w, b, 1, 1)); }};
                   }});
  suite.push_back({"conv2d", [](std::mt19937_64& rng) {
                     Tensor x = param(randn(rng, {6, 5, 2}));
                     Tensor w = param(randn(rng, {3, 3, 2, 3}, 0.5));
                     Tensor b = param(randn(rng, {3}));
                     auto proj = projector(rng);
                     Conv2dGeometry geo{2, 2, 1, 1, 0, 0};
                     return PrimitiveCase{{x, w, b}, [=] { return proj(conv2d(x, w, b, geo)); }};
                   }});
  suite.push_back({"max_pool_time", [](std::mt19937_64& rng) {
                     // Distinct values on a 0.05 grid keep every window's argmax stable.
                     std::vector<double> vals(8 * 3);
                     std::iota(vals.begin(), vals.end(), 0.0);
                     std::shuffle(vals.begin(), vals.end(), rng);
                     for (auto& v : vals) v = 0.05 * v - 0.5;
                     Tensor x = param(Tensor({8, 3}, vals));
                     auto proj = projector(rng);
                     return PrimitiveCase{{x}, [=] { return proj(max_pool_time(x, 2)); }};
                   }});
  suite.push_back({"embedding", [](std::mt19937_64& rng) {
                     Tensor table = param(randn(rng, {6, 4}));
                     std::vector<int> ids{3, 0, 3, 5};
                     auto proj = projector(rng);
                     return PrimitiveCase{{table}, [=] { return proj(embedding(table, ids)); }};
                   }});
  suite.push_back({"cross_entropy", [](std::mt19937_64& rng) {
                     Tensor logits = param(randn(rng, {4, 5}));
                     std::vector<int> targets{1, -1, 4, 0};
                     return PrimitiveCase{{logits}, [=] { return cross_entropy(logits, targets); }};
                   }});
  return suite;
}

}  // namespace xllm
