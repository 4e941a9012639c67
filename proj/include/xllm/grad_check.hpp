// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "xllm/tensor.hpp"

namespace xllm {

// Max over coordinates of |analytic - fd| / (|analytic| + |fd| + 1e-12), where
// fd is the central difference with step h. Throws NumericalError on any
// non-finite value.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h = 1e-5);

// Same measure against every coordinate of `params`, which are perturbed in
// place (and restored). `f` must rebuild its graph from the current values.
double grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         double h = 1e-5);

// One randomly drawn, smooth instance of a differentiable primitive.
struct PrimitiveCase {
  std::vector<Tensor> inputs;
  std::function<Tensor()> loss;
};

struct Primitive {
  std::string name;
  std::function<PrimitiveCase(std::mt19937_64&)> make_case;
};

// Every differentiable primitive of the tensor core with a generator of
// smooth random instances (no ties, no kinks within a few steps h).
std::vector<Primitive> primitive_suite();

}  // namespace xllm
