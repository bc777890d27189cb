#pragma once

#include <functional>
#include <string>
#include <vector>

#include "htr/tensor.hpp"

namespace htr {

using ScalarFn = std::function<TensorD()>;

/// Compares reverse-mode gradients of `f` with respect to `inputs` against
/// central differences (f(x+eps) - f(x-eps)) / (2 eps), coordinate by coordinate.
///
/// `f` must read the tensors in `inputs` (they are perturbed in place and
/// restored) and return a scalar. Relative error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|); the maximum is returned.
double grad_check(const ScalarFn& f, const std::vector<TensorD>& inputs, double eps = 1e-6);

struct GradCheckResult {
  std::string name;
  double max_error = 0;
  bool passed = false;
};

/// Runs every registered differentiable op at `points` random double-precision
/// points, plus the micro encoder-decoder composite.
std::vector<GradCheckResult> run_gradcheck_suite(unsigned long long seed, int points = 10,
                                                 double tolerance = 1e-4);

}  // namespace htr
