#pragma once

#include <functional>
#include <vector>

#include "i3net/autodiff/tensor.hpp"

namespace i3net::ad {

struct GradCheckResult {
  double max_relative_error = 0.0;
  // Location of the worst element: input index and flat element offset.
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients with central differences. The error of an
// element is |analytic - numeric| / max(1, |analytic|); the maximum is returned.
// `loss_fn` must return a scalar; each input is perturbed in place and restored.
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn,
                           std::vector<Tensor> inputs, double eps = 1e-5);

double grad_check(const std::function<Tensor(const Tensor&)>& loss_fn, Tensor x, double eps = 1e-5);

}  // namespace i3net::ad
