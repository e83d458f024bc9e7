#include "i3net/autodiff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace i3net::ad {

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn,
                           std::vector<Tensor> inputs, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = loss_fn(inputs);
  if (loss.rank() != 0) throw ShapeError("grad_check: loss must be a scalar, got " + shape_str(loss.shape()));
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_data();
    for (std::size_t e = 0; e < values.size(); ++e) {
      const double saved = values[e];
      values[e] = saved + eps;
      const double plus = loss_fn(inputs).item();
      values[e] = saved - eps;
      const double minus = loss_fn(inputs).item();
      values[e] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[i][e];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > result.max_relative_error || (i == 0 && e == 0)) {
        result = {err, i, e, a, numeric};
      }
    }
  }
  return result;
}

double grad_check(const std::function<Tensor(const Tensor&)>& loss_fn, Tensor x, double eps) {
  return grad_check([&](const std::vector<Tensor>& in) { return loss_fn(in[0]); }, {std::move(x)}, eps)
      .max_relative_error;
}

}  // namespace i3net::ad
