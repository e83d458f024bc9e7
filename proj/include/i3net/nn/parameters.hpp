#pragma once

#include <string>
#include <utility>
#include <vector>

#include "i3net/autodiff/tensor.hpp"
#include "i3net/data/rng.hpp"

namespace i3net::nn {

// Ordered collection of named trainable tensors. Insertion order is the
// serialization and update order.
class ParameterSet {
 public:
  ad::Tensor add(const std::string& name, ad::Tensor tensor);
  const ad::Tensor& get(const std::string& name) const;
  ad::Tensor& get(const std::string& name);
  bool contains(const std::string& name) const;

  std::vector<std::pair<std::string, ad::Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, ad::Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  void zero_grad();
  void set_trainable(bool trainable);
  // Deep copy of all values.
  std::vector<std::vector<double>> snapshot() const;

 private:
  std::vector<std::pair<std::string, ad::Tensor>> items_;
};

// He-normal weights (std = sqrt(2 / fan_in)) and zero bias.
struct Conv2dParams {
  ad::Tensor weight;
  ad::Tensor bias;
};
Conv2dParams make_conv(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t kernel, Rng& rng, double weight_std = -1.0);

// Affine layer y = x W + b with W: in x out.
struct LinearParams {
  ad::Tensor weight;
  ad::Tensor bias;
};
LinearParams make_linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                         double weight_std = -1.0);

ad::Tensor linear(const ad::Tensor& x, const LinearParams& layer);

// N x C x H x W -> N x C.
ad::Tensor global_avg_pool(const ad::Tensor& x);

}  // namespace i3net::nn
