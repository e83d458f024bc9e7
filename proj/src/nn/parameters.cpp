#include "i3net/nn/parameters.hpp"

#include <cmath>
#include <stdexcept>

#include "i3net/autodiff/ops.hpp"

namespace i3net::nn {

ad::Tensor ParameterSet::add(const std::string& name, ad::Tensor tensor) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name " + name);
  tensor.set_requires_grad(true);
  items_.emplace_back(name, std::move(tensor));
  return items_.back().second;
}

const ad::Tensor& ParameterSet::get(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw std::out_of_range("no parameter named " + name);
}

ad::Tensor& ParameterSet::get(const std::string& name) {
  for (auto& [n, t] : items_)
    if (n == name) return t;
  throw std::out_of_range("no parameter named " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& item : items_)
    if (item.first == name) return true;
  return false;
}

void ParameterSet::zero_grad() {
  for (auto& item : items_) item.second.zero_grad();
}

void ParameterSet::set_trainable(bool trainable) {
  for (auto& item : items_) {
    item.second.set_requires_grad(trainable);
    if (!trainable) item.second.zero_grad();
  }
}

std::vector<std::vector<double>> ParameterSet::snapshot() const {
  std::vector<std::vector<double>> out;
  for (const auto& item : items_) out.emplace_back(item.second.data().begin(), item.second.data().end());
  return out;
}

namespace {
ad::Tensor normal_tensor(ad::Shape shape, double std, Rng& rng) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = std * rng.normal();
  return ad::Tensor::from(std::move(shape), std::move(v));
}
}  // namespace

Conv2dParams make_conv(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t kernel, Rng& rng, double weight_std) {
  if (weight_std < 0) weight_std = std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
  Conv2dParams p;
  p.weight = params.add(name + ".weight", normal_tensor({out, in, kernel, kernel}, weight_std, rng));
  p.bias = params.add(name + ".bias", ad::Tensor::zeros({out}));
  return p;
}

LinearParams make_linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                         double weight_std) {
  if (weight_std < 0) weight_std = std::sqrt(2.0 / static_cast<double>(in));
  LinearParams p;
  p.weight = params.add(name + ".weight", normal_tensor({in, out}, weight_std, rng));
  p.bias = params.add(name + ".bias", ad::Tensor::zeros({out}));
  return p;
}

ad::Tensor linear(const ad::Tensor& x, const LinearParams& layer) {
  return ad::add(ad::matmul(x, layer.weight), layer.bias);
}

ad::Tensor global_avg_pool(const ad::Tensor& x) {
  if (x.rank() != 4) throw ad::ShapeError("global_avg_pool: expected N x C x H x W, got " + ad::shape_str(x.shape()));
  return ad::mean(ad::reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

}  // namespace i3net::nn
