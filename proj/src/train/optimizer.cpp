#include "i3net/train/optimizer.hpp"

namespace i3net::train {

Sgd::Sgd(std::vector<nn::ParameterSet*> groups, double momentum, double weight_decay)
    : groups_(std::move(groups)), momentum_(momentum), weight_decay_(weight_decay) {
  for (auto* g : groups_) {
    auto& vg = velocity_.emplace_back();
    for (const auto& [name, t] : g->items()) vg.emplace_back(t.size(), 0.0);
  }
}

void Sgd::step(double learning_rate) {
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& items = groups_[gi]->items();
    for (std::size_t pi = 0; pi < items.size(); ++pi) {
      auto& t = items[pi].second;
      if (!t.requires_grad() || !t.has_grad()) continue;
      auto w = t.mutable_data();
      const auto g = t.grad();
      auto& v = velocity_[gi][pi];
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + (g[i] + weight_decay_ * w[i]);
        w[i] -= learning_rate * v[i];
      }
    }
  }
}

void Sgd::zero_grad() {
  for (auto* g : groups_) g->zero_grad();
}

}  // namespace i3net::train
