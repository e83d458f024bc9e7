#pragma once

#include <vector>

#include "i3net/nn/parameters.hpp"

namespace i3net::train {

// SGD with heavy-ball momentum and L2 weight decay:
//   v <- mu v + (g + wd w);  w <- w - lr v
// Parameters without a gradient this step are left untouched.
class Sgd {
 public:
  Sgd(std::vector<nn::ParameterSet*> groups, double momentum, double weight_decay);

  void step(double learning_rate);
  void zero_grad();

 private:
  std::vector<nn::ParameterSet*> groups_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<std::vector<double>>> velocity_;
};

}  // namespace i3net::train
