#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace i3net::train {

struct GradientCheckSummary {
  std::string name;
  std::size_t seeds = 0;
  double max_relative_error = 0;
  std::uint64_t worst_seed = 0;
  double seconds = 0;
};

// Finite-difference checks of every differentiable training loss on small
// random inputs: mlc, dcbr, pattern, pixel_adv, jca, pr, total. "total" runs
// the full per-step objective on 16 x 16 images, differentiating with respect
// to parameters that sit downstream of the gradient reversal points.
const std::vector<std::string>& gradient_check_names();

// Throws std::invalid_argument for an unknown name.
GradientCheckSummary run_gradient_check(const std::string& name, std::size_t seeds = 100,
                                        std::uint64_t first_seed = 1);

}  // namespace i3net::train
