#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "i3net/autodiff/tensor.hpp"

namespace i3net::data {

enum class Domain { kSource, kTarget };

std::string to_string(Domain domain);
Domain parse_domain(const std::string& text);

enum ShapeClass : int { kCircle = 0, kSquare = 1, kTriangle = 2 };

struct SceneSpec {
  Domain domain = Domain::kSource;
  std::size_t image_size = 64;  // square RGB images
  std::size_t class_count = 3;
  std::vector<double> class_frequencies{1.0 / 3, 1.0 / 3, 1.0 / 3};
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument on a malformed spec.
  void validate() const;
};

// Normalized (cx, cy, w, h); class_id in [0, K).
struct Annotation {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;

  bool operator==(const Annotation&) const = default;
};

struct Scene {
  ad::Tensor image;  // 3 x H x W, values k/255
  std::vector<Annotation> annotations;
};

// Source style: flat background, filled warm-hued shapes. Target style: striped
// and noisy background, cool-hued outlined shapes. Pure in (spec, index).
Scene generate_scene(const SceneSpec& spec, std::uint64_t index);

// Binary masks (H x W, row-major) of each object in generation order, matching
// the annotations of generate_scene for the same (spec, index).
std::vector<std::vector<std::uint8_t>> render_object_masks(const SceneSpec& spec, std::uint64_t index);

}  // namespace i3net::data
