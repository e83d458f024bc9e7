#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace i3net::det {

// Center-form box in normalized image coordinates.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  static Box from_corners(double x0, double y0, double x1, double y1) {
    return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
  }
  double x0() const { return cx - w / 2; }
  double y0() const { return cy - h / 2; }
  double x1() const { return cx + w / 2; }
  double y1() const { return cy + h / 2; }
};

// Throws std::invalid_argument for non-positive width or height.
double iou(const Box& a, const Box& b);

// SSD offset encoding with variances (0.1, 0.2).
using Offsets = std::array<double, 4>;
constexpr double kCenterVariance = 0.1;
constexpr double kSizeVariance = 0.2;
Offsets encode(const Box& gt, const Box& anchor);
Box decode(const Offsets& offsets, const Box& anchor);

}  // namespace i3net::det
