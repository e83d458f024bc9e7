#include "i3net/detector/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace i3net::det {

double iou(const Box& a, const Box& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) throw std::invalid_argument("iou: box width and height must be positive");
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

Offsets encode(const Box& gt, const Box& anchor) {
  return {(gt.cx - anchor.cx) / (anchor.w * kCenterVariance), (gt.cy - anchor.cy) / (anchor.h * kCenterVariance),
          std::log(gt.w / anchor.w) / kSizeVariance, std::log(gt.h / anchor.h) / kSizeVariance};
}

Box decode(const Offsets& o, const Box& anchor) {
  // clamp the log-size terms so untrained heads cannot overflow
  const double dw = std::clamp(o[2] * kSizeVariance, -10.0, 4.0);
  const double dh = std::clamp(o[3] * kSizeVariance, -10.0, 4.0);
  return {anchor.cx + o[0] * kCenterVariance * anchor.w, anchor.cy + o[1] * kCenterVariance * anchor.h,
          anchor.w * std::exp(dw), anchor.h * std::exp(dh)};
}

}  // namespace i3net::det
