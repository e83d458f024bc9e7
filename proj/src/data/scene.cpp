#include "i3net/data/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "i3net/data/rng.hpp"

namespace i3net::data {

std::string to_string(Domain domain) { return domain == Domain::kSource ? "source" : "target"; }

Domain parse_domain(const std::string& text) {
  if (text == "source") return Domain::kSource;
  if (text == "target") return Domain::kTarget;
  throw std::invalid_argument("unknown domain '" + text + "' (expected source or target)");
}

void SceneSpec::validate() const {
  if (class_count < 2) throw std::invalid_argument("SceneSpec: class_count must be at least 2");
  if (class_count > 3) throw std::invalid_argument("SceneSpec: only circle, square and triangle classes exist");
  if (class_frequencies.size() != class_count) {
    throw std::invalid_argument("SceneSpec: class_frequencies has " + std::to_string(class_frequencies.size()) +
                                " entries for " + std::to_string(class_count) + " classes");
  }
  double total = 0;
  for (double f : class_frequencies) {
    if (!(f >= 0.0)) throw std::invalid_argument("SceneSpec: class frequencies must be non-negative");
    total += f;
  }
  if (total == 0.0) throw std::invalid_argument("SceneSpec: class frequencies are all zero");
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("SceneSpec: class frequencies must sum to 1");
  if (min_objects > max_objects) throw std::invalid_argument("SceneSpec: min_objects exceeds max_objects");
  if (image_size < 16) throw std::invalid_argument("SceneSpec: image_size must be at least 16");
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb rgb{0, 0, 0};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  return {rgb.r + m, rgb.g + m, rgb.b + m};
}

struct Placement {
  int cls;
  double x0, y0, side;  // pixel units
};

// Signed distance (negative inside) of pixel centre (px, py) to the shape.
double signed_distance(const Placement& p, double px, double py) {
  const double half = p.side / 2;
  const double cx = p.x0 + half, cy = p.y0 + half;
  switch (p.cls) {
    case kCircle:
      return std::hypot(px - cx, py - cy) - half;
    case kSquare:
      return std::max(std::abs(px - cx), std::abs(py - cy)) - half;
    default: {
      // apex at top centre, base along the bottom edge
      const std::array<std::array<double, 2>, 3> v{{{cx, p.y0}, {p.x0 + p.side, p.y0 + p.side}, {p.x0, p.y0 + p.side}}};
      double d = -1e300;
      for (int i = 0; i < 3; ++i) {
        const auto& a = v[i];
        const auto& b = v[(i + 1) % 3];
        const double ex = b[0] - a[0], ey = b[1] - a[1];
        const double len = std::hypot(ex, ey);
        // outward normal of a clockwise (in image coordinates) edge
        const double nx = ey / len, ny = -ex / len;
        d = std::max(d, (px - a[0]) * nx + (py - a[1]) * ny);
      }
      return d;
    }
  }
}

constexpr double kStroke = 2.5;

struct Layout {
  std::vector<Placement> objects;
};

int draw_class(const SceneSpec& spec, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0;
  int last_nonzero = 0;
  for (std::size_t k = 0; k < spec.class_count; ++k) {
    if (spec.class_frequencies[k] > 0) last_nonzero = static_cast<int>(k);
    acc += spec.class_frequencies[k];
    if (u < acc && spec.class_frequencies[k] > 0) return static_cast<int>(k);
  }
  return last_nonzero;
}

Layout draw_layout(const SceneSpec& spec, Rng& rng) {
  Layout layout;
  const double size = static_cast<double>(spec.image_size);
  const auto count = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(spec.min_objects), static_cast<std::int64_t>(spec.max_objects)));
  const auto min_side = static_cast<std::int64_t>(std::lround(size * 0.22));
  const auto max_side = static_cast<std::int64_t>(std::lround(size * 0.44));
  for (std::size_t n = 0; n < count; ++n) {
    const int cls = draw_class(spec, rng);
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double side = static_cast<double>(rng.uniform_int(min_side, max_side));
      const double x0 = static_cast<double>(rng.uniform_int(1, static_cast<std::int64_t>(size - side) - 1));
      const double y0 = static_cast<double>(rng.uniform_int(1, static_cast<std::int64_t>(size - side) - 1));
      bool clear = true;
      for (const auto& o : layout.objects) {
        const double gap = 2.0;
        if (x0 < o.x0 + o.side + gap && o.x0 < x0 + side + gap && y0 < o.y0 + o.side + gap &&
            o.y0 < y0 + side + gap) {
          clear = false;
          break;
        }
      }
      if (clear) {
        layout.objects.push_back({cls, x0, y0, side});
        break;
      }
    }
  }
  return layout;
}

std::vector<std::uint8_t> rasterize(const Placement& p, std::size_t size, bool outline) {
  std::vector<std::uint8_t> mask(size * size, 0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double d = signed_distance(p, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
      if (d <= 0 && (!outline || d > -kStroke)) mask[y * size + x] = 1;
    }
  }
  return mask;
}

}  // namespace

std::vector<std::vector<std::uint8_t>> render_object_masks(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng = Rng::stream(spec.seed, index);
  const Layout layout = draw_layout(spec, rng);
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& p : layout.objects) masks.push_back(rasterize(p, spec.image_size, false));
  return masks;
}

Scene generate_scene(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  const std::size_t size = spec.image_size;
  const std::size_t plane = size * size;
  Rng rng = Rng::stream(spec.seed, index);
  const Layout layout = draw_layout(spec, rng);
  const bool target = spec.domain == Domain::kTarget;

  std::vector<double> img(3 * plane);
  if (!target) {
    const Rgb bg = hsv(rng.uniform(), rng.uniform(0.0, 0.15), rng.uniform(0.7, 0.95));
    for (std::size_t i = 0; i < plane; ++i) {
      img[i] = bg.r;
      img[plane + i] = bg.g;
      img[2 * plane + i] = bg.b;
    }
  } else {
    const Rgb base = hsv(rng.uniform(), rng.uniform(0.2, 0.5), rng.uniform(0.35, 0.55));
    const double angle = rng.uniform(0.0, 3.141592653589793);
    const double freq = rng.uniform(0.25, 0.6);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double stripe = 0.12 * std::sin(freq * (ca * static_cast<double>(x) + sa * static_cast<double>(y)) + phase);
        const std::size_t i = y * size + x;
        img[i] = base.r + stripe + rng.uniform(-0.06, 0.06);
        img[plane + i] = base.g + stripe + rng.uniform(-0.06, 0.06);
        img[2 * plane + i] = base.b + stripe + rng.uniform(-0.06, 0.06);
      }
    }
  }

  Scene scene;
  for (const auto& p : layout.objects) {
    const Rgb color = target ? hsv(rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.9), rng.uniform(0.8, 1.0))
                             : hsv(rng.uniform(0.0, 0.3), rng.uniform(0.6, 1.0), rng.uniform(0.25, 0.6));
    const auto mask = rasterize(p, size, target);
    std::size_t x_min = size, x_max = 0, y_min = size, y_max = 0;
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        if (!mask[y * size + x]) continue;
        const std::size_t i = y * size + x;
        img[i] = color.r;
        img[plane + i] = color.g;
        img[2 * plane + i] = color.b;
        x_min = std::min(x_min, x);
        x_max = std::max(x_max, x + 1);
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y + 1);
      }
    }
    if (x_max <= x_min || y_max <= y_min) continue;
    const double s = static_cast<double>(size);
    scene.annotations.push_back({p.cls, (static_cast<double>(x_min + x_max) / 2.0) / s,
                                 (static_cast<double>(y_min + y_max) / 2.0) / s,
                                 static_cast<double>(x_max - x_min) / s, static_cast<double>(y_max - y_min) / s});
  }

  for (double& v : img) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  scene.image = ad::Tensor::from({3, size, size}, std::move(img));
  return scene;
}

}  // namespace i3net::data
