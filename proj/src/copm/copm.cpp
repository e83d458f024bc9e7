#include "i3net/copm/copm.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "i3net/autodiff/ops.hpp"
#include "i3net/data/rng.hpp"

namespace i3net::copm {

namespace {

bool is_power_of_ten(std::uint64_t n) {
  while (n % 10 == 0 && n > 1) n /= 10;
  return n == 1;
}


ad::Tensor uniform_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  const double a = std::sqrt(3.0);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = static_cast<double>(static_cast<float>(rng.uniform(-a, a)));
  return ad::Tensor::from({rows, cols}, std::move(v));
}

ad::Tensor transpose(const ad::Tensor& m) { return ad::permute(m, {1, 0}); }

}  // namespace

RandomProjections make_random_projections(std::size_t fused_dim, std::size_t feature_channels,
                                          std::size_t class_channels, std::uint64_t seed) {
  if (fused_dim == 0 || feature_channels == 0 || class_channels == 0) {
    throw std::invalid_argument("make_random_projections: dimensions must be positive");
  }
  Rng rng(seed);
  RandomProjections p;
  p.r1 = uniform_matrix(fused_dim, feature_channels, rng);
  p.r2 = uniform_matrix(fused_dim, class_channels, rng);
  return p;
}

ad::Tensor fuse(const ad::Tensor& a, const ad::Tensor& p, const RandomProjections& proj) {
  if (a.rank() != 1 || p.rank() != 1 || a.size() != proj.r1.dim(1) || p.size() != proj.r2.dim(1)) {
    throw ad::ShapeError("fuse: vectors " + ad::shape_str(a.shape()) + " and " + ad::shape_str(p.shape()) +
                         " do not fit projections " + ad::shape_str(proj.r1.shape()) + ", " +
                         ad::shape_str(proj.r2.shape()));
  }
  auto ra = ad::matmul(proj.r1, ad::reshape(a, {a.size(), 1}));
  auto rp = ad::matmul(proj.r2, ad::reshape(p, {p.size(), 1}));
  return ad::reshape(ad::mul(ra, rp), {proj.fused_dim()});
}

ad::Tensor fuse_maps(const ad::Tensor& features, const ad::Tensor& predictions, const RandomProjections& proj) {
  if (features.rank() != 4 || predictions.rank() != 4 || features.dim(0) != predictions.dim(0) ||
      features.dim(2) != predictions.dim(2) || features.dim(3) != predictions.dim(3) ||
      features.dim(1) != proj.r1.dim(1) || predictions.dim(1) != proj.r2.dim(1)) {
    throw ad::ShapeError("fuse_maps: features " + ad::shape_str(features.shape()) + " and predictions " +
                         ad::shape_str(predictions.shape()) + " do not fit projections " +
                         ad::shape_str(proj.r1.shape()) + ", " + ad::shape_str(proj.r2.shape()));
  }
  const std::size_t n = features.dim(0), h = features.dim(2), w = features.dim(3);
  const std::size_t m = n * h * w;
  auto rows = [&](const ad::Tensor& x) { return ad::reshape(ad::permute(x, {0, 2, 3, 1}), {m, x.dim(1)}); };
  auto fused = ad::mul(ad::matmul(rows(features), transpose(proj.r1)), ad::matmul(rows(predictions), transpose(proj.r2)));
  return ad::permute(ad::reshape(fused, {n, h, w, proj.fused_dim()}), {0, 3, 1, 2});
}

ad::Tensor attention_map(const ad::Tensor& fused) {
  if (fused.rank() == 3) return ad::sum(ad::square(fused), 0);
  if (fused.rank() == 4) return ad::sum(ad::square(fused), 1);
  throw ad::ShapeError("attention_map: expected C x H x W or N x C x H x W, got " + ad::shape_str(fused.shape()));
}

ad::Tensor pattern_match_loss(const ad::Tensor& f_s, const ad::Tensor& f_t) {
  if (f_s.size() != f_t.size() || f_s.size() == 0) {
    throw ad::ShapeError("pattern_match_loss: maps " + ad::shape_str(f_s.shape()) + " and " +
                         ad::shape_str(f_t.shape()) + " differ in size");
  }
  const std::size_t hw = f_s.size();
  auto s = ad::reshape(f_s, {hw});
  auto t = ad::reshape(f_t, {hw});
  auto ns = ad::l2_norm(s), nt = ad::l2_norm(t);
  if (ns.item() == 0.0 || nt.item() == 0.0) {
    // logged at the 1st, 10th, 100th, ... occurrence; it recurs every step early in training
    static std::atomic<std::uint64_t> occurrences{0};
    const auto n = ++occurrences;
    if (is_power_of_ten(n)) {
      spdlog::warn("pattern_match_loss: zero-norm attention map, contributing 0 (occurrence {})", n);
    }
    return ad::Tensor::scalar(0.0);
  }
  auto diff = ad::sub(ad::div(s, ns), ad::div(t, nt));
  return ad::scale(ad::l2_norm(diff), std::sqrt(static_cast<double>(hw)));
}

ad::Tensor batch_pattern_match_loss(const ad::Tensor& maps_s, const ad::Tensor& maps_t) {
  if (maps_s.rank() != 3 || maps_t.rank() != 3) {
    throw ad::ShapeError("batch_pattern_match_loss: expected N x H x W maps");
  }
  return pattern_match_loss(ad::mean(maps_s, 0), ad::mean(maps_t, 0));
}

std::vector<double> bilinear_matrix(std::size_t in_grid, std::size_t out_grid) {
  if (in_grid == 0 || out_grid == 0) throw std::invalid_argument("bilinear_matrix: empty grid");
  // 1-D weights, then the separable product
  std::vector<double> u(out_grid * in_grid, 0.0);
  const double ratio = static_cast<double>(in_grid) / static_cast<double>(out_grid);
  for (std::size_t o = 0; o < out_grid; ++o) {
    const double src = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in_grid - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in_grid - 1);
    const double f = src - static_cast<double>(i0);
    u[o * in_grid + i0] += 1.0 - f;
    u[o * in_grid + i1] += f;
  }
  const std::size_t in2 = in_grid * in_grid;
  std::vector<double> m(out_grid * out_grid * in2, 0.0);
  for (std::size_t oy = 0; oy < out_grid; ++oy)
    for (std::size_t ox = 0; ox < out_grid; ++ox)
      for (std::size_t iy = 0; iy < in_grid; ++iy)
        for (std::size_t ix = 0; ix < in_grid; ++ix)
          m[(oy * out_grid + ox) * in2 + iy * in_grid + ix] = u[oy * in_grid + iy] * u[ox * in_grid + ix];
  return m;
}

ad::Tensor head_probability_map(const det::HeadOutput& head, std::size_t anchors_per_cell, std::size_t out_grid) {
  const std::size_t n = head.logits.dim(0), classes = head.logits.dim(2), g = head.grid;
  if (head.logits.dim(1) != g * g * anchors_per_cell) {
    throw ad::ShapeError("head_probability_map: head has " + std::to_string(head.logits.dim(1)) + " anchors, expected " +
                         std::to_string(g * g * anchors_per_cell));
  }
  auto p = ad::softmax(head.logits);
  p = ad::mean(ad::reshape(p, {n, g * g, anchors_per_cell, classes}), 2);  // N x HW x (K+1)
  auto rows = ad::reshape(ad::permute(p, {0, 2, 1}), {n * classes, g * g});
  const auto up = ad::Tensor::from({out_grid * out_grid, g * g}, bilinear_matrix(g, out_grid));
  auto resampled = ad::matmul(rows, transpose(up));
  return ad::reshape(resampled, {n, classes, out_grid, out_grid});
}

PixelDiscriminator::PixelDiscriminator(std::size_t channels, std::uint64_t seed) {
  Rng rng(seed);
  hidden_ = nn::make_conv(params_, "hidden", channels, 64, 1, rng);
  out_ = nn::make_conv(params_, "out", 64, 1, 1, rng, 0.01);
}

ad::Tensor PixelDiscriminator::logits(const ad::Tensor& low) const {
  auto h = ad::relu(ad::conv2d(low, hidden_.weight, hidden_.bias));
  return ad::conv2d(h, out_.weight, out_.bias);
}

ad::Tensor pixel_adv_loss(const ad::Tensor& source_logits, const ad::Tensor& target_logits) {
  if (source_logits.size() == 0 || target_logits.size() == 0) throw std::invalid_argument("pixel_adv_loss: empty batch");
  const double pixels = static_cast<double>(source_logits.size() + target_logits.size());
  // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
  auto total = ad::add(ad::sum(ad::softplus(ad::neg(source_logits))), ad::sum(ad::softplus(target_logits)));
  return ad::scale(total, 1.0 / pixels);
}

ad::Tensor copm_loss(const ad::Tensor& l_la, const ad::Tensor& l_adv) { return ad::add(l_la, l_adv); }

void write_pgm(const std::filesystem::path& file, const ad::Tensor& map) {
  if (map.rank() != 2) throw ad::ShapeError("write_pgm: expected an H x W map, got " + ad::shape_str(map.shape()));
  const auto v = map.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  std::string pixels(v.size(), '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double t = range > 0 ? (v[i] - *lo) / range : 0.0;
    pixels[i] = static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0)));
  }
  std::ofstream f(file, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + file.string());
  f << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  f.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace i3net::copm
