#include "i3net/detector/model.hpp"

#include <cmath>
#include <stdexcept>

#include "i3net/autodiff/ops.hpp"

namespace i3net::det {

AnchorGrid make_anchor_grid(const std::vector<std::size_t>& grids, std::size_t anchors_per_cell, double scale_cells) {
  if (anchors_per_cell == 0) throw std::invalid_argument("anchors_per_cell must be positive");
  AnchorGrid grid;
  grid.grids = grids;
  grid.anchors_per_cell = anchors_per_cell;
  for (std::size_t g : grids) {
    grid.offsets.push_back(grid.boxes.size());
    const double cell = 1.0 / static_cast<double>(g);
    for (std::size_t y = 0; y < g; ++y) {
      for (std::size_t x = 0; x < g; ++x) {
        for (std::size_t i = 0; i < anchors_per_cell; ++i) {
          // extra anchors per cell step the scale geometrically by 2^(1/a)
          const double side =
              std::min(1.0, scale_cells * cell * std::pow(2.0, static_cast<double>(i) / static_cast<double>(anchors_per_cell)));
          grid.boxes.push_back({(static_cast<double>(x) + 0.5) * cell, (static_cast<double>(y) + 0.5) * cell, side, side});
        }
      }
    }
  }
  return grid;
}

namespace {
constexpr std::array<std::size_t, 6> kWidths{16, 32, 64, 64, 64, 64};
constexpr std::array<std::size_t, 6> kStrides{2, 2, 1, 2, 1, 2};
}  // namespace

DetectionModel::DetectionModel(DetectorConfig config) : config_(config) {
  if (config_.image_size % 16 != 0) throw std::invalid_argument("image_size must be a multiple of 16");
  if (config_.class_count < 1) throw std::invalid_argument("class_count must be positive");
  const std::size_t s = config_.image_size;
  anchors_ = make_anchor_grid({s / 8, s / 16}, config_.anchors_per_cell, config_.anchor_scale_cells);

  Rng rng(config_.seed);
  std::size_t in = 3;
  for (std::size_t b = 0; b < kWidths.size(); ++b) {
    blocks_.push_back(nn::make_conv(params_, "backbone.block" + std::to_string(b + 1), in, kWidths[b], 3, rng));
    in = kWidths[b];
  }
  const std::size_t a = config_.anchors_per_cell;
  const double head_std = config_.zero_init_heads ? 0.0 : 0.01;
  for (std::size_t l = 0; l < kLayerNames.size(); ++l) {
    const std::string prefix = std::string("head.") + kLayerNames[l];
    cls_heads_.push_back(nn::make_conv(params_, prefix + ".cls", 64, a * (config_.class_count + 1), 3, rng, head_std));
    box_heads_.push_back(nn::make_conv(params_, prefix + ".box", 64, a * 4, 3, rng, head_std));
  }
}

void DetectionModel::check_input(const ad::Tensor& images) const {
  const std::size_t s = config_.image_size;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
    throw ad::ShapeError("DetectionModel: expected N x 3 x " + std::to_string(s) + " x " + std::to_string(s) +
                         " images, got " + ad::shape_str(images.shape()));
  }
}

ad::Tensor DetectionModel::block(std::size_t b, const ad::Tensor& x) const {
  return ad::relu(ad::conv2d(x, blocks_[b].weight, blocks_[b].bias, {.stride = kStrides[b], .padding = 1}));
}

ad::Tensor DetectionModel::forward_g1(const ad::Tensor& images) const {
  check_input(images);
  ad::Tensor x = images;
  for (std::size_t b = 0; b < 3; ++b) x = block(b, x);
  return x;
}

ForwardResult DetectionModel::forward(const ad::Tensor& images) const {
  check_input(images);
  std::vector<ad::Tensor> out;
  ad::Tensor x = images;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    x = block(b, x);
    out.push_back(x);
  }
  ForwardResult r;
  r.low = out[1];
  r.g1 = out[2];
  r.g2 = out[4];
  r.layers = {out[4], out[5]};
  const std::size_t n = images.dim(0);
  const std::size_t classes = config_.class_count + 1;
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& feat = r.layers[l];
    const std::size_t g = feat.dim(2);
    const std::size_t count = g * g * config_.anchors_per_cell;
    HeadOutput head;
    head.grid = g;
    auto cls = ad::conv2d(feat, cls_heads_[l].weight, cls_heads_[l].bias, {.stride = 1, .padding = 1});
    head.logits = ad::reshape(ad::permute(cls, {0, 2, 3, 1}), {n, count, classes});
    auto box = ad::conv2d(feat, box_heads_[l].weight, box_heads_[l].bias, {.stride = 1, .padding = 1});
    head.offsets = ad::reshape(ad::permute(box, {0, 2, 3, 1}), {n, count, 4});
    r.heads.push_back(std::move(head));
  }
  return r;
}

ad::Tensor DetectionModel::head_logits(std::size_t layer, const ad::Tensor& feature) const {
  if (layer >= cls_heads_.size()) throw std::out_of_range("head_logits: no layer " + std::to_string(layer));
  if (feature.size() != layer_channels()) {
    throw ad::ShapeError("head_logits: expected a " + std::to_string(layer_channels()) + "-vector, got " +
                         ad::shape_str(feature.shape()));
  }
  auto x = ad::reshape(feature, {1, layer_channels(), 1, 1});
  auto logits = ad::conv2d(x, cls_heads_[layer].weight, cls_heads_[layer].bias, {.stride = 1, .padding = 1});
  // with several anchors per cell the first anchor's slice is used
  return ad::slice(ad::reshape(logits, {logits.size()}), 0, 0, config_.class_count + 1);
}

ad::Tensor ForwardResult::all_logits() const {
  std::vector<ad::Tensor> parts;
  for (const auto& h : heads) parts.push_back(h.logits);
  return ad::concat(parts, 1);
}

ad::Tensor ForwardResult::all_offsets() const {
  std::vector<ad::Tensor> parts;
  for (const auto& h : heads) parts.push_back(h.offsets);
  return ad::concat(parts, 1);
}

HeadPrediction head_prediction(const ForwardResult& forward, std::size_t image) {
  ad::NoGradGuard guard;
  HeadPrediction p;
  const auto logits = forward.all_logits();
  const auto offsets = forward.all_offsets();
  const std::size_t anchors = logits.dim(1);
  p.classes = logits.dim(2);
  auto one = ad::softmax(ad::slice(logits, 0, image, image + 1));
  p.probabilities.assign(one.data().begin(), one.data().end());
  const auto off = offsets.data();
  for (std::size_t m = 0; m < anchors; ++m) {
    const double* o = off.data() + (image * anchors + m) * 4;
    p.offsets.push_back({o[0], o[1], o[2], o[3]});
  }
  return p;
}

}  // namespace i3net::det
