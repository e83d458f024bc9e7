#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "i3net/autodiff/tensor.hpp"
#include "i3net/detector/boxes.hpp"
#include "i3net/nn/parameters.hpp"

namespace i3net::det {

struct DetectorConfig {
  std::size_t class_count = 3;  // foreground classes K; heads predict K + 1
  std::size_t image_size = 64;
  std::size_t anchors_per_cell = 1;
  double anchor_scale_cells = 2.0;  // anchor side in cell widths
  std::uint64_t seed = 0;
  bool zero_init_heads = false;
};

// Anchors of every layer in L, concatenated in layer order. Within a layer the
// index is (y * W + x) * anchors_per_cell + i.
struct AnchorGrid {
  std::vector<Box> boxes;
  std::vector<std::size_t> grids;    // H (= W) per layer
  std::vector<std::size_t> offsets;  // first anchor index per layer
  std::size_t anchors_per_cell = 1;

  std::size_t size() const { return boxes.size(); }
  std::size_t layer_count(std::size_t layer) const { return grids[layer] * grids[layer] * anchors_per_cell; }
};

AnchorGrid make_anchor_grid(const std::vector<std::size_t>& grids, std::size_t anchors_per_cell, double scale_cells);

struct HeadOutput {
  ad::Tensor logits;   // N x A_l x (K+1), index 0 = background
  ad::Tensor offsets;  // N x A_l x 4
  std::size_t grid = 0;
};

struct ForwardResult {
  ad::Tensor low;  // N x 32 x 16 x 16, input to pattern matching
  ad::Tensor g1;   // N x 64 x 16 x 16, multi-label classifier input
  ad::Tensor g2;   // N x 64 x 8 x 8, image discriminator input
  std::vector<ad::Tensor> layers;  // L = {lA: N x 64 x 8 x 8, lB: N x 64 x 4 x 4}
  std::vector<HeadOutput> heads;   // one per entry of `layers`

  ad::Tensor all_logits() const;   // N x A x (K+1)
  ad::Tensor all_offsets() const;  // N x A x 4
};

inline constexpr std::size_t kLayerA = 0;
inline constexpr std::size_t kLayerB = 1;
inline constexpr std::array<const char*, 2> kLayerNames{"lA", "lB"};

// Six 3x3 conv + ReLU blocks (16, 32, 64, 64, 64, 64 channels; stride 2 at
// blocks 1, 2, 4, 6) with SSD-style 3x3 class/box heads on blocks 5 and 6.
class DetectionModel {
 public:
  explicit DetectionModel(DetectorConfig config);

  // images: N x 3 x S x S.
  ForwardResult forward(const ad::Tensor& images) const;
  // Blocks 1-3 only; the g1 tap without running the rest of the network.
  ad::Tensor forward_g1(const ad::Tensor& images) const;

  // Classification head of `layer` applied to one feature vector treated as a
  // 1 x 1 map. Returns K + 1 logits.
  ad::Tensor head_logits(std::size_t layer, const ad::Tensor& feature) const;

  const DetectorConfig& config() const { return config_; }
  const AnchorGrid& anchors() const { return anchors_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  std::size_t low_channels() const { return 32; }
  std::size_t layer_channels() const { return 64; }
  std::size_t low_grid() const { return config_.image_size / 4; }

 private:
  void check_input(const ad::Tensor& images) const;
  ad::Tensor block(std::size_t b, const ad::Tensor& x) const;

  DetectorConfig config_;
  AnchorGrid anchors_;
  nn::ParameterSet params_;
  std::vector<nn::Conv2dParams> blocks_;
  std::vector<nn::Conv2dParams> cls_heads_;
  std::vector<nn::Conv2dParams> box_heads_;
};

// Row-wise softmax of the head logits with the box offsets as plain arrays.
struct HeadPrediction {
  std::vector<double> probabilities;  // A x (K+1)
  std::vector<Offsets> offsets;       // A
  std::size_t classes = 0;            // K + 1
};
HeadPrediction head_prediction(const ForwardResult& forward, std::size_t image);

}  // namespace i3net::det
