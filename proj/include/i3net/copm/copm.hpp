#pragma once

#include <cstdint>
#include <filesystem>

#include "i3net/autodiff/tensor.hpp"
#include "i3net/detector/model.hpp"
#include "i3net/nn/parameters.hpp"

namespace i3net::copm {

// Fixed random matrices R1 (fused x C) and R2 (fused x (K+1)) with entries
// uniform on [-sqrt(3), sqrt(3)], rounded to float32 so that they survive a
// checkpoint round trip unchanged.
struct RandomProjections {
  ad::Tensor r1;
  ad::Tensor r2;

  std::size_t fused_dim() const { return r1.dim(0); }
};

RandomProjections make_random_projections(std::size_t fused_dim, std::size_t feature_channels,
                                          std::size_t class_channels, std::uint64_t seed);

// (R1 a) * (R2 p) for single vectors a (C) and p (K+1).
ad::Tensor fuse(const ad::Tensor& a, const ad::Tensor& p, const RandomProjections& proj);

// Per-position fusion of feature maps: features N x C x H x W, predictions
// N x (K+1) x H x W -> N x fused x H x W.
ad::Tensor fuse_maps(const ad::Tensor& features, const ad::Tensor& predictions, const RandomProjections& proj);

// Sum of squares over the leading (channel) axis of a C x H x W or the
// second axis of an N x C x H x W tensor.
ad::Tensor attention_map(const ad::Tensor& fused);

// sqrt(H W) * || f_s / |f_s| - f_t / |f_t| ||. Either map flattened; a
// zero-norm map yields 0 and a warning.
ad::Tensor pattern_match_loss(const ad::Tensor& f_s, const ad::Tensor& f_t);

// Averages N x H x W attention maps over the batch per domain, then compares.
ad::Tensor batch_pattern_match_loss(const ad::Tensor& maps_s, const ad::Tensor& maps_t);

// Softmaxed class map of a detection head, averaged over anchors per cell and
// bilinearly resampled (half-pixel centers) to out_grid x out_grid.
// Returns N x (K+1) x out_grid x out_grid.
ad::Tensor head_probability_map(const det::HeadOutput& head, std::size_t anchors_per_cell, std::size_t out_grid);

// Row-stochastic (out*out) x (in*in) bilinear resampling matrix.
std::vector<double> bilinear_matrix(std::size_t in_grid, std::size_t out_grid);

// Two 1x1 convolutions C -> 64 -> 1 with ReLU between. Returns per-pixel
// domain logits N x 1 x H x W; sigmoid gives P(source).
class PixelDiscriminator {
 public:
  PixelDiscriminator(std::size_t channels, std::uint64_t seed);
  ad::Tensor logits(const ad::Tensor& low) const;

  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

 private:
  nn::ParameterSet params_;
  nn::Conv2dParams hidden_;
  nn::Conv2dParams out_;
};

// Binary cross-entropy over every pixel of both domains, source label 1.
ad::Tensor pixel_adv_loss(const ad::Tensor& source_logits, const ad::Tensor& target_logits);

ad::Tensor copm_loss(const ad::Tensor& l_la, const ad::Tensor& l_adv);

// Binary P5 PGM, 8-bit, min-max normalized. A constant map is written as 0.
void write_pgm(const std::filesystem::path& file, const ad::Tensor& map);

}  // namespace i3net::copm
