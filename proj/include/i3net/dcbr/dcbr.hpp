#pragma once

#include <span>
#include <vector>

#include "i3net/autodiff/tensor.hpp"
#include "i3net/data/dataset.hpp"
#include "i3net/detector/model.hpp"
#include "i3net/nn/parameters.hpp"

namespace i3net::dcbr {

inline constexpr double kProbabilityClamp = 1e-7;

// Image-level multi-label classifier: GAP of a g1 tap, one affine layer, K
// sigmoids. It owns its own copy of the first three backbone blocks so that a
// frozen classifier keeps seeing the features it was trained on.
class MultiLabelClassifier {
 public:
  MultiLabelClassifier(const det::DetectorConfig& config, std::uint64_t seed);

  // images: N x 3 x S x S -> N x K probabilities.
  ad::Tensor predict(const ad::Tensor& images) const;
  // Same as predict, starting from an already computed g1 tap.
  ad::Tensor predict_from_g1(const ad::Tensor& g1) const;

  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

  // Extractor blocks first ("extractor.*"), then "fc.*".
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  std::size_t class_count() const { return class_count_; }

 private:
  det::DetectionModel extractor_;
  nn::ParameterSet params_;
  nn::LinearParams fc_;
  std::size_t class_count_;
  bool frozen_ = false;
};

// y_k = 1 iff the image has at least one class-k object.
std::vector<double> presence_labels(const std::vector<data::Annotation>& annotations, std::size_t class_count);

// Binary cross-entropy summed over classes, averaged over rows. y and y_hat
// share a shape (K or N x K); y_hat is clamped to [1e-7, 1 - 1e-7].
ad::Tensor mlc_loss(const ad::Tensor& y, const ad::Tensor& y_hat);

// Mean of the scores above tau plus one; 1 when no score exceeds tau.
double compute_w1(std::span<const double> y_hat, double tau);

struct TargetSplit {
  std::vector<std::size_t> assignment;  // class per target sample
  std::vector<std::size_t> counts;      // N_t^k
  std::size_t total = 0;                // N_t
};

// Argmax class per row, ties to the lowest index.
TargetSplit make_target_split(const std::vector<std::vector<double>>& predictions, std::size_t class_count);

// Full pass of the classifier over a target set (no gradients).
std::vector<std::vector<double>> predict_all(const MultiLabelClassifier& mlc, const data::Dataset& set,
                                             std::size_t batch_size = 32);
TargetSplit refresh_target_split(const MultiLabelClassifier& mlc, const data::Dataset& target_set,
                                 std::size_t batch_size = 32);

// exp(1 - N_t^k / N_t).
double compute_w2(const TargetSplit& split, std::size_t sample_class);

double combine_weights(double w1, double w2, double theta);

// GAP(g2) -> 64 -> ReLU -> 1. Returns N domain logits; sigmoid gives
// P(source). Gradient reversal is applied by the caller.
class ImageDiscriminator {
 public:
  ImageDiscriminator(std::size_t channels, std::uint64_t seed);
  ad::Tensor logits(const ad::Tensor& g2) const;

  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

 private:
  nn::ParameterSet params_;
  nn::LinearParams hidden_;
  nn::LinearParams out_;
};

// -mean_s log D(x^s) - mean_t w^t log(1 - D(x^t)) on domain logits, with the
// weights held constant.
ad::Tensor dcbr_adv_loss(const ad::Tensor& source_logits, const ad::Tensor& target_logits,
                         std::span<const double> target_weights);
// The same loss without weights.
ad::Tensor adversarial_loss(const ad::Tensor& source_logits, const ad::Tensor& target_logits);

}  // namespace i3net::dcbr
