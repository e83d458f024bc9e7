#pragma once

#include <vector>

#include "i3net/autodiff/tensor.hpp"
#include "i3net/data/scene.hpp"
#include "i3net/detector/model.hpp"

namespace i3net::det {

// Per-anchor training target. label 0 is background, k + 1 is class k.
struct AnchorTargets {
  std::vector<int> labels;
  std::vector<Offsets> offsets;  // meaningful for positive anchors only

  std::size_t positives() const;
};

inline constexpr double kMatchThreshold = 0.5;

// Anchor -> best-IoU ground truth when IoU >= 0.5, plus every ground truth
// claiming its single best anchor. Ties go to the lowest index.
AnchorTargets match_anchors(const AnchorGrid& anchors, const std::vector<data::Annotation>& gt);

struct DetectionLoss {
  ad::Tensor total;
  ad::Tensor classification;
  ad::Tensor regression;
};

inline constexpr std::size_t kNegativeRatio = 3;

// Softmax cross-entropy over positives plus the 3x-as-many highest-loss
// negatives of each image, plus smooth-L1 on positive offsets; both divided by
// the number of positives in the batch (at least 1). Images without positives
// still contribute their 3 hardest negatives.
DetectionLoss detection_loss(const ad::Tensor& logits, const ad::Tensor& offsets,
                             const std::vector<AnchorTargets>& targets);

}  // namespace i3net::det
