#include "i3net/detector/loss.hpp"

#include <algorithm>
#include <numeric>

#include "i3net/autodiff/ops.hpp"

namespace i3net::det {

std::size_t AnchorTargets::positives() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](int l) { return l > 0; }));
}

AnchorTargets match_anchors(const AnchorGrid& anchors, const std::vector<data::Annotation>& gt) {
  const std::size_t count = anchors.size();
  AnchorTargets t;
  t.labels.assign(count, 0);
  t.offsets.assign(count, Offsets{0, 0, 0, 0});
  if (gt.empty()) return t;

  std::vector<Box> boxes;
  for (const auto& a : gt) boxes.push_back({a.cx, a.cy, a.w, a.h});

  std::vector<double> best_iou(count, 0.0);
  std::vector<int> best_gt(count, -1);
  std::vector<std::size_t> gt_best_anchor(boxes.size(), 0);
  std::vector<double> gt_best_iou(boxes.size(), -1.0);
  for (std::size_t m = 0; m < count; ++m) {
    for (std::size_t g = 0; g < boxes.size(); ++g) {
      const double v = iou(anchors.boxes[m], boxes[g]);
      if (v > best_iou[m]) {
        best_iou[m] = v;
        best_gt[m] = static_cast<int>(g);
      }
      if (v > gt_best_iou[g]) {
        gt_best_iou[g] = v;
        gt_best_anchor[g] = m;
      }
    }
  }
  std::vector<int> assigned(count, -1);
  for (std::size_t m = 0; m < count; ++m) {
    if (best_gt[m] >= 0 && best_iou[m] >= kMatchThreshold) assigned[m] = best_gt[m];
  }
  // forced matches; when two boxes claim the same anchor the higher IoU wins
  std::vector<double> forced_iou(count, -1.0);
  for (std::size_t g = 0; g < boxes.size(); ++g) {
    const std::size_t m = gt_best_anchor[g];
    if (gt_best_iou[g] > forced_iou[m]) {
      forced_iou[m] = gt_best_iou[g];
      assigned[m] = static_cast<int>(g);
    }
  }
  for (std::size_t m = 0; m < count; ++m) {
    if (assigned[m] < 0) continue;
    const auto g = static_cast<std::size_t>(assigned[m]);
    t.labels[m] = gt[g].class_id + 1;
    t.offsets[m] = encode(boxes[g], anchors.boxes[m]);
  }
  return t;
}

DetectionLoss detection_loss(const ad::Tensor& logits, const ad::Tensor& offsets,
                             const std::vector<AnchorTargets>& targets) {
  if (logits.rank() != 3 || offsets.rank() != 3 || offsets.dim(2) != 4 || logits.dim(0) != offsets.dim(0) ||
      logits.dim(1) != offsets.dim(1) || targets.size() != logits.dim(0)) {
    throw ad::ShapeError("detection_loss: logits " + ad::shape_str(logits.shape()) + ", offsets " +
                         ad::shape_str(offsets.shape()) + " and " + std::to_string(targets.size()) +
                         " targets do not agree");
  }
  const std::size_t n = logits.dim(0), anchors = logits.dim(1), classes = logits.dim(2);
  std::vector<std::size_t> labels(n * anchors);
  std::vector<double> reg_targets(n * anchors * 4, 0.0);
  std::vector<double> pos_mask(n * anchors, 0.0);
  std::size_t total_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i].labels.size() != anchors) throw ad::ShapeError("detection_loss: target anchor count mismatch");
    for (std::size_t m = 0; m < anchors; ++m) {
      const int l = targets[i].labels[m];
      labels[i * anchors + m] = static_cast<std::size_t>(l);
      if (l > 0) {
        pos_mask[i * anchors + m] = 1.0;
        ++total_pos;
        for (std::size_t c = 0; c < 4; ++c) reg_targets[(i * anchors + m) * 4 + c] = targets[i].offsets[m][c];
      }
    }
  }

  auto log_probs = ad::log_softmax(ad::reshape(logits, {n * anchors, classes}));
  auto ce = ad::neg(ad::pick(log_probs, labels));

  // hard negative mining on the current loss values
  std::vector<double> cls_mask = pos_mask;
  const auto ce_values = ce.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> negatives;
    std::size_t pos = 0;
    for (std::size_t m = 0; m < anchors; ++m) {
      if (labels[i * anchors + m] == 0) {
        negatives.push_back(m);
      } else {
        ++pos;
      }
    }
    const std::size_t keep = std::min(negatives.size(), kNegativeRatio * std::max<std::size_t>(pos, 1));
    std::stable_sort(negatives.begin(), negatives.end(), [&](std::size_t a, std::size_t b) {
      return ce_values[i * anchors + a] > ce_values[i * anchors + b];
    });
    for (std::size_t j = 0; j < keep; ++j) cls_mask[i * anchors + negatives[j]] = 1.0;
  }

  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(total_pos, 1));
  DetectionLoss out;
  out.classification = ad::scale(ad::sum(ad::mul(ce, ad::Tensor::from({n * anchors}, cls_mask))), norm);
  auto residual = ad::sub(ad::reshape(offsets, {n * anchors, 4}), ad::Tensor::from({n * anchors, 4}, reg_targets));
  auto reg = ad::mul(ad::smooth_l1(residual), ad::Tensor::from({n * anchors, 1}, pos_mask));
  out.regression = ad::scale(ad::sum(reg), norm);
  out.total = ad::add(out.classification, out.regression);
  return out;
}

}  // namespace i3net::det
