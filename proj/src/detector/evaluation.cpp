#include "i3net/detector/evaluation.hpp"

#include <algorithm>
#include <stdexcept>

namespace i3net::det {

std::vector<Detection> nms(std::vector<Detection> candidates, double nms_iou) {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& c : candidates) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == c.class_id && iou(k.box, c.box) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

std::vector<Detection> decode_and_nms(const HeadPrediction& prediction, const AnchorGrid& anchors,
                                      const DecodeOptions& options) {
  if (!(options.conf_thresh > 0 && options.conf_thresh < 1 && options.nms_iou > 0 && options.nms_iou < 1)) {
    throw std::invalid_argument("decode_and_nms: thresholds must lie in (0, 1)");
  }
  if (prediction.offsets.size() != anchors.size()) {
    throw std::invalid_argument("decode_and_nms: prediction has " + std::to_string(prediction.offsets.size()) +
                                " anchors, grid has " + std::to_string(anchors.size()));
  }
  std::vector<Detection> candidates;
  const std::size_t classes = prediction.classes;
  for (std::size_t m = 0; m < anchors.size(); ++m) {
    const Box box = decode(prediction.offsets[m], anchors.boxes[m]);
    if (!(box.w > 0 && box.h > 0)) continue;
    for (std::size_t c = 1; c < classes; ++c) {
      const double p = prediction.probabilities[m * classes + c];
      if (p > options.conf_thresh) candidates.push_back({static_cast<int>(c - 1), p, box});
    }
  }
  auto kept = nms(std::move(candidates), options.nms_iou);
  if (kept.size() > options.max_detections) kept.resize(options.max_detections);
  return kept;
}

MapReport evaluate_map(const std::vector<std::vector<Detection>>& detections,
                       const std::vector<std::vector<data::Annotation>>& ground_truth, std::size_t class_count,
                       double iou_thresh) {
  if (detections.size() != ground_truth.size()) {
    throw std::invalid_argument("evaluate_map: detection and ground-truth image counts differ");
  }
  MapReport report;
  report.average_precision.assign(class_count, 0.0);
  report.ground_truth.assign(class_count, 0);
  std::size_t classes_present = 0;
  double ap_sum = 0;

  for (std::size_t k = 0; k < class_count; ++k) {
    struct Ranked {
      double score;
      std::size_t image;
      std::size_t index;
    };
    std::vector<Ranked> ranked;
    std::vector<std::vector<bool>> claimed(ground_truth.size());
    std::size_t positives = 0;
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      claimed[i].assign(ground_truth[i].size(), false);
      for (const auto& g : ground_truth[i]) positives += g.class_id == static_cast<int>(k);
      for (std::size_t d = 0; d < detections[i].size(); ++d) {
        if (detections[i][d].class_id == static_cast<int>(k)) ranked.push_back({detections[i][d].score, i, d});
      }
    }
    report.ground_truth[k] = positives;
    if (positives == 0) continue;
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const auto& r : ranked) {
      const auto& det = detections[r.image][r.index];
      double best = -1;
      std::size_t best_g = 0;
      const auto& gts = ground_truth[r.image];
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != static_cast<int>(k)) continue;
        const double v = iou(det.box, Box{gts[g].cx, gts[g].cy, gts[g].w, gts[g].h});
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
      if (best >= iou_thresh && !claimed[r.image][best_g]) {
        claimed[r.image][best_g] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
    }
    // precision envelope, then area under the step curve
    for (std::size_t j = precision.size(); j-- > 1;) precision[j - 1] = std::max(precision[j - 1], precision[j]);
    double ap = 0, prev_recall = 0;
    for (std::size_t j = 0; j < precision.size(); ++j) {
      ap += (recall[j] - prev_recall) * precision[j];
      prev_recall = recall[j];
    }
    report.average_precision[k] = ap;
    ap_sum += ap;
    ++classes_present;
  }
  report.mean_ap = classes_present ? ap_sum / static_cast<double>(classes_present) : 0.0;
  return report;
}

}  // namespace i3net::det
