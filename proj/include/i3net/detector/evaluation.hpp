#pragma once

#include <vector>

#include "i3net/data/scene.hpp"
#include "i3net/detector/model.hpp"

namespace i3net::det {

struct Detection {
  int class_id = 0;  // foreground class in [0, K)
  double score = 0;
  Box box;
};

struct DecodeOptions {
  double conf_thresh = 0.05;
  double nms_iou = 0.45;
  std::size_t max_detections = 100;
};

// Per-class greedy NMS by descending confidence over every (anchor, class)
// candidate scoring above conf_thresh.
std::vector<Detection> decode_and_nms(const HeadPrediction& prediction, const AnchorGrid& anchors,
                                      const DecodeOptions& options = {});

// Greedy same-class suppression on an already decoded candidate list.
std::vector<Detection> nms(std::vector<Detection> candidates, double nms_iou);

struct MapReport {
  std::vector<double> average_precision;  // per class; 0 when a class has no ground truth
  std::vector<std::size_t> ground_truth;  // instances per class
  double mean_ap = 0;                     // over classes with ground truth
};

// VOC-style AP with all-point interpolation. Detections are matched greedily in
// descending confidence to the highest-IoU ground truth of the same image and
// class; a match needs IoU >= iou_thresh and an unclaimed ground truth.
MapReport evaluate_map(const std::vector<std::vector<Detection>>& detections,
                       const std::vector<std::vector<data::Annotation>>& ground_truth, std::size_t class_count,
                       double iou_thresh = 0.5);

}  // namespace i3net::det
