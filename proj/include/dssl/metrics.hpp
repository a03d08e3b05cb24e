#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dssl/boxes.hpp"

namespace dssl {

/// Intersection over union of corner boxes; symmetric, in [0, 1].
double iou(const Box& a, const Box& b);

struct ScoredBox {
  Box box;
  double score = 0.0;
};

/// Greedy TP/FP assignment for one image and class. `detections` must be
/// sorted by descending score. Each detection takes the highest-IoU unmatched
/// ground truth with IoU >= threshold (earliest index on ties).
std::vector<bool> assign_tp_fp(std::span<const ScoredBox> detections, std::span<const Box> ground_truths,
                               double iou_threshold);

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
  double interpolated = 0.0;  // max precision at this or any later point
};

/// Curve over detections already sorted by descending score.
std::vector<PrPoint> pr_curve(const std::vector<bool>& flags, std::size_t num_gt);

/// All-point interpolated AP: sum_k (R_{k+1} - R_k) * P_interp(R_{k+1}).
double average_precision(const std::vector<bool>& flags, std::size_t num_gt);

double f1_score(double precision, double recall);

struct Detection {
  std::size_t image = 0;  // index into the annotation list
  std::size_t cls = 0;
  Box box;
  double score = 0.0;
};

struct Annotation {
  std::size_t cls = 0;
  Box box;
};

struct ThresholdStats {
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct EvalConfig {
  std::size_t max_detections = 100;  // per image
  double score_threshold = 0.5;      // only for the P/R/F1 rows
  std::vector<double> report_ious{0.5, 0.6, 0.7, 0.8, 0.9};
};

struct EvalReport {
  double map = 0.0;  // mean over classes and IoU 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar100 = 0.0;
  std::vector<ThresholdStats> thresholds;
  std::vector<double> per_class_ap;  // mAP per class; NaN when the class has no ground truth
  std::size_t evaluated_classes = 0;
};

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

/// Dataset-level evaluation. `annotations[i]` holds image i's ground truth;
/// classes without ground truth are skipped in every mean.
EvalReport evaluate(std::span<const Detection> detections, std::span<const std::vector<Annotation>> annotations,
                    std::size_t num_classes, const EvalConfig& cfg = {});

}  // namespace dssl
