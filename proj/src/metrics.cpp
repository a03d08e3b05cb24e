#include "dssl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dssl {

double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<bool> assign_tp_fp(std::span<const ScoredBox> detections, std::span<const Box> ground_truths,
                               double iou_threshold) {
  for (std::size_t i = 1; i < detections.size(); ++i)
    if (detections[i].score > detections[i - 1].score)
      throw std::invalid_argument("assign_tp_fp: detections must be sorted by descending score");
  std::vector<bool> taken(ground_truths.size(), false);
  std::vector<bool> flags(detections.size(), false);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    double best = -1.0;
    std::size_t best_g = ground_truths.size();
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(detections[d].box, ground_truths[g]);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < ground_truths.size()) {
      taken[best_g] = true;
      flags[d] = true;
    }
  }
  return flags;
}

std::vector<PrPoint> pr_curve(const std::vector<bool>& flags, std::size_t num_gt) {
  if (num_gt == 0) throw std::invalid_argument("pr_curve: no ground truth");
  std::vector<PrPoint> curve(flags.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < flags.size(); ++k) {
    tp += flags[k] ? 1 : 0;
    curve[k].recall = static_cast<double>(tp) / static_cast<double>(num_gt);
    curve[k].precision = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  double running = 0.0;
  for (std::size_t k = flags.size(); k-- > 0;) {
    running = std::max(running, curve[k].precision);
    curve[k].interpolated = running;
  }
  return curve;
}

double average_precision(const std::vector<bool>& flags, std::size_t num_gt) {
  const auto curve = pr_curve(flags, num_gt);
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& p : curve) {
    ap += (p.recall - prev_recall) * p.interpolated;
    prev_recall = p.recall;
  }
  return ap;
}

double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct ClassImage {
  std::vector<ScoredBox> dets;    // sorted, capped
  std::vector<std::size_t> order;  // global index of each det for tie-breaking
  std::vector<Box> gts;
};

// Flags for all of one class's detections, merged across images in
// descending score with (image, rank) as the stable tie-break.
std::vector<bool> merged_flags(const std::vector<ClassImage>& images, double thr,
                               const std::vector<std::pair<std::size_t, std::size_t>>& global_order) {
  std::vector<std::vector<bool>> per_image(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) per_image[i] = assign_tp_fp(images[i].dets, images[i].gts, thr);
  std::vector<bool> out;
  out.reserve(global_order.size());
  for (const auto& [img, rank] : global_order) out.push_back(per_image[img][rank]);
  return out;
}

}  // namespace

EvalReport evaluate(std::span<const Detection> detections, std::span<const std::vector<Annotation>> annotations,
                    std::size_t num_classes, const EvalConfig& cfg) {
  const std::size_t n_images = annotations.size();
  for (const auto& d : detections) {
    if (d.image >= n_images) throw std::invalid_argument("evaluate: detection refers to an unknown image");
    if (d.cls >= num_classes) throw std::invalid_argument("evaluate: detection class out of range");
    if (!std::isfinite(d.score)) throw std::invalid_argument("evaluate: non-finite score");
  }
  for (const auto& anns : annotations)
    for (const auto& a : anns)
      if (a.cls >= num_classes) throw std::invalid_argument("evaluate: annotation class out of range");

  // Per-image cap on the highest-scoring detections (all classes together).
  std::vector<std::vector<std::size_t>> by_image(n_images);
  for (std::size_t i = 0; i < detections.size(); ++i) by_image[detections[i].image].push_back(i);
  for (auto& idx : by_image) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
    if (idx.size() > cfg.max_detections) idx.resize(cfg.max_detections);
  }

  const auto thresholds = coco_iou_thresholds();
  EvalReport report;
  report.per_class_ap.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> ap_sum(thresholds.size(), 0.0), recall_sum(thresholds.size(), 0.0);
  std::vector<std::size_t> tp_at(cfg.report_ious.size(), 0), fp_at(cfg.report_ious.size(), 0);
  std::size_t total_gt = 0;

  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<ClassImage> images(n_images);
    std::size_t num_gt = 0;
    std::vector<std::pair<std::size_t, std::size_t>> global;  // (image, rank)
    std::vector<double> global_scores;
    for (std::size_t i = 0; i < n_images; ++i) {
      for (const auto& a : annotations[i])
        if (a.cls == c) images[i].gts.push_back(a.box);
      num_gt += images[i].gts.size();
      for (std::size_t idx : by_image[i])
        if (detections[idx].cls == c) {
          global.emplace_back(i, images[i].dets.size());
          global_scores.push_back(detections[idx].score);
          images[i].dets.push_back({detections[idx].box, detections[idx].score});
        }
    }
    total_gt += num_gt;

    std::vector<std::size_t> perm(global.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(),
                     [&](std::size_t a, std::size_t b) { return global_scores[a] > global_scores[b]; });
    std::vector<std::pair<std::size_t, std::size_t>> ordered;
    for (auto p : perm) ordered.push_back(global[p]);

    for (std::size_t r = 0; r < cfg.report_ious.size(); ++r) {
      for (std::size_t i = 0; i < n_images; ++i) {
        std::vector<ScoredBox> kept;
        for (const auto& d : images[i].dets)
          if (d.score >= cfg.score_threshold) kept.push_back(d);
        const auto flags = assign_tp_fp(kept, images[i].gts, cfg.report_ious[r]);
        const auto tp = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
        tp_at[r] += tp;
        fp_at[r] += flags.size() - tp;
      }
    }

    if (num_gt == 0) continue;
    ++report.evaluated_classes;
    double class_sum = 0.0;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const auto flags = merged_flags(images, thresholds[t], ordered);
      const double ap = average_precision(flags, num_gt);
      ap_sum[t] += ap;
      class_sum += ap;
      const auto tp = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
      recall_sum[t] += static_cast<double>(tp) / static_cast<double>(num_gt);
    }
    report.per_class_ap[c] = class_sum / static_cast<double>(thresholds.size());
  }

  if (report.evaluated_classes > 0) {
    const double nc = static_cast<double>(report.evaluated_classes);
    double map = 0.0, ar = 0.0;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      map += ap_sum[t] / nc;
      ar += recall_sum[t] / nc;
    }
    report.map = map / static_cast<double>(thresholds.size());
    report.ar100 = ar / static_cast<double>(thresholds.size());
    report.ap50 = ap_sum[0] / nc;
    report.ap75 = ap_sum[5] / nc;
  }
  for (std::size_t r = 0; r < cfg.report_ious.size(); ++r) {
    ThresholdStats s;
    s.iou = cfg.report_ious[r];
    const std::size_t found = tp_at[r] + fp_at[r];
    s.precision = found ? static_cast<double>(tp_at[r]) / static_cast<double>(found) : 0.0;
    s.recall = total_gt ? static_cast<double>(tp_at[r]) / static_cast<double>(total_gt) : 0.0;
    s.f1 = f1_score(s.precision, s.recall);
    report.thresholds.push_back(s);
  }
  return report;
}

}  // namespace dssl
