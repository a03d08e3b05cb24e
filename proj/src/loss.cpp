#include "dssl/loss.hpp"

#include <cmath>
#include <stdexcept>

#include "dssl/ops.hpp"

namespace dssl {

namespace {

struct Corners {
  Tensor x1, y1, x2, y2;
};

Corners corners(const Tensor& b) {
  const Tensor cx = ops::slice_cols(b, 0, 1), cy = ops::slice_cols(b, 1, 2);
  const Tensor hw = ops::scale(ops::slice_cols(b, 2, 3), 0.5), hh = ops::scale(ops::slice_cols(b, 3, 4), 0.5);
  return {ops::sub(cx, hw), ops::sub(cy, hh), ops::add(cx, hw), ops::add(cy, hh)};
}

Tensor area(const Corners& c) { return ops::mul(ops::sub(c.x2, c.x1), ops::sub(c.y2, c.y1)); }

// Per-row GIoU of [K, 4] predicted boxes (positive size) against targets.
Tensor giou_rows(const Tensor& pred, const Tensor& target) {
  const Corners a = corners(pred), b = corners(target);
  const Tensor iw = ops::clamp_min(ops::sub(ops::minimum(a.x2, b.x2), ops::maximum(a.x1, b.x1)), 0.0);
  const Tensor ih = ops::clamp_min(ops::sub(ops::minimum(a.y2, b.y2), ops::maximum(a.y1, b.y1)), 0.0);
  const Tensor inter = ops::mul(iw, ih);
  const Tensor uni = ops::sub(ops::add(area(a), area(b)), inter);
  const Tensor hull = ops::mul(ops::sub(ops::maximum(a.x2, b.x2), ops::minimum(a.x1, b.x1)),
                               ops::sub(ops::maximum(a.y2, b.y2), ops::minimum(a.y1, b.y1)));
  return ops::sub(ops::div(inter, uni), ops::div(ops::sub(hull, uni), hull));
}

void check_pred(const DetectionOutput& pred) {
  if (pred.logits.rank() != 2 || pred.boxes.shape() != Shape{pred.logits.dim(0), 4} || pred.logits.dim(1) < 2) {
    throw ShapeError("loss: logits " + shape_str(pred.logits.shape()) + " / boxes " + shape_str(pred.boxes.shape()));
  }
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {alpha_reg, alpha_cls, noobj_weight, box.l1, box.giou})
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and >= 0");
}

Tensor LossTerms::weighted(const LossWeights& w) const {
  return ops::add(ops::scale(reg, w.alpha_reg), ops::scale(cls, w.alpha_cls));
}

CostMatrix build_cost_matrix(const DetectionOutput& pred, const TargetSet& targets, const MatchWeights& w) {
  check_pred(pred);
  const std::size_t n = pred.size(), c1 = pred.logits.dim(1);
  targets.validate(c1 - 1, n);
  Tensor probs;
  {
    NoGradScope guard;
    probs = ops::softmax(pred.logits.detach());
  }
  CostMatrix cost(targets.size(), n);
  const auto pd = probs.data();
  const auto bd = pred.boxes.data();
  for (std::size_t k = 0; k < targets.size(); ++k)
    for (std::size_t j = 0; j < n; ++j) {
      const BoxCxcywh box{bd[j * 4], bd[j * 4 + 1], bd[j * 4 + 2], bd[j * 4 + 3]};
      cost.at(k, j) = match_cost(pd.subspan(j * c1, c1), box, targets.items[k], w);
    }
  return cost;
}

LossTerms hungarian_loss(const DetectionOutput& pred, const TargetSet& targets, const MatchResult& match,
                         const LossWeights& w) {
  check_pred(pred);
  w.validate();
  const std::size_t n = pred.size(), c1 = pred.logits.dim(1), k = targets.size();
  targets.validate(c1 - 1, n);
  if (match.assignment.size() != k) throw std::invalid_argument("hungarian_loss: assignment does not cover targets");
  std::vector<std::size_t> classes(n, c1 - 1);
  std::vector<double> weights(n, w.noobj_weight);
  std::vector<bool> used(n, false);
  for (std::size_t t = 0; t < k; ++t) {
    const std::size_t j = match.assignment[t];
    if (j >= n || used[j]) throw std::invalid_argument("hungarian_loss: assignment is not injective");
    used[j] = true;
    classes[j] = targets.items[t].cls;
    weights[j] = 1.0;
  }
  LossTerms out;
  out.cls = ops::cross_entropy(pred.logits, classes, weights);
  if (k == 0) {
    out.reg = Tensor::scalar(0.0);
    return out;
  }
  std::vector<double> tv;
  tv.reserve(k * 4);
  for (const auto& t : targets.items) tv.insert(tv.end(), {t.box.cx, t.box.cy, t.box.w, t.box.h});
  const Tensor target = Tensor::from({k, 4}, std::move(tv));
  const Tensor matched = ops::gather_rows(pred.boxes, match.assignment);
  const Tensor l1 = ops::sum(ops::abs(ops::sub(matched, target)));
  const Tensor giou_term = ops::add_scalar(ops::scale(ops::sum(giou_rows(matched, target)), -1.0), static_cast<double>(k));
  out.reg = ops::add(ops::scale(l1, w.box.l1), ops::scale(giou_term, w.box.giou));
  return out;
}

LossTerms match_and_loss(const DetectionOutput& pred, const TargetSet& targets, const LossWeights& w,
                         MatchResult* match_out) {
  const MatchResult match = hungarian_match(build_cost_matrix(pred, targets, w.box));
  if (match_out) *match_out = match;
  return hungarian_loss(pred, targets, match, w);
}

Tensor total_loss(std::span<const LossTerms> labeled_strong, std::span<const LossTerms> labeled_weak,
                  std::span<const LossTerms> unlabeled_strong, const LossWeights& w) {
  Tensor total;
  bool any = false;
  for (auto group : {labeled_strong, labeled_weak, unlabeled_strong})
    for (const auto& terms : group) {
      total = any ? ops::add(total, terms.weighted(w)) : terms.weighted(w);
      any = true;
    }
  return any ? total : Tensor::scalar(0.0);
}

}  // namespace dssl
