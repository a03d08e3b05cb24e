#pragma once

#include <span>

#include "dssl/matching.hpp"
#include "dssl/model.hpp"
#include "dssl/tensor.hpp"

namespace dssl {

struct LossWeights {
  double alpha_reg = 2.0;      // multiplies the box regression term
  double alpha_cls = 5.0;      // multiplies the classification term
  double noobj_weight = 0.1;   // scale of the no-object log term
  MatchWeights box;            // L1 and generalized-IoU mix

  void validate() const;
};

/// Classification and box components of one image's set loss, both scalars.
struct LossTerms {
  Tensor cls;
  Tensor reg;

  /// alpha_reg * reg + alpha_cls * cls
  Tensor weighted(const LossWeights& w) const;
};

/// K x N matching costs for one image. Uses softmax probabilities of the
/// logits; no gradient flows through it.
CostMatrix build_cost_matrix(const DetectionOutput& pred, const TargetSet& targets, const MatchWeights& w = {});

/// Set loss under a fixed assignment: cross-entropy over all N slots (no-object
/// for unmatched, scaled by noobj_weight) plus box loss on matched pairs.
LossTerms hungarian_loss(const DetectionOutput& pred, const TargetSet& targets, const MatchResult& match,
                         const LossWeights& w = {});

/// Matches with hungarian_match, then evaluates hungarian_loss.
LossTerms match_and_loss(const DetectionOutput& pred, const TargetSet& targets, const LossWeights& w = {},
                         MatchResult* match_out = nullptr);

/// Sum of weighted terms over the labeled strong, labeled weak and unlabeled
/// strong groups. Empty groups contribute zero.
Tensor total_loss(std::span<const LossTerms> labeled_strong, std::span<const LossTerms> labeled_weak,
                  std::span<const LossTerms> unlabeled_strong, const LossWeights& w = {});

}  // namespace dssl
