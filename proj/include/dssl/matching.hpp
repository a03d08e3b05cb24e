#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dssl/boxes.hpp"

namespace dssl {

enum class TargetOrigin { ground_truth, pseudo };

struct TargetSet {
  std::vector<Target> items;
  TargetOrigin origin = TargetOrigin::ground_truth;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  /// Class ids below num_classes, box coordinates in [0, 1], at most max_items.
  void validate(std::size_t num_classes, std::size_t max_items) const;
};

/// K x N cost matrix, row-major.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  CostMatrix() = default;
  CostMatrix(std::size_t k, std::size_t n, double fill = 0.0) : rows(k), cols(n), values(k * n, fill) {}
  CostMatrix(std::initializer_list<std::initializer_list<double>> init);
  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct MatchResult {
  std::vector<std::size_t> assignment;  // target k -> prediction assignment[k]
  double total = 0.0;                   // sum_k cost(k, assignment[k]), k ascending

  bool operator==(const MatchResult&) const = default;
};

struct MatchWeights {
  double l1 = 5.0;
  double giou = 2.0;
};

/// lambda_l1 * |a - b|_1 + lambda_giou * (1 - GIoU(a, b)) on normalized boxes.
double box_cost(const BoxCxcywh& pred, const BoxCxcywh& target, const MatchWeights& w = {});

/// -p(c) + box_cost for a real target; `probs` are softmax probabilities.
double match_cost(std::span<const double> probs, const BoxCxcywh& pred, const Target& target,
                  const MatchWeights& w = {});

/// Optimal injective assignment of K rows to N >= K columns.
MatchResult hungarian_match(const CostMatrix& cost);

/// Exhaustive search over all injections; K <= 8.
MatchResult brute_force_match(const CostMatrix& cost);

/// Sum of cost(k, assignment[k]) over k ascending; validates injectivity.
double assignment_cost(const CostMatrix& cost, std::span<const std::size_t> assignment);

}  // namespace dssl
