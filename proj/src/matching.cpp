#include "dssl/matching.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace dssl {

namespace {

void check_cost(const CostMatrix& cost, const char* who) {
  if (cost.values.size() != cost.rows * cost.cols) throw std::invalid_argument(std::string(who) + ": malformed matrix");
  if (cost.rows > cost.cols) {
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(cost.rows) + " targets exceed " +
                                std::to_string(cost.cols) + " predictions");
  }
  for (double v : cost.values)
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite cost");
}

}  // namespace

void TargetSet::validate(std::size_t num_classes, std::size_t max_items) const {
  if (items.size() > max_items) {
    throw std::invalid_argument("target set: " + std::to_string(items.size()) + " items exceed " +
                                std::to_string(max_items) + " prediction slots");
  }
  for (const auto& t : items) {
    if (t.cls >= num_classes) throw std::invalid_argument("target set: class id " + std::to_string(t.cls));
    for (double v : {t.box.cx, t.box.cy, t.box.w, t.box.h})
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("target set: box coordinate outside [0, 1]");
  }
}

CostMatrix::CostMatrix(std::initializer_list<std::initializer_list<double>> init) {
  rows = init.size();
  cols = rows ? init.begin()->size() : 0;
  for (const auto& row : init) {
    if (row.size() != cols) throw std::invalid_argument("cost matrix: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
}

double box_cost(const BoxCxcywh& pred, const BoxCxcywh& target, const MatchWeights& w) {
  const double l1 = std::fabs(pred.cx - target.cx) + std::fabs(pred.cy - target.cy) + std::fabs(pred.w - target.w) +
                    std::fabs(pred.h - target.h);
  return w.l1 * l1 + w.giou * (1.0 - generalized_iou(to_corners(pred), to_corners(target)));
}

double match_cost(std::span<const double> probs, const BoxCxcywh& pred, const Target& target, const MatchWeights& w) {
  if (target.cls >= probs.size()) throw std::invalid_argument("match_cost: class id out of range");
  return -probs[target.cls] + box_cost(pred, target.box, w);
}

double assignment_cost(const CostMatrix& cost, std::span<const std::size_t> assignment) {
  if (assignment.size() != cost.rows) throw std::invalid_argument("assignment: wrong length");
  std::vector<bool> used(cost.cols, false);
  double total = 0.0;
  for (std::size_t k = 0; k < assignment.size(); ++k) {
    const std::size_t j = assignment[k];
    if (j >= cost.cols || used[j]) throw std::invalid_argument("assignment: not injective");
    used[j] = true;
    total += cost.at(k, j);
  }
  return total;
}

// Shortest augmenting path with row/column potentials, O(K^2 N).
MatchResult hungarian_match(const CostMatrix& cost) {
  check_cost(cost, "hungarian_match");
  const std::size_t k = cost.rows, n = cost.cols;
  MatchResult result;
  if (k == 0) return result;
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is the virtual source.
  std::vector<double> u(k + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> row_of(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= k; ++i) {
    row_of[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = row_of[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[row_of[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      row_of[j0] = row_of[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  result.assignment.assign(k, 0);
  for (std::size_t j = 1; j <= n; ++j)
    if (row_of[j] != 0) result.assignment[row_of[j] - 1] = j - 1;
  result.total = assignment_cost(cost, result.assignment);
  return result;
}

MatchResult brute_force_match(const CostMatrix& cost) {
  check_cost(cost, "brute_force_match");
  if (cost.rows > 8) throw std::invalid_argument("brute_force_match: more than 8 targets");
  const std::size_t k = cost.rows, n = cost.cols;
  MatchResult best;
  best.total = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> current(k);
  std::vector<bool> used(n, false);
  // Partial sums accumulate in row order, so the leaf value equals
  // assignment_cost() bit for bit.
  auto dfs = [&](auto&& self, std::size_t row, double partial) -> void {
    if (row == k) {
      if (partial < best.total) {
        best.total = partial;
        best.assignment = current;
      }
      return;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      used[j] = true;
      current[row] = j;
      self(self, row + 1, partial + cost.at(row, j));
      used[j] = false;
    }
  };
  dfs(dfs, 0, 0.0);
  if (k == 0) best.total = 0.0;
  return best;
}

}  // namespace dssl
