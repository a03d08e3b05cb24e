#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>

#include "dssl/tensor.hpp"

namespace dssl {

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns max over coordinates of
/// |analytic - numeric| / max(1, |analytic|).
///
/// Throws std::invalid_argument when eps is outside (0, 1e-2] or when two
/// evaluations at the same point disagree bitwise (non-deterministic f).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& at, double eps);

/// Same check over parameters captured by `f`. When `max_coords` is nonzero,
/// each parameter is probed at that many coordinates chosen with `seed`.
double grad_check_params(const std::function<Tensor()>& f, std::span<Tensor> params, double eps,
                         std::size_t max_coords = 0, std::uint64_t seed = 0);

}  // namespace dssl
