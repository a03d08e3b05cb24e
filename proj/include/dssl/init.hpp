#pragma once

#include <cstddef>
#include <random>

#include "dssl/tensor.hpp"

namespace dssl::init {

/// Glorot-uniform [fan_in, fan_out] weight with requires_grad set.
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

/// He-uniform weight for layers followed by ReLU.
Tensor kaiming_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng);
Tensor constant(Shape shape, double value);

}  // namespace dssl::init
