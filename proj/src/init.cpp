#include "dssl/init.hpp"

#include <cmath>
#include <vector>

namespace dssl::init {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return uniform({fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

Tensor kaiming_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return uniform({fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

Tensor constant(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

}  // namespace dssl::init
