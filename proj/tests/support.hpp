#pragma once

// Random-instance builders shared by unit and acceptance tests.

#include <random>
#include <vector>

#include "dssl/deform_attn.hpp"
#include "dssl/ops.hpp"
#include "dssl/tensor.hpp"

namespace dssl::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Weighted sum with fixed random weights, so every output coordinate gets a
/// distinct cotangent during gradient checks.
inline Tensor random_projection(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(y, random_tensor(rng, y.shape())));
}

struct AttnInstance {
  DeformAttnConfig cfg;
  DeformAttnParams params;
  Tensor queries;
  FeaturePyramid pyramid;
  Tensor refs;

  std::vector<Tensor> leaves() const {
    return {queries,         pyramid.tokens,  refs,           params.value_w, params.value_b,
            params.offset_w, params.offset_b, params.weight_w, params.weight_b, params.out_w,
            params.out_b};
  }
};

/// Small random deformable-attention problem with non-trivial offsets and
/// attention logits. The first level is `size` x `size`; each further level
/// halves it.
inline AttnInstance random_attn_instance(std::mt19937_64& rng, std::size_t nq = 3, std::size_t size = 8,
                                         std::size_t d = 8, std::size_t heads = 2, std::size_t levels = 2,
                                         std::size_t points = 2) {
  AttnInstance inst;
  inst.cfg.d_model = d;
  inst.cfg.heads = heads;
  inst.cfg.levels = levels;
  inst.cfg.points = points;
  inst.params = DeformAttnParams::init(inst.cfg, rng);
  const std::size_t samples = heads * levels * points;
  inst.params.value_b = random_tensor(rng, {d}, -0.5, 0.5, true);
  inst.params.offset_w = random_tensor(rng, {d, samples * 2}, -0.05, 0.05, true);
  inst.params.offset_b = random_tensor(rng, {samples * 2}, -0.2, 0.2, true);
  inst.params.weight_w = random_tensor(rng, {d, samples}, -0.5, 0.5, true);
  inst.params.weight_b = random_tensor(rng, {samples}, -0.5, 0.5, true);
  inst.params.out_b = random_tensor(rng, {d}, -0.5, 0.5, true);
  std::size_t s = size;
  std::size_t total = 0;
  for (std::size_t l = 0; l < levels; ++l) {
    inst.pyramid.levels.push_back({s, s});
    total += s * s;
    s = std::max<std::size_t>(1, s / 2);
  }
  inst.pyramid.tokens = random_tensor(rng, {total, d}, -1.0, 1.0, true);
  inst.queries = random_tensor(rng, {nq, d}, -1.0, 1.0, true);
  inst.refs = random_tensor(rng, {nq, 2}, 0.1, 0.9, true);
  return inst;
}

}  // namespace dssl::testing
