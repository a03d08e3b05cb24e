#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dssl/checkpoint.hpp"
#include "dssl/tensor.hpp"

namespace dssl {

struct LevelShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t pixels() const { return height * width; }
  bool operator==(const LevelShape&) const = default;
};

/// Multi-scale feature maps flattened level-major into one [sum(h*w), c]
/// token matrix; pixels within a level are row-major.
struct FeaturePyramid {
  Tensor tokens;
  std::vector<LevelShape> levels;

  std::size_t channels() const { return tokens.dim(1); }
  std::size_t level_count() const { return levels.size(); }
  std::size_t total_pixels() const;
  std::size_t level_offset(std::size_t level) const;

  /// Throws ShapeError unless L >= 1, pixel counts strictly decrease and the
  /// token matrix covers every pixel.
  void validate() const;
};

struct DeformAttnConfig {
  std::size_t d_model = 256;
  std::size_t heads = 8;
  std::size_t points = 8;  // p_s, samples per head per level
  std::size_t levels = 3;
  std::size_t kernel = 4;  // k, only used by complexity_estimate

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t samples_per_head() const { return levels * points; }
  void validate() const;
};

struct DeformAttnParams {
  Tensor value_w, value_b;
  Tensor offset_w, offset_b;
  Tensor weight_w, weight_b;
  Tensor out_w, out_b;

  /// Offsets and attention logits start at zero weight; offset biases fan
  /// the points of each head outward along a per-head direction.
  static DeformAttnParams init(const DeformAttnConfig& cfg, std::mt19937_64& rng);
  void append_to(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// Per-query diagnostics of one deformable_attention call.
struct AttnTrace {
  std::vector<double> weights;    // [Nq, heads, levels * points]
  std::vector<double> locations;  // [Nq, heads, levels, points, 2], normalized
};

/// Bilinear interpolation of an [h, w, c] map at continuous pixel coordinates
/// (pixel (i, j) sits at x = j, y = i). Out-of-bounds neighbours read zero.
std::vector<double> bilinear_sample(std::span<const double> map, std::size_t height, std::size_t width,
                                    std::size_t channels, double x, double y);

/// Core sampling op. `value` is [S, d] laid out like FeaturePyramid::tokens;
/// refs [Nq, 2] normalized (x, y); offsets [Nq, heads*L*P*2] normalized;
/// weights [Nq * heads, L*P]. Sample location on level l is
/// ((ref + offset) * (w_l, h_l)) - 0.5 in pixel units. Differentiable in
/// every tensor input.
Tensor deform_sample(const Tensor& value, std::span<const LevelShape> levels, const Tensor& refs,
                     const Tensor& offsets, const Tensor& weights, std::size_t heads, std::size_t points);

/// Multi-scale deformable attention: offsets and attention logits are linear
/// in the query; weights are a softmax jointly over levels x points per head.
Tensor deformable_attention(const Tensor& queries, const FeaturePyramid& input, const Tensor& refs,
                            const DeformAttnConfig& cfg, const DeformAttnParams& params, AttnTrace* trace = nullptr);

struct ComplexityEstimate {
  double encoder_ops = 0;  // N_q = h*w
  double decoder_ops = 0;  // N_q = N
  double guard_lhs = 0;    // 5k + 3 p_s k
  double guard_rhs = 0;    // c
  bool guard_holds = false;
};

/// Leading-order operation counts of deformable attention in its two
/// regimes, 2 N_q c^2 + min(h w c^2, N_q k c^2), plus the guard that lets
/// the lower-order sampling terms be dropped.
ComplexityEstimate complexity_estimate(const DeformAttnConfig& cfg, std::size_t num_queries, std::size_t height,
                                       std::size_t width);

}  // namespace dssl
