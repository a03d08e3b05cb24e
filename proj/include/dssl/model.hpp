#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dssl/boxes.hpp"
#include "dssl/checkpoint.hpp"
#include "dssl/deform_attn.hpp"
#include "dssl/tensor.hpp"

namespace dssl {

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 4;
  std::size_t points = 8;
  std::size_t pyramid_levels = 3;
  std::size_t num_queries = 30;
  std::size_t num_classes = 1;  // foreground classes; the head adds the no-object class last
  std::size_t ffn_dim = 64;
  std::size_t stem_channels1 = 16;
  std::size_t stem_channels2 = 32;

  DeformAttnConfig attention() const;
  /// Smallest accepted image side: the coarsest level needs one pixel.
  std::size_t min_image_side() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct DetectionOutput {
  Tensor logits;  // [N, C + 1]
  Tensor boxes;   // [N, 4] normalized (cx, cy, w, h)
  std::size_t size() const { return logits.dim(0); }
};

struct DecoderOutput {
  std::vector<Tensor> states;  // one [N, d] entry per decoder layer
  Tensor refs;                 // [N, 2]
};

struct LinearParams {
  Tensor w, b;
};

struct NormParams {
  Tensor gamma, beta;
};

struct FfnParams {
  LinearParams in, out;
};

struct EncoderLayerParams {
  DeformAttnParams attn;
  NormParams norm1;
  FfnParams ffn;
  NormParams norm2;
};

struct DecoderLayerParams {
  LinearParams q, k, v, o;
  NormParams norm1;
  DeformAttnParams cross;
  NormParams norm2;
  FfnParams ffn;
  NormParams norm3;
};

struct DetectorParams {
  std::vector<LinearParams> stem;        // strided 3x3 convolutions
  std::vector<LinearParams> input_proj;  // one per level
  std::vector<NormParams> input_norm;
  Tensor level_embed;  // [L, d]
  std::vector<EncoderLayerParams> encoder;
  Tensor query_pos;      // [N, d]
  Tensor query_content;  // [N, d]
  LinearParams ref_proj;
  std::vector<DecoderLayerParams> decoder;
  LinearParams class_head;
  LinearParams box_head[3];
};

/// Deformable-attention detector: strided-convolution backbone, multi-scale
/// deformable encoder, query decoder and set-prediction heads. Emits exactly
/// num_queries predictions; there is no suppression stage.
class Detector {
 public:
  Detector(const ModelConfig& cfg, std::uint64_t seed);
  Detector(Detector&&) = default;
  Detector& operator=(Detector&&) = default;
  Detector(const Detector&) = delete;
  Detector& operator=(const Detector&) = delete;

  const ModelConfig& config() const { return cfg_; }

  FeaturePyramid backbone_forward(const Image& image) const;
  /// Sinusoidal 2-D embedding per level plus the learned level embedding.
  Tensor positional_embedding(const std::vector<LevelShape>& levels) const;
  FeaturePyramid encoder_forward(const FeaturePyramid& pyramid, const Tensor& pos_embed) const;
  DecoderOutput decoder_forward(const FeaturePyramid& memory) const;
  DecoderOutput decoder_forward(const FeaturePyramid& memory, const Tensor& query_pos,
                                const Tensor& query_content) const;
  /// Class logits from one linear layer; boxes from a 3-layer FFN whose
  /// centre outputs are offset by logit(refs) before the sigmoid.
  DetectionOutput predict_heads(const Tensor& states, const Tensor& refs) const;
  DetectionOutput forward(const Image& image) const;
  /// Final prediction followed by one prediction per earlier decoder layer.
  std::vector<DetectionOutput> forward_all_layers(const Image& image) const;

  std::vector<NamedTensor> parameters() const;
  Detector clone(bool requires_grad) const;
  void set_requires_grad(bool on);

  DetectorParams& params() { return params_; }
  const DetectorParams& params() const { return params_; }

 private:
  Detector() = default;

  ModelConfig cfg_;
  DetectorParams params_;
};

/// Row-normalized positions ((j + 0.5) / w, (i + 0.5) / h) of every pyramid
/// pixel, level-major.
Tensor pixel_reference_points(const std::vector<LevelShape>& levels);

}  // namespace dssl
