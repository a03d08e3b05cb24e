#include "dssl/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "dssl/init.hpp"
#include "dssl/ops.hpp"

namespace dssl {

namespace {

constexpr std::size_t kKernel = 3;

LinearParams make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool relu_follows = false) {
  return {relu_follows ? init::kaiming_uniform(in, out, rng) : init::xavier_uniform(in, out, rng),
          init::constant({out}, 0.0)};
}

NormParams make_norm(std::size_t d) { return {init::constant({d}, 1.0), init::constant({d}, 0.0)}; }

Tensor apply(const LinearParams& p, const Tensor& x) { return ops::linear(x, p.w, p.b); }
Tensor apply(const NormParams& p, const Tensor& x) { return ops::layernorm(x, p.gamma, p.beta); }
Tensor apply(const FfnParams& p, const Tensor& x) { return apply(p.out, ops::relu(apply(p.in, x))); }

Tensor conv3x3_s2(const LinearParams& p, const Tensor& x) {
  return ops::relu(apply(p, ops::im2col(x, kKernel, 2, 1)));
}

void append(std::vector<NamedTensor>& out, const std::string& name, const LinearParams& p) {
  out.push_back({name + ".w", p.w});
  out.push_back({name + ".b", p.b});
}

void append(std::vector<NamedTensor>& out, const std::string& name, const NormParams& p) {
  out.push_back({name + ".gamma", p.gamma});
  out.push_back({name + ".beta", p.beta});
}

void append(std::vector<NamedTensor>& out, const std::string& name, const FfnParams& p) {
  append(out, name + ".in", p.in);
  append(out, name + ".out", p.out);
}

Tensor multihead_self_attention(const DecoderLayerParams& p, const Tensor& qk_in, const Tensor& v_in,
                                std::size_t heads) {
  const Tensor q = apply(p.q, qk_in);
  const Tensor k = apply(p.k, qk_in);
  const Tensor v = apply(p.v, v_in);
  const std::size_t d = q.dim(1);
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> parts;
  parts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = ops::slice_cols(q, h * dh, (h + 1) * dh);
    const Tensor kh = ops::slice_cols(k, h * dh, (h + 1) * dh);
    const Tensor vh = ops::slice_cols(v, h * dh, (h + 1) * dh);
    const Tensor attn = ops::softmax(ops::scale(ops::matmul(qh, ops::transpose(kh)), inv));
    parts.push_back(ops::matmul(attn, vh));
  }
  return apply(p.o, heads == 1 ? parts[0] : ops::concat_cols(parts));
}

}  // namespace

DeformAttnConfig ModelConfig::attention() const {
  return {.d_model = d_model, .heads = heads, .points = points, .levels = pyramid_levels, .kernel = 4};
}

std::size_t ModelConfig::min_image_side() const {
  return std::max<std::size_t>(32, std::size_t{8} << (pyramid_levels - 1));
}

void ModelConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw std::invalid_argument("model config: d_model must be a positive multiple of heads");
  }
  if (num_queries == 0) throw std::invalid_argument("model config: num_queries must be >= 1");
  if (num_classes == 0) throw std::invalid_argument("model config: num_classes must be >= 1");
  if (pyramid_levels == 0 || pyramid_levels > 5) throw std::invalid_argument("model config: pyramid_levels in [1, 5]");
  if (points == 0 || ffn_dim == 0 || stem_channels1 == 0 || stem_channels2 == 0) {
    throw std::invalid_argument("model config: points, ffn_dim and stem channels must be positive");
  }
  if (d_model % 4 != 0) throw std::invalid_argument("model config: d_model must be divisible by 4");
}

Detector::Detector(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg_.d_model;
  const std::size_t k2 = kKernel * kKernel;
  auto& p = params_;
  p.stem.push_back(make_linear(k2 * 1, cfg_.stem_channels1, rng, true));
  p.stem.push_back(make_linear(k2 * cfg_.stem_channels1, cfg_.stem_channels2, rng, true));
  p.stem.push_back(make_linear(k2 * cfg_.stem_channels2, d, rng, true));
  for (std::size_t l = 1; l < cfg_.pyramid_levels; ++l) p.stem.push_back(make_linear(k2 * d, d, rng, true));
  for (std::size_t l = 0; l < cfg_.pyramid_levels; ++l) {
    p.input_proj.push_back(make_linear(d, d, rng));
    p.input_norm.push_back(make_norm(d));
  }
  p.level_embed = init::uniform({cfg_.pyramid_levels, d}, 0.1, rng);
  const auto attn_cfg = cfg_.attention();
  for (std::size_t i = 0; i < cfg_.encoder_layers; ++i) {
    EncoderLayerParams e;
    e.attn = DeformAttnParams::init(attn_cfg, rng);
    e.norm1 = make_norm(d);
    e.ffn = {make_linear(d, cfg_.ffn_dim, rng, true), make_linear(cfg_.ffn_dim, d, rng)};
    e.norm2 = make_norm(d);
    p.encoder.push_back(std::move(e));
  }
  p.query_pos = init::uniform({cfg_.num_queries, d}, 1.0, rng);
  p.query_content = init::uniform({cfg_.num_queries, d}, 1.0, rng);
  p.ref_proj = make_linear(d, 2, rng);
  for (std::size_t i = 0; i < cfg_.decoder_layers; ++i) {
    DecoderLayerParams dl;
    dl.q = make_linear(d, d, rng);
    dl.k = make_linear(d, d, rng);
    dl.v = make_linear(d, d, rng);
    dl.o = make_linear(d, d, rng);
    dl.norm1 = make_norm(d);
    dl.cross = DeformAttnParams::init(attn_cfg, rng);
    dl.norm2 = make_norm(d);
    dl.ffn = {make_linear(d, cfg_.ffn_dim, rng, true), make_linear(cfg_.ffn_dim, d, rng)};
    dl.norm3 = make_norm(d);
    p.decoder.push_back(std::move(dl));
  }
  p.class_head = make_linear(d, cfg_.num_classes + 1, rng);
  p.box_head[0] = make_linear(d, d, rng, true);
  p.box_head[1] = make_linear(d, d, rng, true);
  p.box_head[2] = {init::constant({d, 4}, 0.0), init::constant({4}, 0.0)};
}

FeaturePyramid Detector::backbone_forward(const Image& image) const {
  const std::size_t min_side = cfg_.min_image_side();
  if (image.height < min_side || image.width < min_side) {
    throw ShapeError("backbone: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is smaller than " + std::to_string(min_side) + "x" + std::to_string(min_side));
  }
  if (image.pixels.size() != image.height * image.width) throw ShapeError("backbone: image buffer size mismatch");
  // Ink intensity: paper white maps to zero so padding matches background.
  std::vector<double> ink(image.pixels.size());
  for (std::size_t i = 0; i < ink.size(); ++i) ink[i] = 1.0 - image.pixels[i];
  Tensor x = Tensor::from({image.height, image.width, 1}, std::move(ink));

  std::size_t h = image.height, w = image.width;
  std::vector<Tensor> level_tokens;
  FeaturePyramid out;
  for (std::size_t s = 0; s < params_.stem.size(); ++s) {
    const std::size_t oh = ops::conv_out_extent(h, kKernel, 2, 1);
    const std::size_t ow = ops::conv_out_extent(w, kKernel, 2, 1);
    Tensor y = conv3x3_s2(params_.stem[s], x);  // [oh*ow, c]
    h = oh;
    w = ow;
    if (s >= 2) {
      const std::size_t l = s - 2;
      level_tokens.push_back(apply(params_.input_norm[l], apply(params_.input_proj[l], y)));
      out.levels.push_back({h, w});
    }
    x = ops::reshape(y, {h, w, y.dim(1)});
  }
  out.tokens = level_tokens.size() == 1 ? level_tokens[0] : ops::concat_rows(level_tokens);
  out.validate();
  return out;
}

Tensor Detector::positional_embedding(const std::vector<LevelShape>& levels) const {
  const std::size_t d = cfg_.d_model;
  const std::size_t half = d / 2;
  constexpr double kTwoPi = 6.283185307179586;
  std::vector<Tensor> parts;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto [lh, lw] = levels[l];
    std::vector<double> v(lh * lw * d);
    for (std::size_t i = 0; i < lh; ++i)
      for (std::size_t j = 0; j < lw; ++j) {
        const double coords[2] = {(static_cast<double>(i) + 0.5) / static_cast<double>(lh) * kTwoPi,
                                  (static_cast<double>(j) + 0.5) / static_cast<double>(lw) * kTwoPi};
        double* row = v.data() + (i * lw + j) * d;
        for (std::size_t axis = 0; axis < 2; ++axis)
          for (std::size_t f = 0; f < half / 2; ++f) {
            const double freq = std::pow(10000.0, 2.0 * static_cast<double>(f) / static_cast<double>(half));
            row[axis * half + 2 * f] = std::sin(coords[axis] / freq);
            row[axis * half + 2 * f + 1] = std::cos(coords[axis] / freq);
          }
      }
    Tensor sin_part = Tensor::from({lh * lw, d}, std::move(v));
    Tensor level = ops::reshape(ops::slice_rows(params_.level_embed, l, l + 1), {d});
    parts.push_back(ops::add(sin_part, level));
  }
  return parts.size() == 1 ? parts[0] : ops::concat_rows(parts);
}

Tensor pixel_reference_points(const std::vector<LevelShape>& levels) {
  std::vector<double> v;
  for (const auto& [lh, lw] : levels)
    for (std::size_t i = 0; i < lh; ++i)
      for (std::size_t j = 0; j < lw; ++j) {
        v.push_back((static_cast<double>(j) + 0.5) / static_cast<double>(lw));
        v.push_back((static_cast<double>(i) + 0.5) / static_cast<double>(lh));
      }
  const std::size_t n = v.size() / 2;
  return Tensor::from({n, 2}, std::move(v));
}

FeaturePyramid Detector::encoder_forward(const FeaturePyramid& pyramid, const Tensor& pos_embed) const {
  pyramid.validate();
  if (pos_embed.shape() != pyramid.tokens.shape()) {
    throw ShapeError("encoder: positional embedding " + shape_str(pos_embed.shape()) + " vs tokens " +
                     shape_str(pyramid.tokens.shape()));
  }
  const auto attn_cfg = cfg_.attention();
  const Tensor refs = pixel_reference_points(pyramid.levels);
  FeaturePyramid cur = pyramid;
  for (const auto& layer : params_.encoder) {
    const Tensor q = ops::add(cur.tokens, pos_embed);
    const Tensor a = deformable_attention(q, cur, refs, attn_cfg, layer.attn);
    Tensor x = apply(layer.norm1, ops::add(cur.tokens, a));
    x = apply(layer.norm2, ops::add(x, apply(layer.ffn, x)));
    cur.tokens = x;
  }
  return cur;
}

DecoderOutput Detector::decoder_forward(const FeaturePyramid& memory) const {
  return decoder_forward(memory, params_.query_pos, params_.query_content);
}

DecoderOutput Detector::decoder_forward(const FeaturePyramid& memory, const Tensor& query_pos,
                                        const Tensor& query_content) const {
  memory.validate();
  if (query_pos.shape() != Shape{cfg_.num_queries, cfg_.d_model} || query_content.shape() != query_pos.shape()) {
    throw ShapeError("decoder: query embeddings " + shape_str(query_pos.shape()) + " expected " +
                     shape_str({cfg_.num_queries, cfg_.d_model}));
  }
  const auto attn_cfg = cfg_.attention();
  DecoderOutput out;
  out.refs = ops::sigmoid(apply(params_.ref_proj, query_pos));
  Tensor tgt = query_content;
  for (const auto& layer : params_.decoder) {
    const Tensor qk = ops::add(tgt, query_pos);
    tgt = apply(layer.norm1, ops::add(tgt, multihead_self_attention(layer, qk, tgt, cfg_.heads)));
    const Tensor cross =
        deformable_attention(ops::add(tgt, query_pos), memory, out.refs, attn_cfg, layer.cross);
    tgt = apply(layer.norm2, ops::add(tgt, cross));
    tgt = apply(layer.norm3, ops::add(tgt, apply(layer.ffn, tgt)));
    out.states.push_back(tgt);
  }
  if (out.states.empty()) out.states.push_back(tgt);
  return out;
}

DetectionOutput Detector::predict_heads(const Tensor& states, const Tensor& refs) const {
  if (states.rank() != 2 || states.dim(1) != cfg_.d_model || refs.shape() != Shape{states.dim(0), 2}) {
    throw ShapeError("heads: states " + shape_str(states.shape()) + " / refs " + shape_str(refs.shape()));
  }
  DetectionOutput out;
  out.logits = apply(params_.class_head, states);
  Tensor h = ops::relu(apply(params_.box_head[0], states));
  h = ops::relu(apply(params_.box_head[1], h));
  const Tensor raw = apply(params_.box_head[2], h);
  const std::vector<Tensor> shift_cols{ops::logit(refs), Tensor::zeros({states.dim(0), 2})};
  out.boxes = ops::sigmoid(ops::add(raw, ops::concat_cols(shift_cols)));
  return out;
}

std::vector<DetectionOutput> Detector::forward_all_layers(const Image& image) const {
  const FeaturePyramid features = backbone_forward(image);
  const FeaturePyramid memory = encoder_forward(features, positional_embedding(features.levels));
  const DecoderOutput dec = decoder_forward(memory);
  std::vector<DetectionOutput> outs;
  outs.push_back(predict_heads(dec.states.back(), dec.refs));
  for (std::size_t i = 0; i + 1 < dec.states.size(); ++i) outs.push_back(predict_heads(dec.states[i], dec.refs));
  return outs;
}

DetectionOutput Detector::forward(const Image& image) const {
  const FeaturePyramid features = backbone_forward(image);
  const FeaturePyramid memory = encoder_forward(features, positional_embedding(features.levels));
  const DecoderOutput dec = decoder_forward(memory);
  return predict_heads(dec.states.back(), dec.refs);
}

std::vector<NamedTensor> Detector::parameters() const {
  std::vector<NamedTensor> out;
  const auto& p = params_;
  for (std::size_t i = 0; i < p.stem.size(); ++i) append(out, "backbone.conv" + std::to_string(i), p.stem[i]);
  for (std::size_t l = 0; l < p.input_proj.size(); ++l) {
    append(out, "input_proj" + std::to_string(l), p.input_proj[l]);
    append(out, "input_norm" + std::to_string(l), p.input_norm[l]);
  }
  out.push_back({"level_embed", p.level_embed});
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    const std::string pre = "encoder" + std::to_string(i);
    p.encoder[i].attn.append_to(out, pre + ".attn");
    append(out, pre + ".norm1", p.encoder[i].norm1);
    append(out, pre + ".ffn", p.encoder[i].ffn);
    append(out, pre + ".norm2", p.encoder[i].norm2);
  }
  out.push_back({"query_pos", p.query_pos});
  out.push_back({"query_content", p.query_content});
  append(out, "ref_proj", p.ref_proj);
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    const std::string pre = "decoder" + std::to_string(i);
    const auto& dl = p.decoder[i];
    append(out, pre + ".self.q", dl.q);
    append(out, pre + ".self.k", dl.k);
    append(out, pre + ".self.v", dl.v);
    append(out, pre + ".self.o", dl.o);
    append(out, pre + ".norm1", dl.norm1);
    dl.cross.append_to(out, pre + ".cross");
    append(out, pre + ".norm2", dl.norm2);
    append(out, pre + ".ffn", dl.ffn);
    append(out, pre + ".norm3", dl.norm3);
  }
  append(out, "class_head", p.class_head);
  for (std::size_t i = 0; i < 3; ++i) append(out, "box_head" + std::to_string(i), p.box_head[i]);
  return out;
}

Detector Detector::clone(bool requires_grad) const {
  Detector copy(cfg_, 0);
  auto src = parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].tensor.mutable_data();
    auto s = src[i].tensor.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
  copy.set_requires_grad(requires_grad);
  return copy;
}

void Detector::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(on);
}

}  // namespace dssl
