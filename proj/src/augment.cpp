#include "dssl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dssl {

namespace {

Box to_pixels(const BoxCxcywh& b, std::size_t w, std::size_t h) {
  return to_corners(b, static_cast<double>(w), static_cast<double>(h));
}

BoxCxcywh to_normalized(const Box& b, std::size_t w, std::size_t h) {
  return to_cxcywh(b, static_cast<double>(w), static_cast<double>(h));
}

// Maps a pixel box through one step; false when a crop drops it.
bool step_forward(const GeomStep& s, Box& b) {
  switch (s.kind) {
    case GeomStep::Kind::hflip: {
      const double w = static_cast<double>(s.in_width);
      b = {w - b.x2, b.y1, w - b.x1, b.y2};
      return true;
    }
    case GeomStep::Kind::resize: {
      const double sx = static_cast<double>(s.out_width) / static_cast<double>(s.in_width);
      const double sy = static_cast<double>(s.out_height) / static_cast<double>(s.in_height);
      b = {b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};
      return true;
    }
    case GeomStep::Kind::crop: {
      const double x0 = static_cast<double>(s.crop_x), y0 = static_cast<double>(s.crop_y);
      const double cw = static_cast<double>(s.out_width), ch = static_cast<double>(s.out_height);
      Box c{std::clamp(b.x1 - x0, 0.0, cw), std::clamp(b.y1 - y0, 0.0, ch), std::clamp(b.x2 - x0, 0.0, cw),
            std::clamp(b.y2 - y0, 0.0, ch)};
      if (c.width() <= 0.0 || c.height() <= 0.0) return false;
      b = c;
      return true;
    }
  }
  return true;
}

void step_inverse(const GeomStep& s, Box& b) {
  switch (s.kind) {
    case GeomStep::Kind::hflip: {
      const double w = static_cast<double>(s.in_width);
      b = {w - b.x2, b.y1, w - b.x1, b.y2};
      break;
    }
    case GeomStep::Kind::resize: {
      const double sx = static_cast<double>(s.in_width) / static_cast<double>(s.out_width);
      const double sy = static_cast<double>(s.in_height) / static_cast<double>(s.out_height);
      b = {b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};
      break;
    }
    case GeomStep::Kind::crop: {
      const double x0 = static_cast<double>(s.crop_x), y0 = static_cast<double>(s.crop_y);
      b = {b.x1 + x0, b.y1 + y0, b.x2 + x0, b.y2 + y0};
      break;
    }
  }
}

double sample_pixel_clamped(const Image& img, long y, long x) {
  y = std::clamp<long>(y, 0, static_cast<long>(img.height) - 1);
  x = std::clamp<long>(x, 0, static_cast<long>(img.width) - 1);
  return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
}

}  // namespace

void TransformRecord::push(const GeomStep& step) {
  if (step.in_width != out_width() || step.in_height != out_height()) {
    throw std::invalid_argument("transform record: step input size does not match the current frame");
  }
  if (step.kind == GeomStep::Kind::hflip && !steps.empty() && steps.back().kind == GeomStep::Kind::hflip) {
    steps.pop_back();
    return;
  }
  steps.push_back(step);
}

std::vector<Target> forward_boxes(const TransformRecord& record, std::span<const Target> boxes) {
  if (record.steps.empty()) return {boxes.begin(), boxes.end()};
  std::vector<Target> out;
  for (const auto& t : boxes) {
    Box b = to_pixels(t.box, record.width, record.height);
    bool kept = true;
    for (const auto& s : record.steps)
      if (!(kept = step_forward(s, b))) break;
    if (kept) out.push_back({t.cls, to_normalized(b, record.out_width(), record.out_height())});
  }
  return out;
}

std::vector<Target> invert_boxes(const TransformRecord& record, std::span<const Target> boxes) {
  if (record.steps.empty()) return {boxes.begin(), boxes.end()};
  std::vector<Target> out;
  for (const auto& t : boxes) {
    Box b = to_pixels(t.box, record.out_width(), record.out_height());
    for (auto it = record.steps.rbegin(); it != record.steps.rend(); ++it) step_inverse(*it, b);
    out.push_back({t.cls, to_normalized(b, record.width, record.height)});
  }
  return out;
}

AugPolicy AugPolicy::weak() {
  AugPolicy p;
  p.kind = Kind::weak;
  p.resize_p = p.erase_p = p.crop_p = p.blur_p = 0.0;
  return p;
}

AugPolicy AugPolicy::strong() {
  AugPolicy p;
  p.kind = Kind::strong;
  return p;
}

void AugPolicy::validate() const {
  for (double v : {flip_p, resize_p, erase_p, crop_p, blur_p, grayscale_p})
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("aug policy: probabilities must lie in [0, 1]");
  if (!(resize_min > 0.0 && resize_min <= resize_max)) throw std::invalid_argument("aug policy: bad resize range");
  if (!(crop_min_side > 0.0 && crop_min_side <= 1.0)) throw std::invalid_argument("aug policy: bad crop side");
  if (!(erase_max_area > 0.0 && erase_max_area <= 1.0)) throw std::invalid_argument("aug policy: bad erase area");
  if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max)) throw std::invalid_argument("aug policy: bad blur");
}

Image hflip_image(const Image& image) {
  Image out(image.height, image.width);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) out.at(y, x) = image.at(y, image.width - 1 - x);
  return out;
}

Image resize_image(const Image& image, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw std::invalid_argument("resize: zero target size");
  Image out(height, width);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const long y0 = static_cast<long>(std::floor(fy));
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const long x0 = static_cast<long>(std::floor(fx));
      const double tx = fx - static_cast<double>(x0);
      const double top = (1 - tx) * sample_pixel_clamped(image, y0, x0) + tx * sample_pixel_clamped(image, y0, x0 + 1);
      const double bot =
          (1 - tx) * sample_pixel_clamped(image, y0 + 1, x0) + tx * sample_pixel_clamped(image, y0 + 1, x0 + 1);
      out.at(y, x) = (1 - ty) * top + ty * bot;
    }
  }
  return out;
}

Image crop_image(const Image& image, std::size_t x, std::size_t y, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0 || x + width > image.width || y + height > image.height) {
    throw std::invalid_argument("crop: window outside the image or empty");
  }
  Image out(height, width);
  for (std::size_t r = 0; r < height; ++r)
    std::copy_n(image.pixels.begin() + static_cast<long>((y + r) * image.width + x), width,
                out.pixels.begin() + static_cast<long>(r * width));
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("blur: sigma must be positive");
  const long radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (long i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    norm += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= norm;
  Image tmp(image.height, image.width), out(image.height, image.width);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      double s = 0.0;
      for (long i = -radius; i <= radius; ++i)
        s += k[static_cast<std::size_t>(i + radius)] *
             sample_pixel_clamped(image, static_cast<long>(y), static_cast<long>(x) + i);
      tmp.at(y, x) = s;
    }
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      double s = 0.0;
      for (long i = -radius; i <= radius; ++i)
        s += k[static_cast<std::size_t>(i + radius)] *
             sample_pixel_clamped(tmp, static_cast<long>(y) + i, static_cast<long>(x));
      out.at(y, x) = s;
    }
  return out;
}

void erase_patch(Image& image, std::size_t x, std::size_t y, std::size_t width, std::size_t height, double fill) {
  for (std::size_t r = y; r < std::min(y + height, image.height); ++r)
    for (std::size_t c = x; c < std::min(x + width, image.width); ++c) image.at(r, c) = fill;
}

AugmentedSample hflip(const AugmentedSample& sample) {
  AugmentedSample out;
  out.image = hflip_image(sample.image);
  out.original = sample.original;
  out.record = sample.record;
  const std::size_t w = out.record.out_width(), h = out.record.out_height();
  out.record.push({GeomStep::Kind::hflip, w, h, w, h, 0, 0});
  out.targets = forward_boxes(out.record, out.original);
  return out;
}

AugmentedSample apply(const AugPolicy& policy, const Image& image, std::span<const Target> targets,
                      std::mt19937_64& rng) {
  policy.validate();
  if (image.height == 0 || image.width == 0) throw std::invalid_argument("augment: empty image");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto coin = [&](double p) { return p > 0.0 && unit(rng) < p; };
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  AugmentedSample s;
  s.image = image;
  s.original.assign(targets.begin(), targets.end());
  s.record.width = image.width;
  s.record.height = image.height;
  auto push = [&](GeomStep::Kind kind, std::size_t ow, std::size_t oh, std::size_t cx = 0, std::size_t cy = 0) {
    s.record.push({kind, s.image.width, s.image.height, ow, oh, cx, cy});
  };

  if (coin(policy.flip_p)) {
    push(GeomStep::Kind::hflip, s.image.width, s.image.height);
    s.image = hflip_image(s.image);
  }
  if (coin(policy.resize_p)) {
    const double floor_scale = static_cast<double>(policy.min_side) /
                               static_cast<double>(std::min(s.image.width, s.image.height));
    const double scale = std::max(uniform(policy.resize_min, policy.resize_max), floor_scale);
    const auto ow = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * s.image.width)));
    const auto oh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * s.image.height)));
    if (ow != s.image.width || oh != s.image.height) {
      push(GeomStep::Kind::resize, ow, oh);
      s.image = resize_image(s.image, ow, oh);
    }
  }
  if (coin(policy.crop_p)) {
    std::size_t cw = 0, ch = 0;
    while (cw == 0 || ch == 0) {
      cw = static_cast<std::size_t>(std::lround(uniform(policy.crop_min_side, 1.0) * s.image.width));
      ch = static_cast<std::size_t>(std::lround(uniform(policy.crop_min_side, 1.0) * s.image.height));
      cw = std::clamp(cw, std::min(policy.min_side, s.image.width), s.image.width);
      ch = std::clamp(ch, std::min(policy.min_side, s.image.height), s.image.height);
    }
    const auto cx = static_cast<std::size_t>(rng() % (s.image.width - cw + 1));
    const auto cy = static_cast<std::size_t>(rng() % (s.image.height - ch + 1));
    if (cw != s.image.width || ch != s.image.height) {
      push(GeomStep::Kind::crop, cw, ch, cx, cy);
      s.image = crop_image(s.image, cx, cy, cw, ch);
    }
  }
  if (coin(policy.erase_p)) {
    const auto patches = 1 + static_cast<std::size_t>(rng() % policy.erase_max_patches);
    const double area = static_cast<double>(s.image.width * s.image.height);
    for (std::size_t i = 0; i < patches; ++i) {
      const double frac = uniform(0.02, policy.erase_max_area);
      const double aspect = std::exp(uniform(std::log(0.5), std::log(2.0)));
      auto pw = static_cast<std::size_t>(std::sqrt(frac * area * aspect));
      auto ph = static_cast<std::size_t>(std::sqrt(frac * area / aspect));
      pw = std::clamp<std::size_t>(pw, 1, s.image.width);
      ph = std::clamp<std::size_t>(ph, 1, s.image.height);
      const auto px = static_cast<std::size_t>(rng() % (s.image.width - pw + 1));
      const auto py = static_cast<std::size_t>(rng() % (s.image.height - ph + 1));
      erase_patch(s.image, px, py, pw, ph, unit(rng));
    }
  }
  if (coin(policy.blur_p)) s.image = gaussian_blur(s.image, uniform(policy.blur_sigma_min, policy.blur_sigma_max));
  s.targets = forward_boxes(s.record, s.original);
  return s;
}

}  // namespace dssl
