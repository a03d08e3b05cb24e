#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "dssl/data.hpp"
#include "dssl/rng.hpp"

namespace dssl {

namespace {

struct Rect {
  std::size_t x = 0, y = 0, w = 0, h = 0;
  bool overlaps(const Rect& o, std::size_t margin) const {
    return x < o.x + o.w + margin && o.x < x + w + margin && y < o.y + o.h + margin && o.y < y + h + margin;
  }
};

class Page {
 public:
  Page(std::size_t w, std::size_t h, std::mt19937_64& rng) : img_(h, w), rng_(rng) {}

  std::size_t uniform(std::size_t lo, std::size_t hi) {  // inclusive
    return lo + static_cast<std::size_t>(rng_() % (hi - lo + 1));
  }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

  bool place(std::size_t w, std::size_t h, Rect& out, std::size_t margin = 3) {
    constexpr std::size_t kEdge = 2;
    if (w + 2 * kEdge > img_.width || h + 2 * kEdge > img_.height) return false;
    for (int attempt = 0; attempt < 40; ++attempt) {
      Rect r{uniform(kEdge, img_.width - kEdge - w), uniform(kEdge, img_.height - kEdge - h), w, h};
      bool free = true;
      for (const auto& o : taken_) free = free && !r.overlaps(o, margin);
      if (free) {
        taken_.push_back(r);
        out = r;
        return true;
      }
    }
    return false;
  }

  void fill(std::size_t x, std::size_t y, std::size_t w, std::size_t h, double v) {
    for (std::size_t r = y; r < std::min(y + h, img_.height); ++r)
      for (std::size_t c = x; c < std::min(x + w, img_.width); ++c) img_.at(r, c) = std::min(img_.at(r, c), v);
  }

  // Ruled grid with partly filled cells; ink spans exactly the rect.
  void table(const Rect& r) {
    const double ink = real(0.0, 0.25);
    const std::size_t rows = uniform(2, std::min<std::size_t>(6, r.h / 4));
    const std::size_t cols = uniform(2, std::min<std::size_t>(5, r.w / 6));
    fill(r.x, r.y, r.w, 1, ink);
    fill(r.x, r.y + r.h - 1, r.w, 1, ink);
    fill(r.x, r.y, 1, r.h, ink);
    fill(r.x + r.w - 1, r.y, 1, r.h, ink);
    std::vector<std::size_t> ys{r.y}, xs{r.x};
    for (std::size_t i = 1; i < rows; ++i) ys.push_back(r.y + i * (r.h - 1) / rows);
    for (std::size_t j = 1; j < cols; ++j) xs.push_back(r.x + j * (r.w - 1) / cols);
    ys.push_back(r.y + r.h - 1);
    xs.push_back(r.x + r.w - 1);
    const bool vertical_rules = real(0.0, 1.0) < 0.8;
    for (std::size_t i = 1; i + 1 < ys.size(); ++i) fill(r.x, ys[i], r.w, 1, ink);
    if (vertical_rules)
      for (std::size_t j = 1; j + 1 < xs.size(); ++j) fill(xs[j], r.y, 1, r.h, ink);
    const double text = real(0.3, 0.6);
    for (std::size_t i = 0; i + 1 < ys.size(); ++i)
      for (std::size_t j = 0; j + 1 < xs.size(); ++j) {
        const std::size_t cw = xs[j + 1] - xs[j], ch = ys[i + 1] - ys[i];
        if (cw < 5 || ch < 3 || real(0.0, 1.0) < 0.25) continue;
        const std::size_t len = uniform(1, cw - 3);
        fill(xs[j] + 2, ys[i] + ch / 2, len, 1, text);
      }
  }

  // Bracketed grid of dots: table-like layout without rules.
  void matrix(const Rect& r) {
    const double ink = real(0.0, 0.3);
    for (std::size_t side = 0; side < 2; ++side) {
      const std::size_t x = side == 0 ? r.x : r.x + r.w - 1;
      fill(x, r.y, 1, r.h, ink);
      const std::size_t serif_x = side == 0 ? r.x : r.x + r.w - 2;
      fill(serif_x, r.y, 2, 1, ink);
      fill(serif_x, r.y + r.h - 1, 2, 1, ink);
    }
    const std::size_t rows = uniform(2, std::max<std::size_t>(2, r.h / 5));
    const std::size_t cols = uniform(2, std::max<std::size_t>(2, (r.w - 4) / 6));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t cy = r.y + (2 * i + 1) * r.h / (2 * rows);
        const std::size_t cx = r.x + 2 + (2 * j + 1) * (r.w - 4) / (2 * cols);
        fill(cx - 1, cy, 2 + uniform(0, 1), 1 + uniform(0, 1), ink);
      }
  }

  void text_block(const Rect& r) {
    const double ink = real(0.2, 0.55);
    for (std::size_t y = r.y; y + 2 <= r.y + r.h; y += 4) {
      std::size_t x = r.x;
      const std::size_t end = r.x + (y + 4 > r.y + r.h ? r.w * 2 / 3 : r.w);
      while (x + 2 < end) {
        const std::size_t word = std::min(uniform(2, 8), end - x);
        fill(x, y, word, 2, ink);
        x += word + uniform(1, 3);
      }
    }
  }

  Image finish(double noise) {
    std::normal_distribution<double> n(0.0, noise);
    for (auto& p : img_.pixels) {
      const double v = std::clamp(p + (noise > 0 ? n(rng_) : 0.0), 0.0, 1.0);
      p = std::round(v * 255.0) / 255.0;
    }
    return std::move(img_);
  }

 private:
  Image img_;
  std::mt19937_64& rng_;
  std::vector<Rect> taken_;
};

DatasetImage render_page(const SynthDocSpec& spec, std::size_t index) {
  std::mt19937_64 rng(derive_seed(spec.seed, {0x5a17, index}));
  std::size_t tables = spec.min_tables + static_cast<std::size_t>(rng() % (spec.max_tables - spec.min_tables + 1));
  while (true) {
    Page page(spec.width, spec.height, rng);
    std::vector<Rect> placed;
    bool ok = true;
    for (std::size_t t = 0; t < tables && ok; ++t) {
      const std::size_t w = page.uniform(16, std::max<std::size_t>(16, spec.width * 3 / 5));
      const std::size_t h = page.uniform(12, std::max<std::size_t>(12, spec.height * 2 / 5));
      Rect r;
      ok = page.place(w, h, r);
      if (ok) placed.push_back(r);
    }
    if (!ok) {
      --tables;  // unsatisfiable: regenerate with one table fewer
      continue;
    }
    for (const auto& r : placed) page.table(r);
    if (page.real(0.0, 1.0) < spec.confuser_prob) {
      Rect r;
      if (page.place(page.uniform(16, 36), page.uniform(12, 28), r)) page.matrix(r);
    }
    const std::size_t blocks = page.uniform(spec.min_text_blocks, spec.max_text_blocks);
    for (std::size_t b = 0; b < blocks; ++b) {
      Rect r;
      if (page.place(page.uniform(14, std::max<std::size_t>(14, spec.width * 2 / 3)), page.uniform(2, 14), r))
        page.text_block(r);
    }
    DatasetImage img;
    img.id = index + 1;
    img.file_name = "page_" + std::to_string(index + 1) + ".pgm";
    img.width = spec.width;
    img.height = spec.height;
    img.image = page.finish(spec.noise);
    for (const auto& r : placed)
      img.annotations.push_back({0, {static_cast<double>(r.x), static_cast<double>(r.y),
                                     static_cast<double>(r.x + r.w), static_cast<double>(r.y + r.h)}});
    return img;
  }
}

}  // namespace

void SynthDocSpec::validate() const {
  if (width < 32 || height < 32) throw std::invalid_argument("synth: page must be at least 32x32");
  if (min_tables > max_tables || min_text_blocks > max_text_blocks) throw std::invalid_argument("synth: bad ranges");
  if (!(confuser_prob >= 0.0 && confuser_prob <= 1.0)) throw std::invalid_argument("synth: confuser_prob in [0, 1]");
  if (!(noise >= 0.0 && noise < 1.0)) throw std::invalid_argument("synth: noise in [0, 1)");
}

Dataset generate(const SynthDocSpec& spec, std::size_t count) {
  spec.validate();
  if (count < 10) throw std::invalid_argument("generate: count must be at least 10");
  Dataset ds;
  ds.images.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.images.push_back(render_page(spec, i));
  return ds;
}

}  // namespace dssl
