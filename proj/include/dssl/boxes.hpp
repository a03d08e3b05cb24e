#pragma once

#include <cstddef>
#include <vector>

namespace dssl {

/// Normalized center-size box, all coordinates in [0, 1].
struct BoxCxcywh {
  double cx = 0, cy = 0, w = 0, h = 0;
  bool operator==(const BoxCxcywh&) const = default;
};

/// Class-labelled normalized box.
struct Target {
  std::size_t cls = 0;
  BoxCxcywh box;
  bool operator==(const Target&) const = default;
};

/// Corner-form box (x1, y1) - (x2, y2); absolute pixels unless stated.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool operator==(const Box&) const = default;
};

Box to_corners(const BoxCxcywh& b, double image_width = 1.0, double image_height = 1.0);
BoxCxcywh to_cxcywh(const Box& b, double image_width = 1.0, double image_height = 1.0);

/// Generalized IoU of two corner boxes; in [-1, 1]. Degenerate (zero-area)
/// boxes are allowed.
double generalized_iou(const Box& a, const Box& b);

/// Grayscale image, row-major, values in [0, 1] (1 = white paper).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 1.0) : height(h), width(w), pixels(h * w, fill) {}
  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool operator==(const Image&) const = default;
};

}  // namespace dssl
