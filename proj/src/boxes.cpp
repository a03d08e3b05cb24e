#include "dssl/boxes.hpp"

#include <algorithm>

namespace dssl {

Box to_corners(const BoxCxcywh& b, double image_width, double image_height) {
  return {(b.cx - 0.5 * b.w) * image_width, (b.cy - 0.5 * b.h) * image_height, (b.cx + 0.5 * b.w) * image_width,
          (b.cy + 0.5 * b.h) * image_height};
}

BoxCxcywh to_cxcywh(const Box& b, double image_width, double image_height) {
  return {0.5 * (b.x1 + b.x2) / image_width, 0.5 * (b.y1 + b.y2) / image_height, (b.x2 - b.x1) / image_width,
          (b.y2 - b.y1) / image_height};
}

double generalized_iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  const double iou = uni > 0.0 ? inter / uni : 0.0;
  return hull > 0.0 ? iou - (hull - uni) / hull : iou;
}

}  // namespace dssl
