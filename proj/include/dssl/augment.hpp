#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "dssl/boxes.hpp"

namespace dssl {

/// One geometric step, in absolute pixels of its input and output frames.
struct GeomStep {
  enum class Kind { hflip, resize, crop };
  Kind kind = Kind::hflip;
  std::size_t in_width = 0, in_height = 0;
  std::size_t out_width = 0, out_height = 0;
  std::size_t crop_x = 0, crop_y = 0;  // crop window origin in the input frame

  bool operator==(const GeomStep&) const = default;
};

/// Geometric history of an augmented image. A flip pushed directly after a
/// flip cancels it, so double flips leave an empty record.
struct TransformRecord {
  std::size_t width = 0, height = 0;  // original frame
  std::vector<GeomStep> steps;

  std::size_t out_width() const { return steps.empty() ? width : steps.back().out_width; }
  std::size_t out_height() const { return steps.empty() ? height : steps.back().out_height; }
  void push(const GeomStep& step);
  bool operator==(const TransformRecord&) const = default;
};

/// Original-frame normalized boxes to the augmented frame. Boxes entirely
/// outside a crop window are dropped, partial ones clipped.
std::vector<Target> forward_boxes(const TransformRecord& record, std::span<const Target> boxes);

/// Augmented-frame normalized boxes back to the original frame. Exact up to
/// rounding for flips and resizes; crops map into the window's pre-image.
std::vector<Target> invert_boxes(const TransformRecord& record, std::span<const Target> boxes);

struct AugPolicy {
  enum class Kind { weak, strong };
  Kind kind = Kind::weak;
  double flip_p = 0.5;
  double resize_p = 0.8;
  double resize_min = 0.7, resize_max = 1.3;
  double erase_p = 0.7;
  std::size_t erase_max_patches = 3;
  double erase_max_area = 0.15;  // per patch, fraction of the image
  double crop_p = 0.5;
  double crop_min_side = 0.7;  // retained fraction of each side
  double blur_p = 0.5;
  double blur_sigma_min = 0.5, blur_sigma_max = 1.5;
  double grayscale_p = 1.0;  // identity on grayscale input
  std::size_t min_side = 32;  // resize and crop never go below this

  static AugPolicy weak();
  static AugPolicy strong();
  void validate() const;
};

struct AugmentedSample {
  Image image;
  std::vector<Target> targets;   // augmented frame
  std::vector<Target> original;  // targets as given to apply()
  TransformRecord record;
};

/// Applies the policy's ops in order flip, resize, crop, erase, blur.
AugmentedSample apply(const AugPolicy& policy, const Image& image, std::span<const Target> targets,
                      std::mt19937_64& rng);

// Individual operations. Geometric ones return the step they performed.
Image hflip_image(const Image& image);
Image resize_image(const Image& image, std::size_t width, std::size_t height);
Image crop_image(const Image& image, std::size_t x, std::size_t y, std::size_t width, std::size_t height);
Image gaussian_blur(const Image& image, double sigma);
void erase_patch(Image& image, std::size_t x, std::size_t y, std::size_t width, std::size_t height, double fill);

/// Mirrors an augmented sample once more; composes with its record.
AugmentedSample hflip(const AugmentedSample& sample);

}  // namespace dssl
