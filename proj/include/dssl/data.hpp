#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dssl/boxes.hpp"
#include "dssl/metrics.hpp"

namespace dssl {

struct SynthDocSpec {
  std::size_t width = 96;
  std::size_t height = 96;
  std::size_t min_tables = 0;
  std::size_t max_tables = 3;
  std::size_t min_text_blocks = 1;
  std::size_t max_text_blocks = 4;
  double confuser_prob = 0.35;  // chance of one matrix-like confuser per page
  double noise = 0.03;          // Gaussian pixel noise std
  std::uint64_t seed = 0;

  void validate() const;
};

struct Category {
  std::size_t id = 1;
  std::string name = "table";
  bool operator==(const Category&) const = default;
};

enum class Split { unassigned, labeled, unlabeled, val, test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct DatasetImage {
  std::size_t id = 0;
  std::string file_name;
  std::size_t width = 0, height = 0;
  Image image;  // empty until loaded
  std::vector<Annotation> annotations;  // class index, corner box in pixels
};

struct Dataset {
  std::vector<DatasetImage> images;
  std::vector<Category> categories{Category{}};
  std::vector<Split> splits;  // parallel to images; empty means unassigned
  std::size_t skipped_annotations = 0;

  std::size_t size() const { return images.size(); }
  Split split_of(std::size_t i) const { return splits.empty() ? Split::unassigned : splits[i]; }
  std::vector<std::size_t> indices(Split s) const;
};

/// Normalized targets of one image.
std::vector<Target> targets_of(const DatasetImage& img);

/// Synthetic pages: ruled-grid tables (annotated with tight boxes), text
/// lines, and unannotated bracketed dot matrices. Deterministic per seed.
Dataset generate(const SynthDocSpec& spec, std::size_t count);

/// Carves 15% validation and 15% test images, then labels
/// max(1, round(fraction * train)) of the remainder.
Dataset split(const Dataset& dataset, double labeled_fraction, std::uint64_t seed);

// Annotation interchange (images / annotations / categories JSON).
Dataset load_annotations(const std::filesystem::path& file);
void save_annotations(const Dataset& dataset, const std::filesystem::path& file);

/// Detection results as [{image_id, category_id, bbox [x, y, w, h], score}].
void save_results(const std::vector<Detection>& detections, const Dataset& dataset, const std::filesystem::path& file);
std::vector<Detection> load_results(const std::filesystem::path& file, const Dataset& dataset);

// Binary PGM (P5, maxval 255). Pixels are stored as round(255 v).
std::string encode_pgm(const Image& image);
Image decode_pgm(std::string_view bytes);
void write_pgm(const std::filesystem::path& path, const Image& image);
Image read_pgm(const std::filesystem::path& path);

/// Tab-separated manifest: one "path<TAB>split<TAB>id" line per image.
void write_manifest(const Dataset& dataset, const std::filesystem::path& file);
/// Applies a manifest's split column to a dataset with matching ids.
void apply_manifest(Dataset& dataset, const std::filesystem::path& file);

/// Directory layout: annotations.json, manifest.tsv, images/<file_name>.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace dssl
