#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "dssl/data.hpp"
#include "dssl/rng.hpp"
#include "json.hpp"

namespace dssl {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw std::runtime_error(where + ": missing required field '" + key + "'");
  return obj.at(key);
}

template <class T>
T require_as(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw std::runtime_error(where + "." + key + ": wrong type");
  }
}

json dump_dataset_json(const Dataset& ds) {
  json images = json::array(), anns = json::array(), cats = json::array();
  std::size_t ann_id = 1;
  for (const auto& img : ds.images) {
    images.push_back({{"id", img.id}, {"width", img.width}, {"height", img.height}, {"file_name", img.file_name}});
    for (const auto& a : img.annotations) {
      anns.push_back({{"id", ann_id++},
                      {"image_id", img.id},
                      {"category_id", ds.categories.at(a.cls).id},
                      {"bbox", {a.box.x1, a.box.y1, a.box.width(), a.box.height()}}});
    }
  }
  for (const auto& c : ds.categories) cats.push_back({{"id", c.id}, {"name", c.name}});
  return {{"images", images}, {"annotations", anns}, {"categories", cats}};
}

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::unassigned: return "unassigned";
    case Split::labeled: return "labeled";
    case Split::unlabeled: return "unlabeled";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unassigned";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::unassigned, Split::labeled, Split::unlabeled, Split::val, Split::test})
    if (split_name(s) == name) return s;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (split_of(i) == s) out.push_back(i);
  return out;
}

std::vector<Target> targets_of(const DatasetImage& img) {
  std::vector<Target> out;
  for (const auto& a : img.annotations)
    out.push_back({a.cls, to_cxcywh(a.box, static_cast<double>(img.width), static_cast<double>(img.height))});
  return out;
}

Dataset split(const Dataset& dataset, double labeled_fraction, std::uint64_t seed) {
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) throw std::invalid_argument("split: fraction in (0, 1]");
  const std::size_t n = dataset.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, {0x5b11}));
  // Fisher-Yates with explicit draws: identical across standard libraries.
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  const auto val = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
  const auto test = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
  if (val + test >= n) throw std::invalid_argument("split: dataset too small");
  const std::size_t train = n - val - test;
  const auto labeled = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(labeled_fraction * static_cast<double>(train))), 1, train);
  Dataset out = dataset;
  out.splits.assign(n, Split::unlabeled);
  for (std::size_t k = 0; k < n; ++k) {
    Split s = Split::unlabeled;
    if (k < val) s = Split::val;
    else if (k < val + test) s = Split::test;
    else if (k < val + test + labeled) s = Split::labeled;
    out.splits[order[k]] = s;
  }
  return out;
}

Dataset load_annotations(const fs::path& file) {
  json root;
  try {
    root = json::parse(read_file(file));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(file.string() + ": " + e.what());
  }
  Dataset ds;
  ds.categories.clear();
  std::map<std::size_t, std::size_t> cat_index, image_index;
  const auto& cats = require(root, "categories", "root");
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::string where = "categories[" + std::to_string(i) + "]";
    Category c{require_as<std::size_t>(cats[i], "id", where), require_as<std::string>(cats[i], "name", where)};
    cat_index[c.id] = ds.categories.size();
    ds.categories.push_back(c);
  }
  const auto& images = require(root, "images", "root");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string where = "images[" + std::to_string(i) + "]";
    DatasetImage img;
    img.id = require_as<std::size_t>(images[i], "id", where);
    img.width = require_as<std::size_t>(images[i], "width", where);
    img.height = require_as<std::size_t>(images[i], "height", where);
    img.file_name = require_as<std::string>(images[i], "file_name", where);
    image_index[img.id] = ds.images.size();
    ds.images.push_back(std::move(img));
  }
  const auto& anns = require(root, "annotations", "root");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string where = "annotations[" + std::to_string(i) + "]";
    require(anns[i], "id", where);
    const auto image_id = require_as<std::size_t>(anns[i], "image_id", where);
    const auto cat_id = require_as<std::size_t>(anns[i], "category_id", where);
    const auto bbox = require_as<std::vector<double>>(anns[i], "bbox", where);
    if (bbox.size() != 4) throw std::runtime_error(where + ".bbox: expected 4 numbers");
    if (!image_index.count(image_id)) throw std::runtime_error(where + ".image_id: unknown image");
    if (!cat_index.count(cat_id)) throw std::runtime_error(where + ".category_id: unknown category");
    if (!(bbox[2] > 0.0) || !(bbox[3] > 0.0)) {
      ++ds.skipped_annotations;
      continue;
    }
    ds.images[image_index[image_id]].annotations.push_back(
        {cat_index[cat_id], {bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]}});
  }
  return ds;
}

void save_annotations(const Dataset& dataset, const fs::path& file) {
  write_file(file, dump_dataset_json(dataset).dump(1) + "\n");
}

void save_results(const std::vector<Detection>& detections, const Dataset& dataset, const fs::path& file) {
  json out = json::array();
  for (const auto& d : detections) {
    out.push_back({{"image_id", dataset.images.at(d.image).id},
                   {"category_id", dataset.categories.at(d.cls).id},
                   {"bbox", {d.box.x1, d.box.y1, d.box.width(), d.box.height()}},
                   {"score", d.score}});
  }
  write_file(file, out.dump(1) + "\n");
}

std::vector<Detection> load_results(const fs::path& file, const Dataset& dataset) {
  const json root = json::parse(read_file(file));
  if (!root.is_array()) throw std::runtime_error(file.string() + ": results must be a JSON array");
  std::map<std::size_t, std::size_t> image_index, cat_index;
  for (std::size_t i = 0; i < dataset.size(); ++i) image_index[dataset.images[i].id] = i;
  for (std::size_t c = 0; c < dataset.categories.size(); ++c) cat_index[dataset.categories[c].id] = c;
  std::vector<Detection> out;
  for (std::size_t i = 0; i < root.size(); ++i) {
    const std::string where = "results[" + std::to_string(i) + "]";
    const auto image_id = require_as<std::size_t>(root[i], "image_id", where);
    const auto cat_id = require_as<std::size_t>(root[i], "category_id", where);
    const auto bbox = require_as<std::vector<double>>(root[i], "bbox", where);
    const auto score = require_as<double>(root[i], "score", where);
    if (bbox.size() != 4) throw std::runtime_error(where + ".bbox: expected 4 numbers");
    if (!image_index.count(image_id) || !cat_index.count(cat_id)) {
      throw std::runtime_error(where + ": unknown image or category");
    }
    out.push_back({image_index[image_id], cat_index[cat_id], {bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]},
                   score});
  }
  return out;
}

std::string encode_pgm(const Image& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.pixels.size());
  for (double v : image.pixels) out.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

Image decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (++digits > 9) throw std::runtime_error(std::string("pgm: ") + what + " too large");
    }
    if (digits == 0) throw std::runtime_error(std::string("pgm: malformed header, expected ") + what);
    return v;
  };
  if (bytes.substr(0, 2) != "P5") throw std::runtime_error("pgm: malformed header, expected P5 magic");
  pos = 2;
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (maxval != 255) throw std::runtime_error("pgm: only maxval 255 is supported, got " + std::to_string(maxval));
  if (w == 0 || h == 0) throw std::runtime_error("pgm: zero image size");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw std::runtime_error("pgm: malformed header after maxval");
  ++pos;
  if (bytes.size() - pos != w * h) throw std::runtime_error("pgm: pixel data size does not match the header");
  Image img(h, w);
  for (std::size_t i = 0; i < w * h; ++i) img.pixels[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  return img;
}

void write_pgm(const fs::path& path, const Image& image) { write_file(path, encode_pgm(image)); }

Image read_pgm(const fs::path& path) {
  try {
    return decode_pgm(read_file(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_manifest(const Dataset& dataset, const fs::path& file) {
  std::string out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out += "images/" + dataset.images[i].file_name + "\t" + std::string(split_name(dataset.split_of(i))) + "\t" +
           std::to_string(dataset.images[i].id) + "\n";
  }
  write_file(file, out);
}

void apply_manifest(Dataset& dataset, const fs::path& file) {
  std::map<std::size_t, std::size_t> index;
  for (std::size_t i = 0; i < dataset.size(); ++i) index[dataset.images[i].id] = i;
  std::vector<Split> splits(dataset.size(), Split::unassigned);
  std::istringstream in(read_file(file));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto t1 = line.find('\t'), t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos) {
      throw std::runtime_error(file.string() + ":" + std::to_string(line_no) + ": expected path, split and id");
    }
    const auto id = std::stoull(line.substr(t2 + 1));
    if (!index.count(id)) throw std::runtime_error(file.string() + ":" + std::to_string(line_no) + ": unknown id");
    splits[index[id]] = parse_split(line.substr(t1 + 1, t2 - t1 - 1));
  }
  dataset.splits = std::move(splits);
}

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir / "images");
  for (const auto& img : dataset.images) write_pgm(dir / "images" / img.file_name, img.image);
  save_annotations(dataset, dir / "annotations.json");
  write_manifest(dataset, dir / "manifest.tsv");
}

Dataset load_dataset(const fs::path& dir) {
  Dataset ds = load_annotations(dir / "annotations.json");
  for (auto& img : ds.images) {
    img.image = read_pgm(dir / "images" / img.file_name);
    if (img.image.width != img.width || img.image.height != img.height) {
      throw std::runtime_error(img.file_name + ": image size differs from its annotation record");
    }
  }
  if (fs::exists(dir / "manifest.tsv")) apply_manifest(ds, dir / "manifest.tsv");
  return ds;
}

}  // namespace dssl
