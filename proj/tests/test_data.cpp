#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dssl/data.hpp"

using namespace dssl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dssl_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

}  // namespace

TEST_CASE("pages without tables have no annotations") {
  SynthDocSpec spec;
  spec.max_tables = 0;
  auto ds = generate(spec, 12);
  for (const auto& img : ds.images) CHECK(img.annotations.empty());
  CHECK_THROWS(generate(spec, 9));
}

TEST_CASE("generation is deterministic per seed") {
  SynthDocSpec spec;
  spec.seed = 7;
  auto a = generate(spec, 15), b = generate(spec, 15);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.images[i].image == b.images[i].image);
    REQUIRE(a.images[i].annotations.size() == b.images[i].annotations.size());
    for (std::size_t k = 0; k < a.images[i].annotations.size(); ++k)
      CHECK(a.images[i].annotations[k].box == b.images[i].annotations[k].box);
  }
  spec.seed = 8;
  CHECK(!(generate(spec, 15).images[0].image == a.images[0].image));
}

TEST_CASE("default corpus statistics and box tightness") {
  SynthDocSpec spec;
  spec.noise = 0.0;
  auto ds = generate(spec, 300);
  std::size_t tables = 0;
  for (const auto& img : ds.images) {
    tables += img.annotations.size();
    for (std::size_t i = 0; i < img.annotations.size(); ++i) {
      const Box& b = img.annotations[i].box;
      CHECK(b.area() >= 64.0);
      for (std::size_t j = i + 1; j < img.annotations.size(); ++j) CHECK(iou(b, img.annotations[j].box) == 0.0);
      // Tight: every border row and column of the box holds ink.
      const auto x1 = static_cast<std::size_t>(b.x1), y1 = static_cast<std::size_t>(b.y1);
      const auto x2 = static_cast<std::size_t>(b.x2) - 1, y2 = static_cast<std::size_t>(b.y2) - 1;
      CHECK(img.image.at(y1, (x1 + x2) / 2) < 0.5);
      CHECK(img.image.at(y2, (x1 + x2) / 2) < 0.5);
      CHECK(img.image.at((y1 + y2) / 2, x1) < 0.5);
      CHECK(img.image.at((y1 + y2) / 2, x2) < 0.5);
      // Just outside the box is paper.
      if (x1 > 0) CHECK(img.image.at((y1 + y2) / 2, x1 - 1) == 1.0);
      if (y2 + 1 < img.height) CHECK(img.image.at(y2 + 1, (x1 + x2) / 2) == 1.0);
    }
  }
  const double mean = static_cast<double>(tables) / 300.0;
  CHECK(mean > 1.3);
  CHECK(mean < 1.7);
}

TEST_CASE("split sizes and determinism") {
  auto ds = generate(SynthDocSpec{}, 40);
  auto full = split(ds, 1.0, 1);
  CHECK(full.indices(Split::unlabeled).empty());
  CHECK(full.indices(Split::val).size() == 6);
  CHECK(full.indices(Split::test).size() == 6);

  // 286 images: 43 val, 43 test, 200 train -> 20 labeled.
  Dataset big;
  big.images.resize(286);
  auto s = split(big, 0.10, 3);
  CHECK(s.indices(Split::labeled).size() == 20);
  CHECK(s.indices(Split::unlabeled).size() == 180);

  auto a = split(big, 0.10, 4), b = split(big, 0.10, 4), c = split(big, 0.10, 5);
  CHECK(a.splits == b.splits);
  CHECK(a.splits != c.splits);
  for (Split sp : {Split::labeled, Split::unlabeled, Split::val, Split::test})
    CHECK(a.indices(sp).size() == c.indices(sp).size());
  CHECK_THROWS(split(big, 0.0, 1));
}

TEST_CASE("annotation file loading") {
  auto dir = scratch("ann");
  write_text(dir / "a.json", R"({"images":[{"id":3,"width":50,"height":80,"file_name":"x.pgm","extra":1}],
    "annotations":[{"id":1,"image_id":3,"category_id":9,"bbox":[10,20,30,40]},
                   {"id":2,"image_id":3,"category_id":9,"bbox":[1,1,0,5]}],
    "categories":[{"id":9,"name":"table"}]})");
  auto ds = load_annotations(dir / "a.json");
  REQUIRE(ds.size() == 1);
  REQUIRE(ds.images[0].annotations.size() == 1);
  CHECK(ds.images[0].annotations[0].box == Box{10, 20, 40, 60});
  CHECK(ds.skipped_annotations == 1);

  write_text(dir / "b.json", R"({"images":[{"id":1,"width":5,"height":5,"file_name":"y"}],"annotations":[],
    "categories":[{"id":1,"name":"table"}]})");
  CHECK(load_annotations(dir / "b.json").images[0].annotations.empty());

  write_text(dir / "c.json", R"({"images":[{"id":1,"width":5,"file_name":"y"}],"annotations":[],"categories":[]})");
  try {
    load_annotations(dir / "c.json");
    FAIL("expected rejection");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("images[0]") != std::string::npos);
    CHECK(std::string(e.what()).find("height") != std::string::npos);
  }
}

TEST_CASE("annotation save and load round trip") {
  auto dir = scratch("roundtrip");
  auto ds = generate(SynthDocSpec{}, 10);
  save_annotations(ds, dir / "ann.json");
  auto back = load_annotations(dir / "ann.json");
  REQUIRE(back.size() == ds.size());
  CHECK(back.categories == ds.categories);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back.images[i].id == ds.images[i].id);
    CHECK(back.images[i].file_name == ds.images[i].file_name);
    REQUIRE(back.images[i].annotations.size() == ds.images[i].annotations.size());
    for (std::size_t k = 0; k < ds.images[i].annotations.size(); ++k)
      CHECK(back.images[i].annotations[k].box == ds.images[i].annotations[k].box);
  }
}

TEST_CASE("pgm codec") {
  const std::string bytes = std::string("P5\n2 2\n255\n") + '\x00' + '\x40' + '\x80' + '\xff';
  auto img = decode_pgm(bytes);
  CHECK(img.width == 2);
  CHECK(img.height == 2);
  CHECK(img.at(1, 1) == 1.0);
  CHECK(encode_pgm(img) == bytes);
  CHECK_THROWS(decode_pgm("P5\n2 2\n65535\n...."));
  CHECK_THROWS(decode_pgm("P6\n2 2\n255\n1234"));
  CHECK_THROWS(decode_pgm("P5\n2 2\n255\n123"));
  CHECK(decode_pgm("P5 # comment\n2 1 255\nab").width == 2);

  auto dir = scratch("pgm");
  auto page = generate(SynthDocSpec{}, 10).images[0].image;
  write_pgm(dir / "p.pgm", page);
  CHECK(read_pgm(dir / "p.pgm") == page);
}

TEST_CASE("dataset directory round trip") {
  auto dir = scratch("dir");
  auto ds = split(generate(SynthDocSpec{}, 20), 0.5, 1);
  save_dataset(ds, dir);
  auto back = load_dataset(dir);
  CHECK(back.splits == ds.splits);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(back.images[i].image == ds.images[i].image);

  std::vector<Detection> dets{{2, 0, {1, 2, 11, 22}, 0.75}};
  save_results(dets, ds, dir / "results.json");
  auto rd = load_results(dir / "results.json", ds);
  REQUIRE(rd.size() == 1);
  CHECK(rd[0].image == 2);
  CHECK(rd[0].box == Box{1, 2, 11, 22});
  CHECK(rd[0].score == 0.75);
}

TEST_CASE("targets are normalized") {
  DatasetImage img;
  img.width = 100;
  img.height = 50;
  img.annotations = {{0, {10, 10, 30, 20}}};
  auto t = targets_of(img);
  CHECK(t[0].box.cx == doctest::Approx(0.2));
  CHECK(t[0].box.cy == doctest::Approx(0.3));
  CHECK(t[0].box.w == doctest::Approx(0.2));
  CHECK(t[0].box.h == doctest::Approx(0.2));
}
