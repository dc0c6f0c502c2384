#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lmdet/dataset.hpp"
#include "lmdet/scenegen.hpp"

using namespace lmdet;
namespace fs = std::filesystem;

TEST_CASE("scene generation is deterministic per seed") {
  Rng a(404), b(404);
  const Scene sa = generate_scene(a), sb = generate_scene(b);
  REQUIRE(sa.objects.size() == sb.objects.size());
  for (size_t i = 0; i < sa.objects.size(); ++i) {
    CHECK(sa.objects[i].shape == sb.objects[i].shape);
    CHECK(sa.objects[i].color == sb.objects[i].color);
    CHECK(sa.objects[i].box.cx == sb.objects[i].box.cx);
  }
}

TEST_CASE("ten thousand scenes satisfy the invariants") {
  Rng base(1);
  for (uint64_t i = 0; i < 10000; ++i) {
    Rng rng = base.fork(i);
    const Scene s = generate_scene(rng);
    REQUIRE(s.objects.size() >= 1);
    REQUIRE(s.objects.size() <= 4);
    for (size_t a = 0; a < s.objects.size(); ++a)
      for (size_t b = a + 1; b < s.objects.size(); ++b) {
        CHECK(iou(s.objects[a].box, s.objects[b].box) <= 0.1);
        const bool same_identity = s.objects[a].shape == s.objects[b].shape &&
                                   s.objects[a].color == s.objects[b].color;
        CHECK(!same_identity);
      }
  }
}

TEST_CASE("render is pure and tight against the boxes") {
  Rng rng(77);
  const Scene scene = generate_scene(rng);
  const Image img1 = render(scene);
  const Image img2 = render(scene);
  CHECK(img1.pixels == img2.pixels);

  // single-object scenes: the colored-pixel mask recovers the box within a pixel
  Rng base(555);
  int checked = 0;
  for (uint64_t i = 0; checked < 50; ++i) {
    Rng r = base.fork(i);
    const Scene s = generate_scene(r);
    if (s.objects.size() != 1) continue;
    const Image img = render(s);
    std::vector<uint8_t> mask(size_t(img.width * img.height), 0);
    for (i64 y = 0; y < img.height; ++y)
      for (i64 x = 0; x < img.width; ++x) {
        const uint8_t* p = img.at(x, y);
        if (!(p[0] == 235 && p[1] == 235 && p[2] == 235)) mask[size_t(y * img.width + x)] = 1;
      }
    const Box got = mask_to_box(mask, img.height, img.width);
    const Box want = s.objects[0].box;
    const double tol = 1.0 / double(img.width);
    const Corners cg = to_corners(got), cw = to_corners(want);
    for (int c = 0; c < 4; ++c) CHECK(std::abs(cg[size_t(c)] - cw[size_t(c)]) <= tol + 1e-9);
    ++checked;
  }

  // background outside every box stays untouched
  const Image img = render(scene);
  for (i64 y = 0; y < img.height; ++y)
    for (i64 x = 0; x < img.width; ++x) {
      const double px = (x + 0.5) / double(img.width), py = (y + 0.5) / double(img.height);
      bool inside_any = false;
      for (const auto& o : scene.objects) {
        const Corners c = to_corners(o.box);
        if (px >= c[0] && px <= c[2] && py >= c[1] && py <= c[3]) inside_any = true;
      }
      if (!inside_any) {
        const uint8_t* p = img.at(x, y);
        CHECK(p[0] == 235);
        CHECK(p[1] == 235);
        CHECK(p[2] == 235);
      }
    }
}

TEST_CASE("every caption resolves to exactly one object") {
  Rng base(31337);
  int rec_checked = 0, rd_checked = 0;
  for (uint64_t i = 0; rec_checked + rd_checked < 1000; ++i) {
    Rng rng = base.fork(i);
    const Scene scene = generate_scene(rng);
    const auto raws = make_samples(scene, {0.0, 0.5, 0.25, 0.25, 0.0}, rng, 2);
    for (const auto& raw : raws) {
      // brute-force referent resolution: re-enumerate all candidates for all
      // targets and find the caption among them
      const std::string phrase = raw.data_type == DataType::RdLong
                                     ? raw.question
                                     : raw.caption;
      int matches_total = 0;
      int matched_target = -1;
      for (size_t target = 0; target < scene.objects.size(); ++target) {
        auto candidates = raw.data_type == DataType::Rec
                              ? rec_caption_candidates(scene, int(target))
                              : rd_phrase_candidates(scene, int(target));
        for (const auto& cand : candidates) {
          const bool used = raw.data_type == DataType::RdLong
                                ? phrase.find(cand.phrase) != std::string::npos
                                : cand.phrase == phrase;
          if (used && cand.matches.size() == 1 && cand.matches[0] == int(target)) {
            matches_total = int(cand.matches.size());
            matched_target = cand.matches[0];
          }
        }
      }
      REQUIRE(matched_target >= 0);
      CHECK(matches_total == 1);
      REQUIRE(raw.gt_boxes.size() == 1);
      CHECK(raw.gt_boxes[0].cx == scene.objects[size_t(matched_target)].box.cx);
      if (raw.data_type == DataType::Rec) ++rec_checked;
      else ++rd_checked;
    }
  }
  CHECK(rec_checked > 0);
  CHECK(rd_checked > 0);
}

TEST_CASE("od annotations use present categories and all their boxes") {
  Rng base(99);
  for (uint64_t i = 0; i < 200; ++i) {
    Rng rng = base.fork(i);
    const Scene scene = generate_scene(rng);
    const auto raws = make_samples(scene, {1.0, 0.0, 0.0, 0.0, 0.0}, rng, 1);
    REQUIRE(raws.size() == 1);
    const auto& raw = raws[0];
    size_t expected = 0;
    bool present = false;
    for (const auto& o : scene.objects) {
      if (shape_word(o.shape) == raw.category) {
        ++expected;
        present = true;
      }
    }
    CHECK(present);
    CHECK(raw.gt_boxes.size() == expected);
  }
}

TEST_CASE("dataset generation is byte-identical across runs") {
  const fs::path root = fs::temp_directory_path() / "lmdet_gen_test";
  fs::remove_all(root);
  GenConfig cfg;
  cfg.seed = 2024;
  cfg.train_count = 30;
  cfg.val_scenes = 5;
  auto read_file = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  cfg.out_dir = (root / "a").string();
  const auto m1 = generate_dataset(cfg);
  cfg.out_dir = (root / "b").string();
  const auto m2 = generate_dataset(cfg);
  CHECK(manifest_to_json(m1) == manifest_to_json(m2));
  CHECK(read_file(root / "a" / "train.jsonl") == read_file(root / "b" / "train.jsonl"));
  CHECK(read_file(root / "a" / "val.jsonl") == read_file(root / "b" / "val.jsonl"));
  CHECK(read_file(root / "a" / "manifest.json") == read_file(root / "b" / "manifest.json"));
  // train/val splits are disjoint by construction; ids never collide
  const auto train = read_jsonl((root / "a" / "train.jsonl").string());
  const auto val = read_jsonl((root / "a" / "val.jsonl").string());
  CHECK(train.size() == 30);
  for (const auto& t : train)
    for (const auto& v : val) CHECK(t.image != v.image);
  // jsonl round trip
  const auto line = sample_to_json(train[0]);
  const auto back = sample_from_json(line);
  CHECK(back.id == train[0].id);
  CHECK(back.conversation[0].text == train[0].conversation[0].text);
  CHECK(back.boxes.size() == train[0].boxes.size());
  fs::remove_all(root);
}
