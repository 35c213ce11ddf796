#include "doctest.h"

#include <fstream>
#include <set>

#include "detgan/datapipe.hpp"
#include "support.hpp"

using namespace detgan;
using detgan::test::shared_detector;

TEST_SUITE("datapipe") {
  TEST_CASE("scenes are seeded and annotated") {
    const auto a = render_scene(SceneConfig{}, 3, "a");
    const auto b = render_scene(SceneConfig{}, 3, "a");
    CHECK(torch::equal(a.image, b.image));
    CHECK(a.image.sizes() == torch::IntArrayRef({3, 256, 256}));
    REQUIRE(a.annotations.size() == 1);
    CHECK(a.annotations[0].label == "diver");
    CHECK(a.annotations[0].box.w >= 40);
    CHECK(a.annotations[0].box.x_max() <= 256);
    CHECK(render_empty_scene(SceneConfig{}, 1, "e").annotations.empty());
    CHECK_FALSE(torch::equal(render_scene(SceneConfig{}, 4, "a").image, a.image));
    SceneConfig bad;
    bad.max_targets = 0;
    CHECK_THROWS_AS(render_scene(bad, 1, "x"), ConfigError);
  }

  TEST_CASE("distort: identity, channel scaling, determinism and range") {
    const auto img = render_scene(SceneConfig{}, 8, "x").image;
    DegradationParams id;
    CHECK(id.is_identity());
    CHECK(torch::equal(distort(img, id), img));

    auto red = torch::zeros({3, 32, 32});
    red[0].fill_(1.0);
    DegradationParams scale;
    scale.gains = {0.3, 1.0, 1.0};
    CHECK(distort(red, scale)[0].mean().item<double>() == doctest::Approx(0.3).epsilon(1e-6));

    const auto p = sample_degradation(DegradationRanges{}, 77);
    CHECK_FALSE(p.is_identity());
    const auto d1 = distort(img, p), d2 = distort(img, p);
    CHECK(torch::equal(d1, d2));
    CHECK(d1.sizes() == img.sizes());
    CHECK_FALSE(torch::equal(d1, img));
    for (std::uint64_t s = 0; s < 20; ++s) {
      auto q = sample_degradation(DegradationRanges{}, s);
      q.noise_sigma = 0.5;
      const auto out = distort(img, q);
      CHECK(out.min().item<double>() >= 0.0);
      CHECK(out.max().item<double>() <= 1.0);
    }
  }

  TEST_CASE("out-of-range degradation is rejected") {
    DegradationParams p;
    p.gains = {1.2, 1, 1};
    CHECK_THROWS_AS(distort(torch::zeros({3, 8, 8}), p), ConfigError);
    p = {};
    p.blur_radius = 16;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = {};
    p.noise_sigma = -0.1;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    DegradationRanges r;
    r.haze_min = 0.9;
    r.haze_max = 0.1;
    CHECK_THROWS_AS(r.validate(), ConfigError);
    CHECK_THROWS_AS(sample_degradation(r, 1), ConfigError);
  }

  TEST_CASE("paired corpus: cardinality, regeneration and rejection") {
    const auto clean = synthesize_scenes(SceneConfig{}, 100, 21, "c_");
    const auto corpus = build_paired_corpus(clean, 5);
    CHECK(corpus.samples.size() == 100);
    CHECK(corpus.manifest.entries.size() == 100);
    std::set<std::uint64_t> seeds;
    for (const auto& e : corpus.manifest.entries) seeds.insert(e.seed);
    CHECK(seeds.size() == 100);
    const auto again = regenerate_corpus(clean, corpus.manifest);
    for (std::size_t i = 0; i < 100; ++i) {
      CHECK(torch::equal(again.samples[i].distorted, corpus.samples[i].distorted));
      CHECK(corpus.samples[i].distorted.sizes() == corpus.samples[i].target.sizes());
    }
    SceneConfig two;
    two.min_targets = two.max_targets = 2;
    auto multi = synthesize_scenes(two, 1, 3, "m");
    REQUIRE(multi[0].annotations.size() == 2);
    CHECK_THROWS_AS(build_paired_corpus(multi, 1), DataError);
  }

  TEST_CASE("corpus directory round trip is bit exact") {
    const auto dir = detgan::test::scratch("corpus_io");
    const auto clean = synthesize_scenes(SceneConfig{}, 6, 31, "io_");
    const auto corpus = build_paired_corpus(clean, 9);
    write_corpus(dir, corpus);
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    const auto back = read_corpus(dir);
    REQUIRE(back.samples.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(back.samples[i].image_id == corpus.samples[i].image_id);
      CHECK(torch::equal(back.samples[i].distorted, corpus.samples[i].distorted));
      CHECK(torch::equal(back.samples[i].target, corpus.samples[i].target));
      CHECK(back.samples[i].annotation.box == corpus.samples[i].annotation.box);
    }
    const auto regenerated = regenerate_corpus(read_annotated_set(dir), back.manifest);
    for (std::size_t i = 0; i < 6; ++i) CHECK(torch::equal(regenerated.samples[i].distorted, corpus.samples[i].distorted));
    CHECK(back.manifest.entries[0].params.gains == corpus.manifest.entries[0].params.gains);
    CHECK_THROWS_AS(read_corpus(dir / "missing"), DataError);
  }

  TEST_CASE("annotation files") {
    const auto dir = detgan::test::scratch("annotations");
    AnnotatedImage item{"x1", torch::zeros({3, 4, 4}), {{{1, 2, 3, 4}, "diver"}, {{5.5, 6, 7, 8}, "diver"}}};
    write_annotations(dir / "x1.txt", item);
    const auto back = read_annotations(dir / "x1.txt", "x1");
    REQUIRE(back.size() == 2);
    CHECK(back[1].box == Box{5.5, 6, 7, 8});
    std::ofstream(dir / "bad.txt") << "bad,diver,1,2,x,4\n";
    CHECK_THROWS_AS(read_annotations(dir / "bad.txt", "bad"), DataError);
  }

  TEST_CASE("filtering by detection") {
    const auto detector = shared_detector();
    SceneConfig easy;
    easy.min_target_extent = 64;
    easy.max_distractors = 0;
    const auto set = synthesize_scenes(easy, 10, 55, "easy_");
    const auto all = filter_by_detection(set, *detector);
    CHECK(all.kept >= 8);  // the toy detector is good, not perfect; exact membership is checked below

    std::vector<AnnotatedImage> blanks;
    for (int i = 0; i < 5; ++i) {
      auto e = render_empty_scene(easy, 60 + i, "blank" + std::to_string(i));
      e.annotations.push_back({{100, 100, 50, 50}, "diver"});
      blanks.push_back(e);
    }
    CHECK(filter_by_detection(blanks, *detector).dropped == 5);

    auto mixed = synthesize_scenes(SceneConfig{}, 30, 56, "mix_");
    mixed.insert(mixed.end(), blanks.begin(), blanks.end());
    mixed.push_back(render_empty_scene(easy, 99, "unannotated"));
    const auto report = filter_by_detection(mixed, *detector);
    CHECK(report.warnings.size() == 1);
    CHECK(report.kept + report.dropped == mixed.size() - 1);
    std::vector<std::string> expected;
    for (const auto& item : mixed) {
      if (item.annotations.empty()) continue;
      const auto top = detect_top1(*detector, item.image, 0.55);
      if (top && iou(top->box, item.annotations[0].box) > 0.0) expected.push_back(item.id);
    }
    std::vector<std::string> got;
    for (const auto& item : report.accepted) got.push_back(item.id);
    CHECK(got == expected);
    const auto twice = filter_by_detection(report.accepted, *detector);
    CHECK(twice.kept == report.kept);
  }

  TEST_CASE("categories partition the test set") {
    const auto detector = shared_detector();
    CHECK(to_string(DatasetCategory::SdDetected) == "SD-Detected");
    CHECK(parse_category("MD-SomeDetected") == DatasetCategory::MdSomeDetected);
    CHECK_THROWS_AS(parse_category("other"), ConfigError);

    SceneConfig scene;
    scene.max_targets = 3;
    auto images = synthesize_scenes(scene, 40, 71, "cat_");
    const auto corpus_distorted = [&] {
      std::vector<AnnotatedImage> out;
      for (std::size_t i = 0; i < images.size(); ++i)
        out.push_back({images[i].id, quantize_8bit(distort(images[i].image, sample_degradation({}, i))), images[i].annotations});
      return out;
    }();
    images.insert(images.end(), corpus_distorted.begin(), corpus_distorted.end());
    for (std::size_t i = 40; i < images.size(); ++i) images[i].id += "_d";
    const auto cats = categorize_test_set(images, *detector);
    std::multiset<std::string> seen;
    for (const auto& [cat, list] : cats) {
      for (const auto& item : list) {
        seen.insert(item.id);
        const bool single = item.annotations.size() == 1;
        CHECK(single == (cat == DatasetCategory::SdDetected || cat == DatasetCategory::SdUndetected));
        const auto dets = detect_all(*detector, item.image, 0.55);
        std::vector<Box> boxes;
        for (const auto& a : item.annotations) boxes.push_back(a.box);
        std::size_t matched = 0;
        std::vector<bool> used(boxes.size());
        for (const auto& d : dets)
          for (std::size_t g = 0; g < boxes.size(); ++g)
            if (!used[g] && iou(d.box, boxes[g]) > 0.5) {
              used[g] = true;
              ++matched;
              break;
            }
        if (cat == DatasetCategory::SdDetected || cat == DatasetCategory::MdAllDetected) CHECK(matched == boxes.size());
        else CHECK(matched < boxes.size());
      }
    }
    CHECK(seen.size() == images.size());
    std::set<std::string> unique(seen.begin(), seen.end());
    CHECK(unique.size() == images.size());
  }

  TEST_CASE("synthesis config keys") {
    SynthesisConfig c;
    apply_setting(c, "train_count", "12");
    apply_setting(c, "blur_max", "2");
    CHECK(c.train_count == 12);
    CHECK(c.ranges.blur_max == 2);
    CHECK_THROWS_AS(apply_setting(c, "bogus", "1"), ConfigError);
    CHECK_THROWS_AS(apply_setting(c, "train_count", "-1"), ConfigError);
    const auto dir = detgan::test::scratch("synth_cfg");
    std::ofstream(dir / "s.yaml") << "# desk scale\ntrain_count: 20\nseed: 4\n";
    const auto loaded = load_synthesis_config(dir / "s.yaml");
    CHECK(loaded.train_count == 20);
    CHECK(loaded.seed == 4);
    std::ofstream(dir / "bad.yaml") << "unknown_key: 1\n";
    CHECK_THROWS_AS(load_synthesis_config(dir / "bad.yaml"), ConfigError);
  }
}
