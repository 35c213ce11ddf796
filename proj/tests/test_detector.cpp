#include "doctest.h"

#include <sstream>

#include "detgan/detector.hpp"
#include "detgan/evalkit.hpp"
#include "support.hpp"

using namespace detgan;
using detgan::test::shared_detector;

namespace {

double held_out_ap(const DetectorPort& detector, const std::vector<AnnotatedImage>& images) {
  std::vector<ScoredDetection> dets;
  std::map<std::string, std::vector<Box>> truths;
  for (const auto& item : images) {
    for (const auto& d : detect_all(detector, item.image, 0.01)) dets.push_back({item.id, d});
    for (const auto& a : item.annotations) truths[item.id].push_back(a.box);
  }
  return *average_precision(dets, truths, 0.5);
}

}  // namespace

TEST_SUITE("fixture") {
  TEST_CASE("train the shared toy detector") {
    std::filesystem::remove(detgan::test::data_dir() / "toy_detector.pt");
    const auto detector = shared_detector();
    CHECK(std::filesystem::exists(detgan::test::data_dir() / "toy_detector.pt"));
    const auto held_out = synthesize_scenes(SceneConfig{}, 100, 999, "held_");
    const double ap = held_out_ap(*detector, held_out);
    MESSAGE("held-out AP@0.5: " << ap);
    CHECK(ap >= 80.0);
  }
}

TEST_SUITE("detector") {
  TEST_CASE("sorting and suppression") {
    std::vector<Detection> d{{{5, 5, 10, 10}, 0.5, "a"}, {{1, 1, 10, 10}, 0.9, "a"}, {{0, 0, 10, 10}, 0.5, "a"}};
    sort_detections(d);
    CHECK(d[0].score == 0.9);
    CHECK(d[1].box.x_min == 0.0);  // tie broken by box coordinates
    CHECK(d[2].box.x_min == 5.0);
    const auto kept = non_max_suppression(d, 0.5);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].score == 0.9);
    CHECK(kept[1].box.x_min == 5.0);  // IoU(1,1 vs 5,5) = 36/164 < 0.5
  }

  TEST_CASE("positive, negative and threshold examples") {
    const auto detector = shared_detector();
    SceneConfig scene;
    scene.min_target_extent = 56;
    const auto positive = render_scene(scene, 321, "p");
    const auto top = detect_top1(*detector, positive.image);
    REQUIRE(top.has_value());
    CHECK(top->score > 0.5);
    CHECK(iou(top->box, positive.annotations[0].box) > 0.5);
    CHECK_FALSE(detect_top1(*detector, positive.image, 1.1).has_value());

    CHECK_FALSE(detect_top1(*detector, torch::full({3, 256, 256}, 0.4), 0.55).has_value());
    CHECK(detect_all(*detector, torch::full({3, 256, 256}, 0.4)).empty());
    CHECK(detect_all(*detector, render_empty_scene(scene, 5, "e").image).empty());
  }

  TEST_CASE("detect_all ordering, clipping and threshold monotonicity") {
    const auto detector = shared_detector();
    SceneConfig scene;
    scene.max_targets = 3;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto img = render_scene(scene, 700 + s, "m").image;
      const auto low = detect_all(*detector, img, 0.01);
      const auto high = detect_all(*detector, img, 0.55);
      for (std::size_t i = 1; i < low.size(); ++i) CHECK(low[i - 1].score >= low[i].score);
      REQUIRE(high.size() <= low.size());
      for (std::size_t i = 0; i < high.size(); ++i) {
        CHECK(high[i].box == low[i].box);
        CHECK(high[i].score >= 0.55);
      }
      for (const auto& d : low) {
        CHECK(d.box.x_min >= 0.0);
        CHECK(d.box.y_min >= 0.0);
        CHECK(d.box.x_max() <= 256.0);
        CHECK(d.box.y_max() <= 256.0);
        CHECK(d.score <= 1.0);
      }
      const auto top = detect_top1(*detector, img, 0.01);
      CHECK(top.has_value() == !low.empty());
      if (top) CHECK(top->box == low.front().box);
    }
  }

  TEST_CASE("two separated targets give two detections") {
    const auto detector = shared_detector();
    SceneConfig scene;
    scene.min_targets = 2;
    scene.max_targets = 2;
    scene.min_target_extent = 56;
    scene.max_target_extent = 80;
    int both = 0, total = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      const auto item = render_scene(scene, 900 + s, "two");
      if (item.annotations.size() != 2) continue;
      ++total;
      const auto dets = detect_all(*detector, item.image, 0.55);
      const auto m = match_detections(dets, std::vector<Box>{item.annotations[0].box, item.annotations[1].box}, 0.5);
      both += dets.size() == 2 && m.pairs.size() == 2;
    }
    CHECK(total >= 5);
    CHECK(both * 10 >= total * 7);
  }

  TEST_CASE("top1_batch agrees with detect_top1 and is differentiable") {
    const auto detector = shared_detector();
    const auto a = render_scene(SceneConfig{}, 11, "a").image, b = render_scene(SceneConfig{}, 12, "b").image;
    auto batch = torch::stack({a, b}).requires_grad_(true);
    const auto tops = detector->top1_batch(batch, 0.01);
    REQUIRE(tops.size() == 2);
    for (int i = 0; i < 2; ++i) {
      const auto ref = detect_top1(*detector, i == 0 ? a : b);
      REQUIRE(ref.has_value() == tops[i].found);
      const auto d = tops[i].to_detection();
      CHECK(d.score == doctest::Approx(ref->score).epsilon(1e-5));
      CHECK(iou(clip_box(d.box, 256, 256), ref->box) > 0.99);
    }
    (tops[0].score + tops[0].box.sum()).backward();
    CHECK(batch.grad().defined());
    CHECK(batch.grad()[0].abs().sum().item<double>() > 0.0);
    CHECK(batch.grad()[1].abs().sum().item<double>() == 0.0);
  }

  TEST_CASE("training preconditions and determinism") {
    CHECK_THROWS_AS(train_toy_detector({}, ToyDetectorConfig{}), ConfigError);
    const auto few = synthesize_scenes(SceneConfig{}, 50, 1, "f");
    CHECK_THROWS_AS(train_toy_detector(few, ToyDetectorConfig{}), ConfigError);
    const auto corpus = synthesize_scenes(SceneConfig{}, 200, 2, "d");
    ToyDetectorConfig quick;
    quick.epochs = 1;
    quick.seed = 5;
    const auto a = train_toy_detector(corpus, quick);
    const auto b = train_toy_detector(corpus, quick);
    CHECK(a->checksum() == b->checksum());
    quick.seed = 6;
    CHECK(train_toy_detector(corpus, quick)->checksum() != a->checksum());
  }

  TEST_CASE("save, load and frozen parameters") {
    const auto detector = shared_detector();
    const auto dir = detgan::test::scratch("detector_io");
    detector->save(dir / "d.pt");
    const auto again = ToyDetector::load(dir / "d.pt");
    CHECK(again->checksum() == detector->checksum());
    CHECK(again->metadata().classes == std::vector<std::string>{"diver"});
    CHECK(again->metadata().input_size == 128);
    for (const auto& p : again->network().parameters()) CHECK_FALSE(p.requires_grad());
    CHECK_THROWS_AS(ToyDetector::load(dir / "none.pt"), ConfigError);
    const auto before = detector->checksum();
    for (int i = 0; i < 3; ++i) detect_all(*detector, detgan::test::random_image(i));
    CHECK(detector->checksum() == before);
  }

  TEST_CASE("detection records round trip") {
    std::vector<DetectionRecord> recs{{"img_1", {{1.5, 2.25, 30, 40}, 0.875, "diver"}},
                                      {"img_2", {{0, 0, 256, 256}, 0.5, "diver"}}};
    std::stringstream ss;
    write_detection_records(ss, recs);
    const auto back = read_detection_records(ss);
    REQUIRE(back.size() == 2);
    CHECK(back[0].image_id == "img_1");
    CHECK(back[0].detection.box == recs[0].detection.box);
    CHECK(back[0].detection.score == 0.875);
    CHECK(back[1].detection.label == "diver");
    std::stringstream bad("img,diver,notanumber,0,0,1,1\n");
    CHECK_THROWS_AS(read_detection_records(bad), DataError);
  }

  TEST_CASE("external frozen graph adapter") {
    const auto dir = detgan::test::external_graph_dir();
    if (!std::filesystem::exists(dir / "detector.pt")) {
      MESSAGE("external graph fixture not generated; skipping");
      return;
    }
    CHECK_THROWS_AS(ExternalDetector({dir / "nope.pt", dir / "classes.txt"}), ConfigError);
    CHECK_THROWS_AS(ExternalDetector({dir / "detector.pt", dir / "nope.txt"}), ConfigError);
    ExternalDetector ext({dir / "detector.pt", dir / "classes.txt"});
    CHECK_FALSE(ext.differentiable());
    CHECK(ext.metadata().classes == std::vector<std::string>{"diver"});
    // The fixture graph boxes the warm-colored pixels and adds a fixed low-score decoy.
    auto img = torch::zeros({3, 200, 100});
    img.slice(1, 50, 150).slice(2, 20, 60).select(0, 0).fill_(1.0);
    const auto dets = ext.detect(img, 0.01);
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].label == "diver");
    CHECK(dets[0].box.x_min == doctest::Approx(20).epsilon(0.05));
    CHECK(dets[0].box.y_min == doctest::Approx(50).epsilon(0.05));
    CHECK(dets[0].box.w == doctest::Approx(40).epsilon(0.05));
    CHECK(dets[0].box.h == doctest::Approx(100).epsilon(0.05));
    CHECK(dets[1].score < dets[0].score);
    CHECK(ext.detect(img, 0.5).size() == 1);
    const auto tops = ext.top1_batch(torch::stack({img, img}), 0.01);
    CHECK(tops[0].found);
    CHECK_FALSE(tops[0].score.requires_grad());
    const auto sum = ext.checksum();
    ext.detect(img, 0.01);
    CHECK(ext.checksum() == sum);
  }
}
