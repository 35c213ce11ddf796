#include "support.hpp"

#include <cstdlib>

namespace detgan::test {

namespace fs = std::filesystem;

fs::path data_dir() {
  const char* env = std::getenv("DETGAN_TEST_DIR");
  const fs::path dir = env && *env ? fs::path(env) : fs::current_path() / "test_data";
  fs::create_directories(dir);
  return dir;
}

std::vector<AnnotatedImage> detector_training_scenes() {
  SceneConfig scene;
  scene.max_targets = 3;
  return synthesize_scenes(scene, 500, kDetectorSeed, "det_");
}

std::shared_ptr<ToyDetector> shared_detector() {
  static std::shared_ptr<ToyDetector> detector = [] {
    const auto path = data_dir() / "toy_detector.pt";
    if (fs::exists(path)) return ToyDetector::load(path);
    ToyDetectorConfig config;
    config.seed = 17;
    auto trained = train_toy_detector(detector_training_scenes(), config);
    trained->save(path);
    return trained;
  }();
  return detector;
}

fs::path external_graph_dir() { return data_dir() / "external"; }

fs::path scratch(const std::string& name) {
  const auto dir = data_dir() / "scratch" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<PairedSample> small_corpus(std::size_t count, std::uint64_t seed) {
  const auto clean = synthesize_scenes(SceneConfig{}, count, seed, "pair_");
  return build_paired_corpus(clean, seed + 1).samples;
}

}  // namespace detgan::test
