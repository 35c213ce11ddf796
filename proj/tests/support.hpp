#pragma once

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <memory>
#include <random>
#include <vector>

#include "detgan/datapipe.hpp"
#include "detgan/detector.hpp"

namespace detgan::test {

// Shared artifacts produced by the fixture tests (DETGAN_TEST_DIR, else ./test_data).
std::filesystem::path data_dir();
std::shared_ptr<ToyDetector> shared_detector();
std::filesystem::path external_graph_dir();

// Scenes the shared detector was trained on come from this seed; held-out sets use others.
inline constexpr std::uint64_t kDetectorSeed = 4242;
std::vector<AnnotatedImage> detector_training_scenes();

// Scratch directory unique to the calling test.
std::filesystem::path scratch(const std::string& name);

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1e-12, std::abs(want));
}

inline torch::Tensor random_image(std::uint64_t seed, std::int64_t size = 256) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({3, size, size}, gen, torch::TensorOptions());
}

// Seeded pairs at the nets' resolution, each from a rendered single-target scene.
std::vector<PairedSample> small_corpus(std::size_t count, std::uint64_t seed);

}  // namespace detgan::test
