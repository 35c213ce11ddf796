#pragma once

#include <torch/torch.h>

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "detgan/detector.hpp"
#include "detgan/image.hpp"
#include "detgan/types.hpp"

namespace detgan {

// ---------------------------------------------------------------------------
// Synthetic scenes: water-colored gradient background, dull distractor blobs and
// high-contrast warm-colored targets. Targets never overlap each other.
struct SceneConfig {
  std::int64_t size = kImageSize;
  int min_targets = 1;
  int max_targets = 1;
  int max_distractors = 3;
  double min_target_extent = 40.0;
  double max_target_extent = 96.0;
  std::string label = "diver";
};

AnnotatedImage render_scene(const SceneConfig& config, std::uint64_t seed, std::string id);
// A plain water background with no targets.
AnnotatedImage render_empty_scene(const SceneConfig& config, std::uint64_t seed, std::string id);
std::vector<AnnotatedImage> synthesize_scenes(const SceneConfig& config, std::size_t count, std::uint64_t seed,
                                              std::string_view id_prefix);

// ---------------------------------------------------------------------------
// Detector-validated selection

struct FilterReport {
  std::vector<AnnotatedImage> accepted;
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::vector<std::string> warnings;  // one per skipped unannotated image
};

// Keeps images whose top-1 detection at `threshold` overlaps the first ground-truth box.
FilterReport filter_by_detection(std::span<const AnnotatedImage> images, const DetectorPort& detector,
                                 double threshold = 0.55);

// ---------------------------------------------------------------------------
// Parametric degradation: channel attenuation -> haze blend -> Gaussian blur -> noise.

struct DegradationParams {
  std::array<double, 3> gains{1.0, 1.0, 1.0};  // per-channel attenuation in [0, 1]
  double haze_weight = 0.0;                     // [0, 1]
  std::array<double, 3> haze_color{0.0, 0.0, 0.0};
  int blur_radius = 0;       // pixels, [0, 15]; sigma = radius / 2
  double noise_sigma = 0.0;  // [0, 0.5]
  std::uint64_t seed = 0;    // noise stream

  void validate() const;  // ConfigError when out of range
  bool is_identity() const;
};

struct DegradationRanges {
  std::array<double, 3> gain_min{0.15, 0.55, 0.75};
  std::array<double, 3> gain_max{0.55, 0.95, 1.0};
  double haze_min = 0.15;
  double haze_max = 0.55;
  std::array<double, 3> haze_color_min{0.05, 0.35, 0.45};
  std::array<double, 3> haze_color_max{0.25, 0.65, 0.80};
  int blur_min = 0;
  int blur_max = 3;
  double noise_min = 0.0;
  double noise_max = 0.03;

  void validate() const;
};

DegradationParams sample_degradation(const DegradationRanges& ranges, std::uint64_t seed);
torch::Tensor distort(const torch::Tensor& image, const DegradationParams& params);

// ---------------------------------------------------------------------------
// Paired corpus

struct PairedSample {
  std::string image_id;
  torch::Tensor distorted;  // [3,H,W] file space, on the 8-bit grid
  torch::Tensor target;     // [3,H,W] file space
  Annotation annotation;
};

struct ManifestEntry {
  std::string image_id;
  std::uint64_t seed = 0;
  DegradationParams params;
  std::string category;
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  DegradationRanges ranges;
  std::vector<ManifestEntry> entries;
};

void to_json(nlohmann::json& j, const DegradationParams& p);
void from_json(const nlohmann::json& j, DegradationParams& p);
void to_json(nlohmann::json& j, const DegradationRanges& r);
void from_json(const nlohmann::json& j, DegradationRanges& r);
void to_json(nlohmann::json& j, const CorpusManifest& m);
void from_json(const nlohmann::json& j, CorpusManifest& m);

struct PairedCorpus {
  std::vector<PairedSample> samples;
  CorpusManifest manifest;
};

// One pair per clean image, each with its own seeded degradation. Images carrying
// other than exactly one annotation are rejected with DataError.
PairedCorpus build_paired_corpus(std::span<const AnnotatedImage> clean, std::uint64_t seed,
                                 const DegradationRanges& ranges = {});
// Rebuilds the pairs from the clean set and a manifest; bit-identical to the original.
PairedCorpus regenerate_corpus(std::span<const AnnotatedImage> clean, const CorpusManifest& manifest);

// Distorted views of an annotated set (used for distorted test splits).
std::vector<AnnotatedImage> distorted_view(const PairedCorpus& corpus);

// ---------------------------------------------------------------------------
// Test-set categories

enum class DatasetCategory { SdDetected, SdUndetected, MdAllDetected, MdSomeDetected };

std::string_view to_string(DatasetCategory category);
DatasetCategory parse_category(std::string_view text);

// Single vs multiple ground truths, then matched at IoU > 0.5 against detections at
// `threshold`. Every image lands in exactly one category.
std::map<DatasetCategory, std::vector<AnnotatedImage>> categorize_test_set(std::span<const AnnotatedImage> images,
                                                                           const DetectorPort& detector,
                                                                           double threshold = 0.55);

// ---------------------------------------------------------------------------
// Directory layout
//
//   images/<id>.png          clean images
//   distorted/<id>.png       paired distorted inputs (corpus only)
//   annotations/<id>.txt     one "image_id,label,x_min,y_min,w,h" line per box
//   manifest.json            ids, seeds, degradation parameters, categories

void write_annotations(const std::filesystem::path& path, const AnnotatedImage& image);
std::vector<Annotation> read_annotations(const std::filesystem::path& path, const std::string& image_id);

void write_annotated_set(const std::filesystem::path& dir, std::span<const AnnotatedImage> images);
// Images without an annotation file are returned with an empty annotation list.
std::vector<AnnotatedImage> read_annotated_set(const std::filesystem::path& dir);

void write_corpus(const std::filesystem::path& dir, const PairedCorpus& corpus);
PairedCorpus read_corpus(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// One-shot desk-scale dataset: a toy detector trained on its own clean scenes, a
// detector-validated paired training split, a paired single-target test split and an
// optional multi-target test set.

struct SynthesisConfig {
  std::uint64_t seed = 0;
  SceneConfig scene;
  DegradationRanges ranges;
  std::size_t train_count = 256;
  std::size_t test_count = 100;
  std::size_t test_multi_count = 0;
  int test_multi_max_targets = 3;
  std::size_t detector_corpus = 400;
  ToyDetectorConfig detector;
  double filter_threshold = 0.55;

  void validate() const;
};

// Flat keys for files and key=value overrides: seed train_count test_count
// test_multi_count test_multi_max_targets detector_corpus detector_epochs
// detector_batch_size filter_threshold max_distractors min_target_extent
// max_target_extent blur_max noise_max haze_max.
void apply_setting(SynthesisConfig& config, const std::string& key, const std::string& value);
SynthesisConfig load_synthesis_config(const std::filesystem::path& path);

struct SyntheticDataset {
  std::shared_ptr<ToyDetector> detector;
  PairedCorpus train;
  PairedCorpus test;
  std::vector<AnnotatedImage> test_multi;  // distorted multi-target scenes
  std::size_t train_candidates = 0;        // clean scenes inspected to fill the train split
  std::size_t train_dropped = 0;
};

// Throws DataError when validation cannot fill the train split from 4x candidates.
SyntheticDataset synthesize_dataset(const SynthesisConfig& config);

//   detector.pt   train/   test/   test_multi/
void write_dataset(const std::filesystem::path& dir, const SyntheticDataset& dataset);

}  // namespace detgan
