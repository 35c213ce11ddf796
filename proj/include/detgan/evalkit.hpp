#pragma once

#include <torch/torch.h>

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "detgan/detector.hpp"
#include "detgan/image.hpp"
#include "detgan/nets.hpp"
#include "detgan/types.hpp"

namespace detgan {

struct MatchedPair {
  std::size_t detection = 0;
  std::size_t truth = 0;
  double iou = 0.0;
};

struct MatchResult {
  std::vector<MatchedPair> pairs;
  std::vector<std::size_t> unmatched_detections;
  std::vector<std::size_t> unmatched_truths;
};

// Greedy: detections (already in descending score order) each claim the unclaimed
// truth with the highest IoU >= iou_gate. Zero overlap never forms a pair, so a gate
// of 0 pairs only boxes that actually intersect.
MatchResult match_detections(std::span<const Detection> detections, std::span<const Box> truths,
                             double iou_gate = 0.5);

// Mean over images of (sum of matched IoUs) / (pairs + unmatched detections + unmatched
// truths), in percent. Images with nothing on either side contribute 0.
double penalized_mean_iou(std::span<const MatchResult> results);

struct ScoredDetection {
  std::string image_id;
  Detection detection;
};

// All-point interpolated single-class AP in percent; std::nullopt without any truths.
std::optional<double> average_precision(std::span<const ScoredDetection> detections,
                                        const std::map<std::string, std::vector<Box>>& truths,
                                        double iou_gate = 0.5);

struct UiqmScore {
  double uiqm = 0.0;
  double uicm = 0.0;
  double uism = 0.0;
  double uiconm = 0.0;
};

struct UiqmCoefficients {
  double c1 = 0.0282;
  double c2 = 0.2953;
  double c3 = 3.5753;
};

// image: [3,H,W] RGB in [0, 1]; evaluated on the 0-255 scale with 10x10 blocks.
UiqmScore uiqm(const torch::Tensor& image, const UiqmCoefficients& coefficients = {});

// Maps a [N,3,H,W] file-space batch to its enhanced counterpart.
using Enhancer = std::function<torch::Tensor(const torch::Tensor&)>;

Enhancer identity_enhancer();
// Runs the generator in eval mode (noise-free) on 256x256 inputs.
Enhancer generator_enhancer(Generator generator, std::int64_t batch_size = 8);

struct EvalSet {
  std::string name;
  std::vector<AnnotatedImage> images;
};

struct EvalOptions {
  double score_threshold = 0.55;
  double ap_gate = 0.5;
  double iou_gate = 0.0;
};

struct CategoryReport {
  std::string category;
  bool present = false;
  std::optional<double> ap;
  double mean_iou = 0.0;
  double uiqm_mean = 0.0;
  double uiqm_sd = 0.0;
  std::size_t images = 0;
  std::size_t detections = 0;
  std::size_t matches = 0;
};

struct EvalReport {
  std::string model;
  std::vector<CategoryReport> rows;
  std::vector<DetectionRecord> detections;
};

EvalReport evaluate(const std::string& model_name, const Enhancer& enhancer, const DetectorPort& detector,
                    std::span<const EvalSet> sets, const EvalOptions& options = {});

std::string format_report_table(const EvalReport& report);
nlohmann::json report_to_json(const EvalReport& report);
// Writes report.txt, report.json and detections.csv under dir.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

// ---------------------------------------------------------------------------
// Inference throughput of the generator forward pass alone (no decode/encode).

struct BenchmarkOptions {
  std::int64_t batch_size = 1;
  int iterations = 100;
  int warmup = 10;
  std::string device = "cpu";
};

struct BenchmarkReport {
  BenchmarkOptions options;
  double elapsed_seconds = 0.0;  // timed iterations only
  double fps = 0.0;              // iterations * batch_size / elapsed
  double fps_sd = 0.0;           // across per-iteration rates
  double latency_ms = 0.0;       // per image
};

BenchmarkReport benchmark_generator(Generator generator, const BenchmarkOptions& options);
nlohmann::json to_json(const BenchmarkReport& report);

}  // namespace detgan
