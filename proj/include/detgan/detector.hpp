#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "detgan/image.hpp"
#include "detgan/types.hpp"

namespace detgan {

struct DetectorMetadata {
  std::string name;
  std::int64_t input_size = 0;  // square network input; images are resized to it
  std::vector<std::string> classes;
};

// Highest-scoring detection of one image. For differentiable ports `box` (pixels,
// x_min/y_min/w/h) and `score` keep autograd history back to the input images.
struct TopDetection {
  bool found = false;
  torch::Tensor box;
  torch::Tensor score;
  std::string label;

  Detection to_detection() const;
};

// Pluggable detector consulted by training and evaluation. Implementations are
// frozen: detect calls never mutate parameters and may run concurrently.
class DetectorPort {
 public:
  virtual ~DetectorPort() = default;

  virtual const DetectorMetadata& metadata() const = 0;
  virtual bool differentiable() const = 0;

  // image: [3,H,W] in file space. Returns every detection with score >= threshold,
  // clipped to the image, in descending score order.
  virtual std::vector<Detection> detect(const torch::Tensor& image, double threshold) const = 0;

  // images: [N,3,H,W] in file space.
  virtual std::vector<TopDetection> top1_batch(const torch::Tensor& images, double threshold) const = 0;

  virtual std::uint64_t checksum() const = 0;
};

std::optional<Detection> detect_top1(const DetectorPort& port, const torch::Tensor& image,
                                     double threshold = 0.01);
std::vector<Detection> detect_all(const DetectorPort& port, const torch::Tensor& image,
                                  double threshold = 0.55);

// Descending score; ties ordered by box coordinates lexicographically.
void sort_detections(std::vector<Detection>& detections);
// Greedy suppression of lower-scored boxes overlapping a kept box at IoU > iou_threshold.
std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold);

// Anchor-free reference detector: center heat-map plus per-cell box regression at
// stride 8 over a 128x128 input.
class ToyDetectorNetImpl : public torch::nn::Module {
 public:
  ToyDetectorNetImpl();
  // Returns [N,5,16,16]: channel 0 heat logits, 1-2 center offsets (pre-sigmoid),
  // 3-4 log extents relative to kExtentUnit input pixels.
  torch::Tensor forward(const torch::Tensor& images);

  static constexpr std::int64_t kInputSize = 128;
  static constexpr std::int64_t kStride = 8;
  static constexpr double kExtentUnit = 16.0;

 private:
  torch::nn::Sequential backbone_{nullptr};
  torch::nn::Conv2d heat_{nullptr};
  torch::nn::Conv2d box_{nullptr};
};
TORCH_MODULE(ToyDetectorNet);

struct ToyDetectorConfig {
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
  double nms_iou = 0.5;
  std::string label = "diver";
  std::size_t min_corpus = 200;
};

class ToyDetector final : public DetectorPort {
 public:
  ToyDetector(ToyDetectorNet net, std::string label, double nms_iou);

  const DetectorMetadata& metadata() const override { return metadata_; }
  bool differentiable() const override { return true; }
  std::vector<Detection> detect(const torch::Tensor& image, double threshold) const override;
  std::vector<TopDetection> top1_batch(const torch::Tensor& images, double threshold) const override;
  std::uint64_t checksum() const override;

  void save(const std::filesystem::path& path) const;
  static std::shared_ptr<ToyDetector> load(const std::filesystem::path& path);

  // Raw network output on a resized batch; exposed for tests.
  torch::Tensor raw_output(const torch::Tensor& images) const;
  const torch::nn::Module& network() const { return *net_; }
  // Converts the view to double precision (finite-difference checks).
  void to_double();

 private:
  mutable ToyDetectorNet net_;
  DetectorMetadata metadata_;
  double nms_iou_;
};

// Trains on single- or multi-box annotated images; the result is frozen. Throws
// ConfigError for corpora smaller than config.min_corpus.
std::shared_ptr<ToyDetector> train_toy_detector(std::span<const AnnotatedImage> corpus,
                                                const ToyDetectorConfig& config);

// Adapter for an exported single-class detection graph (TorchScript). The graph takes a
// [1,3,S,S] float image in [0,1] and returns (boxes [K,4] as normalized
// (y_min, x_min, y_max, x_max), scores [K], classes [K]). Not differentiable.
struct ExternalDetectorConfig {
  std::filesystem::path model_path;
  std::filesystem::path class_map_path;  // lines "<id> <name>"
  std::int64_t input_size = 300;
  double nms_iou = 0.5;
};

class ExternalDetector final : public DetectorPort {
 public:
  explicit ExternalDetector(const ExternalDetectorConfig& config);
  ~ExternalDetector() override;

  const DetectorMetadata& metadata() const override { return metadata_; }
  bool differentiable() const override { return false; }
  std::vector<Detection> detect(const torch::Tensor& image, double threshold) const override;
  std::vector<TopDetection> top1_batch(const torch::Tensor& images, double threshold) const override;
  std::uint64_t checksum() const override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  DetectorMetadata metadata_;
  std::map<std::int64_t, std::string> class_names_;
  double nms_iou_;
};

// Line records "image_id,label,score,x_min,y_min,w,h"; '#' lines are comments.
struct DetectionRecord {
  std::string image_id;
  Detection detection;
};
void write_detection_records(std::ostream& os, std::span<const DetectionRecord> records);
std::vector<DetectionRecord> read_detection_records(std::istream& is);

}  // namespace detgan
