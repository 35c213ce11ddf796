#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "detgan/types.hpp"

namespace detgan {

struct LossWeights {
  double lambda_1 = 0.7;  // global similarity
  double lambda_c = 0.3;  // content

  void validate() const;
};

struct AdversarialLoss {
  torch::Tensor discriminator;  // -mean log D(real) - mean log(1 - D(fake))
  torch::Tensor generator;      // -mean log D(fake)
};

// Patch maps must hold probabilities in [0, 1]; cells are clamped to [eps, 1 - eps].
AdversarialLoss adversarial_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);

// Mean absolute difference.
torch::Tensor global_similarity_loss(const torch::Tensor& target, const torch::Tensor& generated);

// Fixed (non-trainable) feature map used by the content loss.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual torch::Tensor extract(const torch::Tensor& images) const = 0;
  virtual std::string name() const = 0;
};

class IdentityFeatures final : public FeatureExtractor {
 public:
  torch::Tensor extract(const torch::Tensor& images) const override { return images; }
  std::string name() const override { return "identity"; }
};

// Seeded stack of frozen random convolutions (3x3, stride 2, ReLU between layers).
class RandomConvFeatures final : public FeatureExtractor {
 public:
  RandomConvFeatures(std::uint64_t seed, std::vector<std::int64_t> channels = {16, 32});
  torch::Tensor extract(const torch::Tensor& images) const override;
  std::string name() const override { return "random_conv"; }
  // Weights as [out, in, 3, 3] tensors, for oracle tests.
  const std::vector<torch::Tensor>& weights() const { return weights_; }

 private:
  std::vector<torch::Tensor> weights_;
};

// TorchScript backbone (e.g. an exported classification network truncated at a deep
// convolutional layer). Inputs are passed in model space.
class ScriptedFeatures final : public FeatureExtractor {
 public:
  explicit ScriptedFeatures(const std::filesystem::path& path);
  ~ScriptedFeatures() override;
  torch::Tensor extract(const torch::Tensor& images) const override;
  std::string name() const override { return "scripted:" + path_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string path_;
};

struct FeatureConfig {
  std::string kind = "random_conv";  // random_conv | identity | scripted
  std::uint64_t seed = 7;
  std::string path;  // scripted only
};

// Throws ConfigError when the extractor cannot be built (unknown kind, missing file).
std::shared_ptr<const FeatureExtractor> make_feature_extractor(const FeatureConfig& config);

// Mean squared distance between feature maps; phi == nullptr is a ConfigError.
torch::Tensor content_loss(const torch::Tensor& target, const torch::Tensor& generated,
                           const FeatureExtractor* phi);

// Boxes are [..., 4] tensors of normalized (x_min, y_min, w, h); the per-component
// smooth-L1 terms are summed over the last dimension.
torch::Tensor smooth_l1(const torch::Tensor& detected, const torch::Tensor& truth);
// Pixel boxes, normalized by the image size before comparison.
double smooth_l1(const Box& detected, const Box& truth, double width, double height);

// -log(max(s, eps)); never throws.
torch::Tensor classification_loss(const torch::Tensor& score);
double classification_loss(double score);

struct DetectionTarget {
  Box truth;     // pixels, w > 0 and h > 0
  Box detected;  // pixels; ignored unless found
  double score = 0.0;
  bool found = false;
  double image_width = static_cast<double>(kImageSize);
  double image_height = static_cast<double>(kImageSize);
};

// Box used when the detector returns nothing: the degenerate corner box, scored eps.
inline const Box kMissedDetectionBox{0.0, 0.0, 0.0, 0.0};

double rc_loss(const DetectionTarget& target);

// Tensor form used in training. `truth` and `detected` are normalized [4] boxes and
// `score` a scalar; pass std::nullopt for a missed detection.
struct DetectedTensors {
  torch::Tensor box;
  torch::Tensor score;
};
torch::Tensor rc_loss(const torch::Tensor& truth, const std::optional<DetectedTensors>& detected);

struct LossComponents {
  torch::Tensor adversarial_g;
  torch::Tensor adversarial_d;
  torch::Tensor l1;
  torch::Tensor content;
  torch::Tensor rc;
};

struct Objective {
  torch::Tensor generator;
  torch::Tensor discriminator;
};

Objective total_objective(const LossComponents& c, const LossWeights& weights, AblationMode mode);
Objective total_objective(const LossComponents& c, const LossWeights& weights, std::string_view mode);

}  // namespace detgan
