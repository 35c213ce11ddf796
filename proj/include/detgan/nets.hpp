#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>

#include "detgan/types.hpp"

namespace detgan {

struct NetConfig {
  // Scales every hidden width except the 256-channel bottleneck, so thin desk-scale
  // variants keep the same I/O and bottleneck shapes.
  double width_multiplier = 1.0;
  // Decoder dropout stands in for the generator noise input; active only in train().
  double decoder_dropout = 0.5;

  void validate() const;
  std::int64_t scaled(std::int64_t channels) const;
};

class DownBlockImpl : public torch::nn::Module {
 public:
  DownBlockImpl(std::int64_t in, std::int64_t out, bool batch_norm);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d norm_{nullptr};
};
TORCH_MODULE(DownBlock);

class UpBlockImpl : public torch::nn::Module {
 public:
  UpBlockImpl(std::int64_t in, std::int64_t out, double dropout);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

 private:
  torch::nn::ConvTranspose2d deconv_{nullptr};
  torch::nn::BatchNorm2d norm_{nullptr};
  torch::nn::Dropout dropout_{nullptr};
};
TORCH_MODULE(UpBlock);

// U-Net style encoder-decoder: 256x256x3 -> 8x8x256 bottleneck -> 256x256x3 in [-1, 1].
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const NetConfig& config = {});

  // x: [N,3,256,256] (or a single [3,256,256] image) in model space.
  torch::Tensor forward(const torch::Tensor& x);
  // Same as forward, also returning the bottleneck feature map.
  std::pair<torch::Tensor, torch::Tensor> forward_with_bottleneck(const torch::Tensor& x);

  const NetConfig& config() const { return config_; }

 private:
  NetConfig config_;
  DownBlock down1_{nullptr}, down2_{nullptr}, down3_{nullptr}, down4_{nullptr}, down5_{nullptr};
  UpBlock up1_{nullptr}, up2_{nullptr}, up3_{nullptr}, up4_{nullptr};
  torch::nn::Conv2d final_{nullptr};
};
TORCH_MODULE(Generator);

// Markovian patch discriminator over the channel concatenation of two images:
// 256x256x6 -> 16x16x1 map of per-patch real probabilities.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const NetConfig& config = {});

  torch::Tensor forward(const torch::Tensor& reference, const torch::Tensor& candidate);
  torch::Tensor logits(const torch::Tensor& reference, const torch::Tensor& candidate);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Discriminator);

// Normal(0, 0.02) convolution weights, Normal(1, 0.02) norm scales.
void init_gan_weights(torch::nn::Module& module);

struct ModelBundle {
  NetConfig config;
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
};

ModelBundle make_models(const NetConfig& config, std::uint64_t seed);

// FNV-1a over parameter and buffer names and bytes.
std::uint64_t parameter_checksum(const torch::nn::Module& module);

struct CheckpointManifest {
  std::string format_version = "1";
  double width_multiplier = 1.0;
  double decoder_dropout = 0.5;
  std::int64_t epoch = 0;
  std::string mode;
  std::uint64_t generator_checksum = 0;
  std::uint64_t discriminator_checksum = 0;
};

using ArchiveWriter = std::function<void(torch::serialize::OutputArchive&)>;
using ArchiveReader = std::function<void(torch::serialize::InputArchive&)>;

// One archive holding generator and discriminator tensors plus the manifest. The
// optional callback appends extra records (optimizer state, loss history).
void save_checkpoint(const std::filesystem::path& path, const ModelBundle& models,
                     CheckpointManifest manifest, const ArchiveWriter& extra = {});

struct LoadedCheckpoint {
  ModelBundle models;
  CheckpointManifest manifest;
};

// Rebuilds the networks from the manifest and restores every tensor. Throws
// LoadError naming missing or mismatched parameters.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ArchiveReader& extra = {});

// Restores weights into an existing bundle (pretrained seeding). The file's width must
// match the bundle's.
CheckpointManifest load_pretrained(const std::filesystem::path& path, ModelBundle& models,
                                   const ArchiveReader& extra = {});

}  // namespace detgan
