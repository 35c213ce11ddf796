#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "detgan/datapipe.hpp"
#include "detgan/detector.hpp"
#include "detgan/losses.hpp"
#include "detgan/nets.hpp"
#include "detgan/types.hpp"

namespace detgan {

struct TrainConfig {
  AblationMode mode = AblationMode::B;
  int batch_size = 32;
  int epochs = 100;
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  std::string pretrained;    // optional checkpoint whose weights seed both networks
  NetConfig net;
  LossWeights weights;
  FeatureConfig features;
  double detector_threshold = 0.01;  // top-1 score floor for L_rc
  // When false the L_rc path is skipped entirely in modes where it feeds no update
  // (telemetry then reports 0). Used for twin-run checks.
  bool rc_telemetry = true;

  void validate() const;
};

// Flat keys, identical in YAML files and key=value overrides:
//   mode batch_size epochs learning_rate beta1 beta2 seed checkpoint_every pretrained
//   width_multiplier decoder_dropout lambda_1 lambda_c feature_kind feature_seed
//   feature_path detector_threshold rc_telemetry
// Unknown keys and malformed values are ConfigErrors.
void apply_setting(TrainConfig& config, const std::string& key, const std::string& value);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string to_yaml(const TrainConfig& config);

enum class RcRoute { None, Native, StraightThrough };

struct RcRouting {
  RcRoute generator = RcRoute::None;
  bool discriminator_scalar = false;
};

RcRouting rc_gradient_path(AblationMode mode, bool detector_differentiable);

struct StepLosses {
  double adversarial_g = 0.0;
  double adversarial_d = 0.0;
  double l1 = 0.0;
  double content = 0.0;
  double rc = 0.0;
  double generator_total = 0.0;
  double discriminator_total = 0.0;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  StepLosses mean;
};

// Component names in the order used by loss-curve files.
const std::vector<std::string>& loss_component_names();
std::vector<double> component_values(const StepLosses& losses);

// "epoch,component,value" lines.
void write_loss_curves(const std::filesystem::path& path, std::span<const EpochRecord> history);
std::vector<EpochRecord> read_loss_curves(const std::filesystem::path& path);

// Maps (distorted reference, candidate) to the reference actually fed next to the
// candidate. Lets the discriminator see detection-derived conditioning.
using DiscriminatorInputHook =
    std::function<torch::Tensor(const torch::Tensor& reference, const torch::Tensor& candidate, const DetectorPort&)>;

// Per-mode totals computed from a single forward pass without updating anything.
struct FrozenObjectives {
  StepLosses components;
  double generator(AblationMode mode) const;
  double discriminator(AblationMode mode) const;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<EpochRecord> history;
  std::uint64_t detector_checksum = 0;
};

class Trainer {
 public:
  Trainer(TrainConfig config, ModelBundle models, std::shared_ptr<const DetectorPort> detector);

  // Loads networks, optimizer moments and loss history from a checkpoint written by a
  // trainer. The networks come from the checkpoint; config.net is ignored.
  static Trainer resume(const std::filesystem::path& checkpoint, TrainConfig config,
                        std::shared_ptr<const DetectorPort> detector);

  // One discriminator update followed by one generator update.
  StepLosses train_step(std::span<const PairedSample> batch);
  FrozenObjectives evaluate_objectives(std::span<const PairedSample> batch);

  // Runs the remaining epochs. Checkpoints and loss curves go under out_dir.
  TrainResult train(std::span<const PairedSample> corpus, const std::filesystem::path& out_dir);

  void save(const std::filesystem::path& path) const;

  void set_discriminator_hook(DiscriminatorInputHook hook) { hook_ = std::move(hook); }
  // Where non-finite failures dump their snapshot; defaults to the working directory.
  void set_diagnostics_dir(std::filesystem::path dir) { diagnostics_dir_ = std::move(dir); }

  const TrainConfig& config() const { return config_; }
  const ModelBundle& models() const { return models_; }
  std::int64_t epoch() const { return epoch_; }
  const std::vector<EpochRecord>& history() const { return history_; }

 private:
  struct Forward;
  Forward forward(std::span<const PairedSample> batch, bool rc_with_grad, bool need_rc);
  torch::Tensor conditioned(const torch::Tensor& reference, const torch::Tensor& candidate) const;
  [[noreturn]] void fail_numeric(const std::string& what, const torch::Tensor& inputs) const;
  void check_gradients(torch::nn::Module& module, const char* name, const torch::Tensor& inputs) const;

  TrainConfig config_;
  ModelBundle models_;
  std::shared_ptr<const DetectorPort> detector_;
  std::shared_ptr<const FeatureExtractor> features_;
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  DiscriminatorInputHook hook_;
  std::filesystem::path diagnostics_dir_ = ".";
  std::int64_t epoch_ = 0;
  std::vector<EpochRecord> history_;
};

}  // namespace detgan
