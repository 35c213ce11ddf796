#include "detgan/losses.hpp"

#include <torch/script.h>

#include <cmath>

#include "detgan/image.hpp"

namespace detgan {

void LossWeights::validate() const {
  if (!(lambda_1 >= 0.0) || !(lambda_c >= 0.0) || !std::isfinite(lambda_1) || !std::isfinite(lambda_c))
    throw ConfigError("loss weights must be finite and non-negative");
}

namespace {

void require_probability_map(const torch::Tensor& map, const char* what) {
  if (!map.defined() || map.numel() == 0) throw InputError(std::string(what) + ": empty patch map");
  const auto lo = map.min().item<double>();
  const auto hi = map.max().item<double>();
  if (!(lo >= 0.0 && hi <= 1.0))
    throw InputError(std::string(what) + ": patch map cells must lie in [0, 1], got range [" +
                     std::to_string(lo) + ", " + std::to_string(hi) + "]");
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes())
    throw InputError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

torch::Tensor clamp_probability(const torch::Tensor& p) { return p.clamp(kLogEpsilon, 1.0 - kLogEpsilon); }

torch::Tensor box_tensor(const Box& b, double width, double height) {
  const Box n = normalize_box(b, width, height);
  return torch::tensor({n.x_min, n.y_min, n.w, n.h}, torch::kFloat64);
}

}  // namespace

AdversarialLoss adversarial_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  require_probability_map(d_real, "adversarial_loss (real)");
  require_probability_map(d_fake, "adversarial_loss (fake)");
  const auto real = clamp_probability(d_real);
  const auto fake = clamp_probability(d_fake);
  AdversarialLoss out;
  out.discriminator = -torch::log(real).mean() - torch::log(1.0 - fake).mean();
  out.generator = -torch::log(fake).mean();
  return out;
}

torch::Tensor global_similarity_loss(const torch::Tensor& target, const torch::Tensor& generated) {
  require_same_shape(target, generated, "global_similarity_loss");
  return (target - generated).abs().mean();
}

RandomConvFeatures::RandomConvFeatures(std::uint64_t seed, std::vector<std::int64_t> channels) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  std::int64_t in = 3;
  for (auto out : channels) {
    const double scale = std::sqrt(2.0 / static_cast<double>(in * 9));
    weights_.push_back(torch::randn({out, in, 3, 3}, gen, torch::kFloat32) * scale);
    in = out;
  }
}

torch::Tensor RandomConvFeatures::extract(const torch::Tensor& images) const {
  auto x = as_batch(images);
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    x = torch::conv2d(x, weights_[i].to(x.scalar_type()), {}, 2, 1);
    if (i + 1 < weights_.size()) x = torch::relu(x);
  }
  return x;
}

struct ScriptedFeatures::Impl {
  mutable torch::jit::Module module;
};

ScriptedFeatures::ScriptedFeatures(const std::filesystem::path& path) : path_(path.string()) {
  if (!std::filesystem::exists(path)) throw ConfigError("feature extractor not found: " + path_);
  try {
    impl_ = std::make_unique<Impl>(Impl{torch::jit::load(path_)});
  } catch (const c10::Error& e) {
    throw ConfigError("cannot load feature extractor " + path_ + ": " + e.what_without_backtrace());
  }
  impl_->module.eval();
  for (auto p : impl_->module.parameters()) p.set_requires_grad(false);
}

ScriptedFeatures::~ScriptedFeatures() = default;

torch::Tensor ScriptedFeatures::extract(const torch::Tensor& images) const {
  return impl_->module.forward({as_batch(images)}).toTensor();
}

std::shared_ptr<const FeatureExtractor> make_feature_extractor(const FeatureConfig& config) {
  if (config.kind == "random_conv") return std::make_shared<RandomConvFeatures>(config.seed);
  if (config.kind == "identity") return std::make_shared<IdentityFeatures>();
  if (config.kind == "scripted") {
    if (config.path.empty()) throw ConfigError("scripted feature extractor requires a path");
    return std::make_shared<ScriptedFeatures>(config.path);
  }
  throw ConfigError("unknown feature extractor kind '" + config.kind + "'");
}

torch::Tensor content_loss(const torch::Tensor& target, const torch::Tensor& generated,
                           const FeatureExtractor* phi) {
  if (phi == nullptr) throw ConfigError("content_loss: no feature extractor configured");
  require_same_shape(target, generated, "content_loss");
  const auto ft = phi->extract(target);
  const auto fg = phi->extract(generated);
  return (ft - fg).pow(2).mean();
}

torch::Tensor smooth_l1(const torch::Tensor& detected, const torch::Tensor& truth) {
  if (detected.size(-1) != 4 || truth.size(-1) != 4)
    throw InputError("smooth_l1: boxes must have 4 components, got " + shape_string(detected) + " and " +
                     shape_string(truth));
  const auto d = detected - truth;
  const auto a = d.abs();
  return torch::where(a < 1.0, 0.5 * d * d, a - 0.5).sum(-1);
}

double smooth_l1(const Box& detected, const Box& truth, double width, double height) {
  return smooth_l1(box_tensor(detected, width, height), box_tensor(truth, width, height)).item<double>();
}

torch::Tensor classification_loss(const torch::Tensor& score) {
  return -torch::log(score.clamp(kLogEpsilon, 1.0));
}

double classification_loss(double score) {
  return classification_loss(torch::tensor(score, torch::kFloat64)).item<double>();
}

torch::Tensor rc_loss(const torch::Tensor& truth, const std::optional<DetectedTensors>& detected) {
  if (detected) return smooth_l1(detected->box, truth) + classification_loss(detected->score);
  const auto opts = truth.options().requires_grad(false);
  const auto corner = torch::zeros({4}, opts);
  return smooth_l1(corner, truth.detach()) + classification_loss(torch::full({}, kLogEpsilon, opts));
}

double rc_loss(const DetectionTarget& t) {
  const auto truth = box_tensor(t.truth, t.image_width, t.image_height);
  if (!t.found) return rc_loss(truth, std::nullopt).item<double>();
  DetectedTensors det{box_tensor(t.detected, t.image_width, t.image_height),
                      torch::tensor(t.score, torch::kFloat64)};
  return rc_loss(truth, det).item<double>();
}

namespace {

void require_finite(const torch::Tensor& t, const char* name) {
  if (!t.defined()) throw InputError(std::string("total_objective: component '") + name + "' undefined");
  if (!std::isfinite(t.item<double>()))
    throw NumericError(std::string("total_objective: component '") + name + "' is not finite");
}

}  // namespace

Objective total_objective(const LossComponents& c, const LossWeights& weights, AblationMode mode) {
  weights.validate();
  const bool in_g = rc_in_generator(mode);
  const bool in_d = rc_in_discriminator(mode);
  require_finite(c.adversarial_g, "adversarial_g");
  require_finite(c.adversarial_d, "adversarial_d");
  require_finite(c.l1, "l1");
  require_finite(c.content, "content");
  require_finite(c.rc, "rc");
  Objective out;
  out.generator = c.adversarial_g + weights.lambda_1 * c.l1 + weights.lambda_c * c.content;
  if (in_g) out.generator = out.generator + c.rc;
  out.discriminator = in_d ? c.adversarial_d + c.rc : c.adversarial_d;
  return out;
}

Objective total_objective(const LossComponents& c, const LossWeights& weights, std::string_view mode) {
  return total_objective(c, weights, parse_mode(mode));
}

}  // namespace detgan
