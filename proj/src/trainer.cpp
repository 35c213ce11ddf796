#include "detgan/trainer.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "detgan/image.hpp"

namespace detgan {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1, got " + std::to_string(batch_size));
  if (epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(detector_threshold >= 0.0 && detector_threshold <= 1.0))
    throw ConfigError("detector_threshold must lie in [0, 1]");
  net.validate();
  weights.validate();
}

namespace {

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("invalid boolean for '" + key + "': '" + value + "'");
}

std::string number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "mode") c.mode = parse_mode(value);
  else if (key == "batch_size") c.batch_size = parse_setting<int>(key, value);
  else if (key == "epochs") c.epochs = parse_setting<int>(key, value);
  else if (key == "learning_rate") c.learning_rate = parse_setting<double>(key, value);
  else if (key == "beta1") c.beta1 = parse_setting<double>(key, value);
  else if (key == "beta2") c.beta2 = parse_setting<double>(key, value);
  else if (key == "seed") c.seed = parse_setting<std::uint64_t>(key, value);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_setting<int>(key, value);
  else if (key == "pretrained") c.pretrained = value;
  else if (key == "width_multiplier") c.net.width_multiplier = parse_setting<double>(key, value);
  else if (key == "decoder_dropout") c.net.decoder_dropout = parse_setting<double>(key, value);
  else if (key == "lambda_1") c.weights.lambda_1 = parse_setting<double>(key, value);
  else if (key == "lambda_c") c.weights.lambda_c = parse_setting<double>(key, value);
  else if (key == "feature_kind") c.features.kind = value;
  else if (key == "feature_seed") c.features.seed = parse_setting<std::uint64_t>(key, value);
  else if (key == "feature_path") c.features.path = value;
  else if (key == "detector_threshold") c.detector_threshold = parse_setting<double>(key, value);
  else if (key == "rc_telemetry") c.rc_telemetry = parse_bool(key, value);
  else throw ConfigError("unknown training key '" + key + "'");
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  TrainConfig config;
  if (root.IsNull()) return config;
  if (!root.IsMap()) throw ConfigError(path.string() + ": expected a mapping of training keys");
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (!kv.second.IsScalar()) throw ConfigError(path.string() + ": value of '" + key + "' must be a scalar");
    apply_setting(config, key, kv.second.as<std::string>());
  }
  return config;
}

std::string to_yaml(const TrainConfig& c) {
  std::ostringstream os;
  os << "mode: " << to_string(c.mode) << "\n"
     << "batch_size: " << c.batch_size << "\n"
     << "epochs: " << c.epochs << "\n"
     << "learning_rate: " << number(c.learning_rate) << "\n"
     << "beta1: " << number(c.beta1) << "\n"
     << "beta2: " << number(c.beta2) << "\n"
     << "seed: " << c.seed << "\n"
     << "checkpoint_every: " << c.checkpoint_every << "\n"
     << "pretrained: \"" << c.pretrained << "\"\n"
     << "width_multiplier: " << number(c.net.width_multiplier) << "\n"
     << "decoder_dropout: " << number(c.net.decoder_dropout) << "\n"
     << "lambda_1: " << number(c.weights.lambda_1) << "\n"
     << "lambda_c: " << number(c.weights.lambda_c) << "\n"
     << "feature_kind: " << c.features.kind << "\n"
     << "feature_seed: " << c.features.seed << "\n"
     << "feature_path: \"" << c.features.path << "\"\n"
     << "detector_threshold: " << number(c.detector_threshold) << "\n"
     << "rc_telemetry: " << (c.rc_telemetry ? "true" : "false") << "\n";
  return os.str();
}

RcRouting rc_gradient_path(AblationMode mode, bool detector_differentiable) {
  RcRouting r;
  if (rc_in_generator(mode)) r.generator = detector_differentiable ? RcRoute::Native : RcRoute::StraightThrough;
  r.discriminator_scalar = rc_in_discriminator(mode);
  return r;
}

const std::vector<std::string>& loss_component_names() {
  static const std::vector<std::string> names{"adversarial_g", "adversarial_d",   "l1",
                                              "content",       "rc",              "generator_total",
                                              "discriminator_total"};
  return names;
}

std::vector<double> component_values(const StepLosses& l) {
  return {l.adversarial_g, l.adversarial_d, l.l1, l.content, l.rc, l.generator_total, l.discriminator_total};
}

namespace {

StepLosses from_values(std::span<const double> v) {
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
}

}  // namespace

void write_loss_curves(const std::filesystem::path& path, std::span<const EpochRecord> history) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write loss curves: " + path.string());
  os << "epoch,component,value\n" << std::setprecision(17);
  const auto& names = loss_component_names();
  for (const auto& rec : history) {
    const auto values = component_values(rec.mean);
    for (std::size_t i = 0; i < names.size(); ++i) os << rec.epoch << "," << names[i] << "," << values[i] << "\n";
  }
}

std::vector<EpochRecord> read_loss_curves(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read loss curves: " + path.string());
  const auto& names = loss_component_names();
  std::vector<EpochRecord> out;
  std::vector<double> values(names.size());
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string epoch, name, value;
    if (!std::getline(ls, epoch, ',') || !std::getline(ls, name, ',') || !std::getline(ls, value))
      throw DataError("malformed loss-curve line: " + line);
    const auto e = std::stoll(epoch);
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw DataError("unknown loss component: " + name);
    values[static_cast<std::size_t>(it - names.begin())] = std::stod(value);
    if (it + 1 == names.end()) out.push_back({e, from_values(values)});
  }
  return out;
}

double FrozenObjectives::generator(AblationMode mode) const {
  return rc_in_generator(mode) ? components.generator_total + components.rc : components.generator_total;
}

double FrozenObjectives::discriminator(AblationMode mode) const {
  return rc_in_discriminator(mode) ? components.discriminator_total + components.rc : components.discriminator_total;
}

// ---------------------------------------------------------------------------

struct Trainer::Forward {
  torch::Tensor x;       // distorted, model space
  torch::Tensor y;       // target, model space
  torch::Tensor fake;    // G(x)
  torch::Tensor rc;      // batch-mean L_rc; carries autograd history on the native path
  torch::Tensor region;  // L1 over annotated regions (straight-through path)
};

namespace {

torch::Tensor stack_field(std::span<const PairedSample> batch, bool distorted) {
  std::vector<torch::Tensor> parts;
  parts.reserve(batch.size());
  for (const auto& s : batch) {
    const auto& t = distorted ? s.distorted : s.target;
    require_image_shape(t, kImageSize, kImageSize, distorted ? "distorted sample" : "target sample");
    parts.push_back(t);
  }
  return torch::stack(parts).to(torch::kFloat32);
}

torch::Tensor scalar_like(const torch::Tensor& ref, double v) { return torch::full({}, v, ref.options()); }

}  // namespace

Trainer::Trainer(TrainConfig config, ModelBundle models, std::shared_ptr<const DetectorPort> detector)
    : config_(std::move(config)), models_(std::move(models)), detector_(std::move(detector)) {
  config_.validate();
  if (!detector_) throw ConfigError("trainer requires a detector port");
  if (!models_.generator || !models_.discriminator) throw ConfigError("trainer requires constructed networks");
  features_ = make_feature_extractor(config_.features);
  if (!config_.pretrained.empty()) load_pretrained(config_.pretrained, models_);
  const auto adam = [&] {
    return torch::optim::AdamOptions(config_.learning_rate).betas({config_.beta1, config_.beta2});
  };
  opt_g_ = std::make_unique<torch::optim::Adam>(models_.generator->parameters(), adam());
  opt_d_ = std::make_unique<torch::optim::Adam>(models_.discriminator->parameters(), adam());
}

torch::Tensor Trainer::conditioned(const torch::Tensor& reference, const torch::Tensor& candidate) const {
  return hook_ ? hook_(reference, candidate, *detector_) : reference;
}

Trainer::Forward Trainer::forward(std::span<const PairedSample> batch, bool rc_with_grad, bool need_rc) {
  Forward f;
  f.x = to_model_space(stack_field(batch, true));
  f.y = to_model_space(stack_field(batch, false));
  f.fake = models_.generator->forward(f.x);
  const double w = static_cast<double>(f.fake.size(3));
  const double h = static_cast<double>(f.fake.size(2));

  if (!need_rc) {
    f.rc = scalar_like(f.fake, 0.0);
    return f;
  }
  std::optional<torch::NoGradGuard> no_grad;
  if (!rc_with_grad) no_grad.emplace();
  const auto images = to_file_space(rc_with_grad ? f.fake : f.fake.detach());
  const auto tops = detector_->top1_batch(images, config_.detector_threshold);
  const auto scale = torch::tensor({w, h, w, h}, f.fake.options());
  std::vector<torch::Tensor> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& b = batch[i].annotation.box;
    const auto truth = torch::tensor({b.x_min / w, b.y_min / h, b.w / w, b.h / h}, f.fake.options());
    const auto& top = tops[i];
    if (top.found)
      terms.push_back(rc_loss(truth, DetectedTensors{top.box.to(f.fake.dtype()) / scale, top.score.to(f.fake.dtype())}));
    else
      terms.push_back(rc_loss(truth, std::nullopt));
  }
  f.rc = torch::stack(terms).mean();
  return f;
}

void Trainer::fail_numeric(const std::string& what, const torch::Tensor& inputs) const {
  std::filesystem::create_directories(diagnostics_dir_);
  const auto stem = diagnostics_dir_ / ("nonfinite_epoch" + std::to_string(epoch_ + 1));
  torch::save(inputs.detach().cpu(), stem.string() + "_inputs.pt");
  std::ofstream os(stem.string() + "_norms.txt");
  os << "# " << what << "\n" << std::setprecision(9);
  const auto dump = [&os](const torch::nn::Module& module, const char* name) {
    for (const auto& p : module.named_parameters())
      os << name << "." << p.key() << " " << p.value().detach().norm().item<double>() << "\n";
  };
  dump(*models_.generator, "generator");
  dump(*models_.discriminator, "discriminator");
  throw NumericError(what + " (snapshot: " + stem.string() + "_*)");
}

void Trainer::check_gradients(torch::nn::Module& module, const char* name, const torch::Tensor& inputs) const {
  for (const auto& p : module.named_parameters()) {
    const auto& g = p.value().grad();
    if (g.defined() && !torch::isfinite(g).all().item<bool>())
      fail_numeric(std::string("non-finite gradient in ") + name + "." + p.key(), inputs);
  }
}

StepLosses Trainer::train_step(std::span<const PairedSample> batch) {
  if (batch.empty()) throw InputError("train_step: empty batch");
  const auto route = rc_gradient_path(config_.mode, detector_->differentiable());
  const bool need_rc = config_.rc_telemetry || route.generator != RcRoute::None || route.discriminator_scalar;
  models_.generator->train();
  models_.discriminator->train();

  auto f = forward(batch, route.generator == RcRoute::Native, need_rc);
  if (!std::isfinite(f.rc.item<double>())) fail_numeric("non-finite rc loss", f.x);

  // Discriminator update.
  opt_d_->zero_grad();
  const auto fake_d = f.fake.detach();
  const auto adv = adversarial_loss(models_.discriminator->forward(conditioned(f.x, f.y), f.y),
                                    models_.discriminator->forward(conditioned(f.x, fake_d), fake_d));
  auto d_total = adv.discriminator;
  if (route.discriminator_scalar) d_total = d_total + f.rc.detach();
  if (!std::isfinite(d_total.item<double>())) fail_numeric("non-finite discriminator loss", f.x);
  d_total.backward();
  check_gradients(*models_.discriminator, "discriminator", f.x);
  opt_d_->step();

  // Generator update against the refreshed discriminator.
  opt_g_->zero_grad();
  const auto d_fake = models_.discriminator->forward(conditioned(f.x, f.fake), f.fake);
  const auto adv_g = -torch::log(d_fake.clamp(kLogEpsilon, 1.0 - kLogEpsilon)).mean();
  const auto l1 = global_similarity_loss(f.y, f.fake);
  const auto content = content_loss(f.y, f.fake, features_.get());
  auto rc_g = f.rc;
  if (route.generator == RcRoute::StraightThrough) {
    std::vector<torch::Tensor> regions;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto b = clip_box(batch[i].annotation.box, static_cast<double>(kImageSize), static_cast<double>(kImageSize));
      const auto x0 = static_cast<int64_t>(std::floor(b.x_min));
      const auto y0 = static_cast<int64_t>(std::floor(b.y_min));
      const auto x1 = std::max(x0 + 1, static_cast<int64_t>(std::ceil(b.x_max())));
      const auto y1 = std::max(y0 + 1, static_cast<int64_t>(std::ceil(b.y_max())));
      const auto idx = static_cast<int64_t>(i);
      regions.push_back((f.fake[idx].slice(1, y0, y1).slice(2, x0, x1) - f.y[idx].slice(1, y0, y1).slice(2, x0, x1))
                            .abs()
                            .mean());
    }
    const auto region = torch::stack(regions).mean();
    rc_g = f.rc.detach() + 2.0 * (region - region.detach());
  }
  LossComponents comps{adv_g, adv.discriminator.detach(), l1, content, rc_g};
  for (const auto& [t, name] : {std::pair{adv_g, "adversarial_g"}, {l1, "l1"}, {content, "content"}})
    if (!std::isfinite(t.item<double>())) fail_numeric(std::string("non-finite ") + name + " loss", f.x);
  const auto objective = total_objective(comps, config_.weights, config_.mode);
  objective.generator.backward();
  check_gradients(*models_.generator, "generator", f.x);
  opt_g_->step();

  StepLosses out;
  out.adversarial_g = adv_g.item<double>();
  out.adversarial_d = adv.discriminator.item<double>();
  out.l1 = l1.item<double>();
  out.content = content.item<double>();
  out.rc = f.rc.item<double>();
  out.generator_total = objective.generator.item<double>();
  out.discriminator_total = d_total.item<double>();
  return out;
}

FrozenObjectives Trainer::evaluate_objectives(std::span<const PairedSample> batch) {
  if (batch.empty()) throw InputError("evaluate_objectives: empty batch");
  torch::NoGradGuard no_grad;
  const bool g_train = models_.generator->is_training();
  const bool d_train = models_.discriminator->is_training();
  models_.generator->eval();
  models_.discriminator->eval();
  auto f = forward(batch, false, true);
  const auto adv = adversarial_loss(models_.discriminator->forward(conditioned(f.x, f.y), f.y),
                                    models_.discriminator->forward(conditioned(f.x, f.fake), f.fake));
  models_.generator->train(g_train);
  models_.discriminator->train(d_train);
  LossComponents comps{adv.generator, adv.discriminator, global_similarity_loss(f.y, f.fake),
                       content_loss(f.y, f.fake, features_.get()), f.rc};
  const auto base = total_objective(comps, config_.weights, AblationMode::N);
  FrozenObjectives out;
  out.components.adversarial_g = adv.generator.item<double>();
  out.components.adversarial_d = adv.discriminator.item<double>();
  out.components.l1 = comps.l1.item<double>();
  out.components.content = comps.content.item<double>();
  out.components.rc = f.rc.item<double>();
  out.components.generator_total = base.generator.item<double>();
  out.components.discriminator_total = base.discriminator.item<double>();
  return out;
}

TrainResult Trainer::train(std::span<const PairedSample> corpus, const std::filesystem::path& out_dir) {
  if (corpus.empty()) throw DataError("training corpus is empty");
  config_.validate();
  std::filesystem::create_directories(out_dir);
  const auto detector_checksum = detector_->checksum();
  const auto curves = out_dir / "loss_curves.csv";
  const auto& names = loss_component_names();

  for (std::int64_t e = epoch_ + 1; e <= config_.epochs; ++e) {
    torch::manual_seed(mix_seed(config_.seed, static_cast<std::uint64_t>(e)));
    std::mt19937_64 rng(mix_seed(config_.seed ^ 0x9E3779B97F4A7C15ULL, static_cast<std::uint64_t>(e)));
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<double> sums(names.size(), 0.0);
    std::size_t seen = 0;
    const auto bs = static_cast<std::size_t>(config_.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<PairedSample> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(corpus[order[i]]);
      const auto losses = component_values(train_step(batch));
      for (std::size_t k = 0; k < sums.size(); ++k) sums[k] += losses[k] * static_cast<double>(batch.size());
      seen += batch.size();
    }
    for (auto& s : sums) s /= static_cast<double>(seen);
    history_.push_back({e, from_values(sums)});
    epoch_ = e;
    write_loss_curves(curves, history_);
    if (config_.checkpoint_every > 0 && e % config_.checkpoint_every == 0) {
      std::ostringstream name;
      name << "checkpoint_epoch_" << std::setw(4) << std::setfill('0') << e << ".pt";
      save(out_dir / name.str());
      save(out_dir / "last.pt");
    }
  }
  if (detector_->checksum() != detector_checksum) throw Error("detector parameters changed during training");

  TrainResult result;
  result.final_checkpoint = out_dir / "final.pt";
  save(result.final_checkpoint);
  write_loss_curves(curves, history_);
  result.history = history_;
  result.detector_checksum = detector_checksum;
  return result;
}

void Trainer::save(const std::filesystem::path& path) const {
  CheckpointManifest manifest;
  manifest.epoch = epoch_;
  manifest.mode = std::string(to_string(config_.mode));
  save_checkpoint(path, models_, manifest, [this](torch::serialize::OutputArchive& ar) {
    torch::serialize::OutputArchive g, d;
    opt_g_->save(g);
    opt_d_->save(d);
    ar.write("trainer/optimizer_g", g);
    ar.write("trainer/optimizer_d", d);
    const auto width = static_cast<int64_t>(loss_component_names().size()) + 1;
    auto hist = torch::zeros({static_cast<int64_t>(history_.size()), width}, torch::kFloat64);
    for (std::size_t i = 0; i < history_.size(); ++i) {
      const auto values = component_values(history_[i].mean);
      const auto row = static_cast<int64_t>(i);
      hist[row][0] = static_cast<double>(history_[i].epoch);
      for (std::size_t k = 0; k < values.size(); ++k) hist[row][static_cast<int64_t>(k) + 1] = values[k];
    }
    ar.write("trainer/history", hist);
  });
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint, TrainConfig config,
                        std::shared_ptr<const DetectorPort> detector) {
  torch::serialize::InputArchive opt_g, opt_d;
  torch::Tensor hist;
  auto loaded = load_checkpoint(checkpoint, [&](torch::serialize::InputArchive& ar) {
    try {
      ar.read("trainer/optimizer_g", opt_g);
      ar.read("trainer/optimizer_d", opt_d);
      ar.read("trainer/history", hist);
    } catch (const c10::Error& e) {
      throw LoadError(checkpoint.string() + ": not a training checkpoint (" + e.what_without_backtrace() + ")");
    }
  });
  if (loaded.manifest.mode != to_string(config.mode))
    throw ConfigError(checkpoint.string() + ": checkpoint was trained in mode " + loaded.manifest.mode +
                      ", config requests " + std::string(to_string(config.mode)));
  config.net = loaded.models.config;
  config.pretrained.clear();
  Trainer t(std::move(config), loaded.models, std::move(detector));
  t.opt_g_->load(opt_g);
  t.opt_d_->load(opt_d);
  t.epoch_ = loaded.manifest.epoch;
  hist = hist.contiguous();
  for (int64_t r = 0; r < hist.size(0); ++r) {
    std::vector<double> values(static_cast<std::size_t>(hist.size(1) - 1));
    for (std::size_t k = 0; k < values.size(); ++k) values[k] = hist[r][static_cast<int64_t>(k) + 1].item<double>();
    t.history_.push_back({static_cast<std::int64_t>(hist[r][0].item<double>()), from_values(values)});
  }
  return t;
}

}  // namespace detgan
