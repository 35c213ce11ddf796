#include "detgan/nets.hpp"

#include <bit>
#include <cmath>
#include <sstream>

#include "detgan/image.hpp"

namespace detgan {

namespace nn = torch::nn;

void NetConfig::validate() const {
  if (!(width_multiplier > 0.0) || width_multiplier > 4.0)
    throw ConfigError("width_multiplier must lie in (0, 4], got " + std::to_string(width_multiplier));
  if (!(decoder_dropout >= 0.0 && decoder_dropout < 1.0))
    throw ConfigError("decoder_dropout must lie in [0, 1), got " + std::to_string(decoder_dropout));
}

std::int64_t NetConfig::scaled(std::int64_t channels) const {
  return std::max<std::int64_t>(4, std::llround(static_cast<double>(channels) * width_multiplier));
}

DownBlockImpl::DownBlockImpl(std::int64_t in, std::int64_t out, bool batch_norm) {
  conv_ = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1).bias(false)));
  if (batch_norm) norm_ = register_module("norm", nn::BatchNorm2d(out));
}

torch::Tensor DownBlockImpl::forward(const torch::Tensor& x) {
  auto y = conv_(x);
  if (norm_) y = norm_(y);
  return torch::leaky_relu(y, 0.2);
}

UpBlockImpl::UpBlockImpl(std::int64_t in, std::int64_t out, double dropout) {
  deconv_ = register_module(
      "deconv", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1).bias(false)));
  norm_ = register_module("norm", nn::BatchNorm2d(out));
  if (dropout > 0.0) dropout_ = register_module("dropout", nn::Dropout(dropout));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  auto y = torch::relu(norm_(deconv_(x)));
  if (dropout_) y = dropout_(y);
  return torch::cat({y, skip}, 1);
}

GeneratorImpl::GeneratorImpl(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto c32 = config_.scaled(32);
  const auto c128 = config_.scaled(128);
  const auto c256 = config_.scaled(256);
  const double p = config_.decoder_dropout;

  down1_ = register_module("down1", DownBlock(3, c32, false));
  down2_ = register_module("down2", DownBlock(c32, c128, true));
  down3_ = register_module("down3", DownBlock(c128, c256, true));
  down4_ = register_module("down4", DownBlock(c256, c256, true));
  down5_ = register_module("down5", DownBlock(c256, kBottleneckChannels, false));

  up1_ = register_module("up1", UpBlock(kBottleneckChannels, c256, p));
  up2_ = register_module("up2", UpBlock(c256 + c256, c256, p));
  up3_ = register_module("up3", UpBlock(c256 + c256, c128, 0.0));
  up4_ = register_module("up4", UpBlock(c128 + c128, c32, 0.0));
  final_ = register_module("final", nn::Conv2d(nn::Conv2dOptions(c32 + c32, 3, 4).padding(1)));
}

std::pair<torch::Tensor, torch::Tensor> GeneratorImpl::forward_with_bottleneck(const torch::Tensor& x) {
  require_image_shape(x, kImageSize, kImageSize, "generator input");
  const auto in = as_batch(x);
  auto d1 = down1_(in);
  auto d2 = down2_(d1);
  auto d3 = down3_(d2);
  auto d4 = down4_(d3);
  auto d5 = down5_(d4);
  auto u = up1_(d5, d4);
  u = up2_(u, d3);
  u = up3_(u, d2);
  u = up4_(u, d1);
  u = torch::upsample_nearest2d(u, std::vector<int64_t>{kImageSize, kImageSize});
  // Asymmetric pad so a 4x4 kernel keeps the 256x256 size.
  u = torch::constant_pad_nd(u, {1, 0, 1, 0});
  auto out = torch::tanh(final_(u));
  if (x.dim() == 3) return {out.squeeze(0), d5.squeeze(0)};
  return {out, d5};
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& x) { return forward_with_bottleneck(x).first; }

DiscriminatorImpl::DiscriminatorImpl(const NetConfig& config) {
  config.validate();
  const auto c32 = config.scaled(32);
  const auto c64 = config.scaled(64);
  const auto c128 = config.scaled(128);
  const auto c256 = config.scaled(256);
  nn::Sequential body;
  auto block = [&](std::int64_t in, std::int64_t out, bool norm) {
    body->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
    if (norm) body->push_back(nn::BatchNorm2d(out));
    body->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  };
  block(6, c32, false);
  block(c32, c64, true);
  block(c64, c128, true);
  block(c128, c256, true);
  body->push_back(nn::ZeroPad2d(nn::ZeroPad2dOptions({1, 0, 1, 0})));
  body->push_back(nn::Conv2d(nn::Conv2dOptions(c256, 1, 4).padding(1).bias(false)));
  body_ = register_module("body", body);
}

torch::Tensor DiscriminatorImpl::logits(const torch::Tensor& reference, const torch::Tensor& candidate) {
  require_image_shape(reference, kImageSize, kImageSize, "discriminator reference");
  require_image_shape(candidate, kImageSize, kImageSize, "discriminator candidate");
  if (reference.sizes() != candidate.sizes())
    throw InputError("discriminator: mismatched image pair shapes " + shape_string(reference) + " vs " +
                     shape_string(candidate));
  auto out = body_->forward(torch::cat({as_batch(reference), as_batch(candidate)}, 1));
  return reference.dim() == 3 ? out.squeeze(0) : out;
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& reference, const torch::Tensor& candidate) {
  return torch::sigmoid(logits(reference, candidate));
}

void init_gan_weights(nn::Module& module) {
  torch::NoGradGuard no_grad;
  module.apply([](nn::Module& m) {
    if (auto* conv = m.as<nn::Conv2d>()) {
      nn::init::normal_(conv->weight, 0.0, 0.02);
    } else if (auto* deconv = m.as<nn::ConvTranspose2d>()) {
      nn::init::normal_(deconv->weight, 0.0, 0.02);
    } else if (auto* bn = m.as<nn::BatchNorm2d>()) {
      nn::init::normal_(bn->weight, 1.0, 0.02);
      nn::init::constant_(bn->bias, 0.0);
    }
  });
}

ModelBundle make_models(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  torch::manual_seed(seed);
  ModelBundle models{config, Generator(config), Discriminator(config)};
  init_gan_weights(*models.generator);
  init_gan_weights(*models.discriminator);
  return models;
}

namespace {

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
}

void fnv_tensor(std::uint64_t& h, const std::string& name, const torch::Tensor& t) {
  fnv_bytes(h, name.data(), name.size());
  const auto c = t.detach().cpu().contiguous();
  fnv_bytes(h, c.data_ptr(), c.numel() * c.element_size());
}

constexpr const char* kGen = "generator/";
constexpr const char* kDisc = "discriminator/";

void write_module(torch::serialize::OutputArchive& ar, const std::string& prefix, const nn::Module& m) {
  for (const auto& p : m.named_parameters()) ar.write(prefix + p.key(), p.value().detach());
  for (const auto& b : m.named_buffers()) ar.write(prefix + b.key(), b.value(), /*is_buffer=*/true);
}

void read_module(torch::serialize::InputArchive& ar, const std::string& prefix, nn::Module& m,
                 std::vector<std::string>& missing, std::vector<std::string>& mismatched) {
  torch::NoGradGuard no_grad;
  auto restore = [&](const std::string& name, torch::Tensor& target, bool is_buffer) {
    torch::Tensor loaded;
    if (!ar.try_read(prefix + name, loaded, is_buffer)) {
      missing.push_back(prefix + name);
      return;
    }
    if (loaded.sizes() != target.sizes() || loaded.scalar_type() != target.scalar_type()) {
      mismatched.push_back(prefix + name + " " + shape_string(loaded) + " vs expected " + shape_string(target));
      return;
    }
    target.copy_(loaded);
  };
  for (auto& p : m.named_parameters()) restore(p.key(), p.value(), false);
  for (auto& b : m.named_buffers()) restore(b.key(), b.value(), true);
}

std::int64_t as_signed(std::uint64_t v) { return std::bit_cast<std::int64_t>(v); }
std::uint64_t as_unsigned(std::int64_t v) { return std::bit_cast<std::uint64_t>(v); }

CheckpointManifest read_manifest(torch::serialize::InputArchive& ar, const std::filesystem::path& path) {
  CheckpointManifest m;
  c10::IValue v;
  auto need = [&](const char* key) {
    if (!ar.try_read(std::string("manifest/") + key, v))
      throw LoadError(path.string() + ": manifest record '" + key + "' missing");
    return v;
  };
  m.format_version = need("format_version").toStringRef();
  m.width_multiplier = need("width_multiplier").toDouble();
  m.decoder_dropout = need("decoder_dropout").toDouble();
  m.epoch = need("epoch").toInt();
  m.mode = need("mode").toStringRef();
  m.generator_checksum = as_unsigned(need("generator_checksum").toInt());
  m.discriminator_checksum = as_unsigned(need("discriminator_checksum").toInt());
  if (m.format_version != "1")
    throw LoadError(path.string() + ": unsupported checkpoint format version " + m.format_version);
  return m;
}

}  // namespace

std::uint64_t parameter_checksum(const nn::Module& module) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& p : module.named_parameters()) fnv_tensor(h, p.key(), p.value());
  for (const auto& b : module.named_buffers()) fnv_tensor(h, b.key(), b.value());
  return h;
}

void save_checkpoint(const std::filesystem::path& path, const ModelBundle& models, CheckpointManifest manifest,
                     const ArchiveWriter& extra) {
  manifest.width_multiplier = models.config.width_multiplier;
  manifest.decoder_dropout = models.config.decoder_dropout;
  manifest.generator_checksum = parameter_checksum(*models.generator);
  manifest.discriminator_checksum = parameter_checksum(*models.discriminator);

  torch::serialize::OutputArchive ar;
  write_module(ar, kGen, *models.generator);
  write_module(ar, kDisc, *models.discriminator);
  ar.write("manifest/format_version", c10::IValue(manifest.format_version));
  ar.write("manifest/width_multiplier", c10::IValue(manifest.width_multiplier));
  ar.write("manifest/decoder_dropout", c10::IValue(manifest.decoder_dropout));
  ar.write("manifest/epoch", c10::IValue(manifest.epoch));
  ar.write("manifest/mode", c10::IValue(manifest.mode));
  ar.write("manifest/generator_checksum", c10::IValue(as_signed(manifest.generator_checksum)));
  ar.write("manifest/discriminator_checksum", c10::IValue(as_signed(manifest.discriminator_checksum)));
  if (extra) extra(ar);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  ar.save_to(path.string());
}

namespace {

torch::serialize::InputArchive open_archive(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(path.string());
  } catch (const c10::Error& e) {
    throw LoadError("cannot open checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return ar;
}

void restore_bundle(torch::serialize::InputArchive& ar, const std::filesystem::path& path, ModelBundle& models,
                    const CheckpointManifest& manifest) {
  std::vector<std::string> missing, mismatched;
  read_module(ar, kGen, *models.generator, missing, mismatched);
  read_module(ar, kDisc, *models.discriminator, missing, mismatched);
  if (!missing.empty() || !mismatched.empty()) {
    std::ostringstream os;
    os << path.string() << ": incompatible checkpoint.";
    if (!missing.empty()) {
      os << " missing parameters:";
      for (const auto& n : missing) os << " " << n;
      os << ".";
    }
    if (!mismatched.empty()) {
      os << " mismatched parameters:";
      for (const auto& n : mismatched) os << " " << n << ";";
    }
    throw LoadError(os.str());
  }
  if (parameter_checksum(*models.generator) != manifest.generator_checksum ||
      parameter_checksum(*models.discriminator) != manifest.discriminator_checksum)
    throw LoadError(path.string() + ": parameter checksum mismatch against manifest");
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ArchiveReader& extra) {
  auto ar = open_archive(path);
  const auto manifest = read_manifest(ar, path);
  NetConfig config{manifest.width_multiplier, manifest.decoder_dropout};
  config.validate();
  LoadedCheckpoint out{{config, Generator(config), Discriminator(config)}, manifest};
  restore_bundle(ar, path, out.models, manifest);
  if (extra) extra(ar);
  return out;
}

CheckpointManifest load_pretrained(const std::filesystem::path& path, ModelBundle& models,
                                   const ArchiveReader& extra) {
  auto ar = open_archive(path);
  const auto manifest = read_manifest(ar, path);
  if (manifest.width_multiplier != models.config.width_multiplier)
    throw LoadError(path.string() + ": width_multiplier " + std::to_string(manifest.width_multiplier) +
                    " does not match configured " + std::to_string(models.config.width_multiplier));
  restore_bundle(ar, path, models, manifest);
  if (extra) extra(ar);
  return manifest;
}

}  // namespace detgan
