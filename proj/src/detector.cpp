#include "detgan/detector.hpp"

#include <torch/script.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <tuple>

#include "detgan/nets.hpp"

namespace detgan {

namespace nn = torch::nn;

Detection TopDetection::to_detection() const {
  Detection d;
  const auto b = box.detach().to(torch::kFloat64).cpu();
  const auto* p = b.data_ptr<double>();
  d.box = {p[0], p[1], p[2], p[3]};
  d.score = score.detach().item<double>();
  d.label = label;
  return d;
}

std::optional<Detection> detect_top1(const DetectorPort& port, const torch::Tensor& image, double threshold) {
  auto all = port.detect(image, threshold);
  if (all.empty()) return std::nullopt;
  return all.front();
}

std::vector<Detection> detect_all(const DetectorPort& port, const torch::Tensor& image, double threshold) {
  return port.detect(image, threshold);
}

void sort_detections(std::vector<Detection>& detections) {
  std::stable_sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.box < b.box;
  });
}

std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold) {
  sort_detections(detections);
  std::vector<Detection> kept;
  for (auto& d : detections) {
    const bool overlaps = std::any_of(kept.begin(), kept.end(),
                                      [&](const Detection& k) { return iou(k.box, d.box) > iou_threshold; });
    if (!overlaps) kept.push_back(std::move(d));
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Toy detector

ToyDetectorNetImpl::ToyDetectorNetImpl() {
  auto conv = [](std::int64_t in, std::int64_t out, std::int64_t stride, std::int64_t dilation) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(dilation).dilation(dilation));
  };
  auto act = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.1)); };
  backbone_ = register_module(
      "backbone", nn::Sequential(conv(3, 16, 2, 1), act(), conv(16, 32, 2, 1), act(), conv(32, 64, 2, 1), act(),
                                 conv(64, 64, 1, 1), act(), conv(64, 64, 1, 2), act(), conv(64, 64, 1, 4), act()));
  heat_ = register_module("heat", nn::Conv2d(nn::Conv2dOptions(64, 1, 1)));
  box_ = register_module("box", nn::Conv2d(nn::Conv2dOptions(64, 4, 1)));
  torch::NoGradGuard no_grad;
  // Prior probability 0.1 for every cell.
  heat_->bias.fill_(-2.19);
  nn::init::normal_(box_->weight, 0.0, 0.01);
  box_->bias.zero_();
}

torch::Tensor ToyDetectorNetImpl::forward(const torch::Tensor& images) {
  const auto feats = backbone_->forward((images - 0.5) / 0.25);
  return torch::cat({heat_(feats), box_(feats)}, 1);
}

namespace {

struct DecodedMaps {
  torch::Tensor score;  // [N,G,G]
  torch::Tensor boxes;  // [N,G,G,4] pixels in original image coordinates, clipped
};

DecodedMaps decode(const torch::Tensor& raw, double width, double height) {
  const auto grid = raw.size(2);
  const auto opts = raw.options().requires_grad(false);
  const auto stride = static_cast<double>(ToyDetectorNetImpl::kStride);
  const double sx = width / static_cast<double>(ToyDetectorNetImpl::kInputSize);
  const double sy = height / static_cast<double>(ToyDetectorNetImpl::kInputSize);
  const auto cols = torch::arange(grid, opts).view({1, 1, grid});
  const auto rows = torch::arange(grid, opts).view({1, grid, 1});

  const auto score = torch::sigmoid(raw.select(1, 0));
  const auto cx = (cols + torch::sigmoid(raw.select(1, 1))) * stride * sx;
  const auto cy = (rows + torch::sigmoid(raw.select(1, 2))) * stride * sy;
  const auto w = torch::exp(raw.select(1, 3).clamp(-4.0, 4.0)) * ToyDetectorNetImpl::kExtentUnit * sx;
  const auto h = torch::exp(raw.select(1, 4).clamp(-4.0, 4.0)) * ToyDetectorNetImpl::kExtentUnit * sy;
  const auto x0 = (cx - 0.5 * w).clamp(0.0, width);
  const auto y0 = (cy - 0.5 * h).clamp(0.0, height);
  const auto x1 = (cx + 0.5 * w).clamp(0.0, width);
  const auto y1 = (cy + 0.5 * h).clamp(0.0, height);
  return {score, torch::stack({x0, y0, x1 - x0, y1 - y0}, -1)};
}

void require_file_batch(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3)
    throw InputError("detector: expected [N,3,H,W] images, got " + shape_string(images));
}

}  // namespace

ToyDetector::ToyDetector(ToyDetectorNet net, std::string label, double nms_iou)
    : net_(std::move(net)), metadata_{"toy-centernet", ToyDetectorNetImpl::kInputSize, {std::move(label)}},
      nms_iou_(nms_iou) {
  net_->eval();
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

torch::Tensor ToyDetector::raw_output(const torch::Tensor& images) const {
  require_file_batch(images);
  const auto s = ToyDetectorNetImpl::kInputSize;
  return net_->forward(resize_batch(images, s, s));
}

std::vector<Detection> ToyDetector::detect(const torch::Tensor& image, double threshold) const {
  require_image_shape(image, image.size(-2), image.size(-1), "detect");
  if (image.dim() != 3) throw InputError("detect: expected a single [3,H,W] image, got " + shape_string(image));
  torch::NoGradGuard no_grad;
  const double width = static_cast<double>(image.size(2));
  const double height = static_cast<double>(image.size(1));
  const auto raw = raw_output(image.unsqueeze(0));
  const auto maps = decode(raw, width, height);
  const auto score = maps.score[0];
  const auto pooled = torch::max_pool2d(score.unsqueeze(0), 3, 1, 1).squeeze(0);
  const auto peaks = torch::logical_and(score == pooled, score >= threshold);
  const auto idx = torch::nonzero(peaks).to(torch::kCPU);
  const auto boxes = maps.boxes[0].to(torch::kFloat64).cpu();
  const auto scores = score.to(torch::kFloat64).cpu();
  std::vector<Detection> out;
  for (int64_t k = 0; k < idx.size(0); ++k) {
    const auto i = idx[k][0].item<int64_t>();
    const auto j = idx[k][1].item<int64_t>();
    const auto b = boxes[i][j];
    Detection d;
    d.box = {b[0].item<double>(), b[1].item<double>(), b[2].item<double>(), b[3].item<double>()};
    d.score = scores[i][j].item<double>();
    d.label = metadata_.classes.front();
    out.push_back(d);
  }
  return non_max_suppression(std::move(out), nms_iou_);
}

std::vector<TopDetection> ToyDetector::top1_batch(const torch::Tensor& images, double threshold) const {
  require_file_batch(images);
  const auto maps = decode(raw_output(images), static_cast<double>(images.size(3)),
                           static_cast<double>(images.size(2)));
  const auto n = images.size(0);
  const auto flat_scores = maps.score.reshape({n, -1});
  const auto flat_boxes = maps.boxes.reshape({n, -1, 4});
  const auto best = flat_scores.detach().argmax(1);
  std::vector<TopDetection> out(static_cast<std::size_t>(n));
  for (int64_t b = 0; b < n; ++b) {
    const auto k = best[b].item<int64_t>();
    auto s = flat_scores[b][k];
    auto& top = out[static_cast<std::size_t>(b)];
    if (s.item<double>() < threshold) continue;
    top.found = true;
    top.score = s;
    top.box = flat_boxes[b][k];
    top.label = metadata_.classes.front();
  }
  return out;
}

std::uint64_t ToyDetector::checksum() const { return parameter_checksum(*net_); }

void ToyDetector::to_double() { net_->to(torch::kFloat64); }

void ToyDetector::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive ar;
  net_->save(ar);
  ar.write("meta/label", c10::IValue(metadata_.classes.front()));
  ar.write("meta/nms_iou", c10::IValue(nms_iou_));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  ar.save_to(path.string());
}

std::shared_ptr<ToyDetector> ToyDetector::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("detector weights not found: " + path.string());
  torch::serialize::InputArchive ar;
  ToyDetectorNet net;
  c10::IValue label, nms;
  try {
    ar.load_from(path.string());
    net->load(ar);
    if (!ar.try_read("meta/label", label) || !ar.try_read("meta/nms_iou", nms))
      throw ConfigError("detector weights " + path.string() + " lack metadata records");
  } catch (const c10::Error& e) {
    throw ConfigError("cannot load detector weights " + path.string() + ": " + e.what_without_backtrace());
  }
  return std::make_shared<ToyDetector>(net, label.toStringRef(), nms.toDouble());
}

namespace {

struct TargetMaps {
  torch::Tensor heat;    // [G,G]
  torch::Tensor centers; // [G,G] 1 at box centers
  torch::Tensor box;     // [4,G,G] offset x, offset y, log w, log h
};

TargetMaps build_targets(const std::vector<Annotation>& annotations, double width, double height, bool flip) {
  constexpr auto grid = ToyDetectorNetImpl::kInputSize / ToyDetectorNetImpl::kStride;
  const double stride = static_cast<double>(ToyDetectorNetImpl::kStride);
  const double sx = static_cast<double>(ToyDetectorNetImpl::kInputSize) / width;
  const double sy = static_cast<double>(ToyDetectorNetImpl::kInputSize) / height;
  TargetMaps t{torch::zeros({grid, grid}), torch::zeros({grid, grid}), torch::zeros({4, grid, grid})};
  const auto cols = torch::arange(grid, torch::kFloat32).view({1, grid}) + 0.5;
  const auto rows = torch::arange(grid, torch::kFloat32).view({grid, 1}) + 0.5;
  for (const auto& a : annotations) {
    Box b = a.box;
    if (flip) b.x_min = width - b.x_max();
    const double w = b.w * sx;
    const double h = b.h * sy;
    if (w <= 0.0 || h <= 0.0) continue;
    const double cx = (b.x_min + 0.5 * b.w) * sx / stride;
    const double cy = (b.y_min + 0.5 * b.h) * sy / stride;
    const auto j = std::clamp<int64_t>(static_cast<int64_t>(std::floor(cx)), 0, grid - 1);
    const auto i = std::clamp<int64_t>(static_cast<int64_t>(std::floor(cy)), 0, grid - 1);
    const double sigma = std::max(0.8, std::sqrt(w * h) / stride / 5.0);
    const auto g = torch::exp(-((cols - (j + 0.5)).pow(2) + (rows - (i + 0.5)).pow(2)) / (2.0 * sigma * sigma));
    t.heat = torch::maximum(t.heat, g);
    t.centers[i][j] = 1.0;
    t.box[0][i][j] = std::clamp(cx - static_cast<double>(j), 1e-3, 1.0 - 1e-3);
    t.box[1][i][j] = std::clamp(cy - static_cast<double>(i), 1e-3, 1.0 - 1e-3);
    t.box[2][i][j] = std::log(w / ToyDetectorNetImpl::kExtentUnit);
    t.box[3][i][j] = std::log(h / ToyDetectorNetImpl::kExtentUnit);
  }
  t.heat = torch::where(t.centers > 0, torch::ones_like(t.heat), t.heat.clamp_max(0.999));
  return t;
}

torch::Tensor detector_loss(const torch::Tensor& raw, const torch::Tensor& heat_t, const torch::Tensor& centers,
                            const torch::Tensor& box_t) {
  const auto p = torch::sigmoid(raw.select(1, 0)).clamp(1e-6, 1.0 - 1e-6);
  const auto pos = centers;
  const auto neg = 1.0 - centers;
  const auto num_pos = pos.sum().clamp_min(1.0);
  const auto pos_loss = -(torch::log(p) * (1.0 - p).pow(2) * pos).sum();
  const auto neg_loss = -(torch::log(1.0 - p) * p.pow(2) * (1.0 - heat_t).pow(4) * neg).sum();
  const auto off = torch::sigmoid(raw.slice(1, 1, 3));
  const auto ext = raw.slice(1, 3, 5);
  const auto mask = pos.unsqueeze(1);
  const auto reg = ((off - box_t.slice(1, 0, 2)).abs() * mask).sum() +
                   ((ext - box_t.slice(1, 2, 4)).abs() * mask).sum();
  return (pos_loss + neg_loss + reg) / num_pos;
}

}  // namespace

std::shared_ptr<ToyDetector> train_toy_detector(std::span<const AnnotatedImage> corpus,
                                                const ToyDetectorConfig& config) {
  if (corpus.size() < config.min_corpus)
    throw ConfigError("train_toy_detector: corpus of " + std::to_string(corpus.size()) +
                      " images is below the minimum of " + std::to_string(config.min_corpus));
  if (config.epochs < 1 || config.batch_size < 1) throw ConfigError("train_toy_detector: epochs and batch_size must be >= 1");
  for (const auto& item : corpus)
    if (item.annotations.empty()) throw ConfigError("train_toy_detector: image '" + item.id + "' has no annotation");

  torch::manual_seed(config.seed);
  ToyDetectorNet net;
  net->train();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(config.learning_rate));

  const auto s = ToyDetectorNetImpl::kInputSize;
  std::vector<torch::Tensor> inputs;
  inputs.reserve(corpus.size());
  for (const auto& item : corpus) inputs.push_back(resize_batch(item.image.unsqueeze(0), s, s).squeeze(0));

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  const auto total_steps = config.epochs * static_cast<int>((corpus.size() + config.batch_size - 1) / config.batch_size);
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<torch::Tensor> xs, hs, cs, bs;
      for (std::size_t k = start; k < end; ++k) {
        const auto& item = corpus[order[k]];
        const bool flip = coin(rng);
        auto x = inputs[order[k]];
        if (flip) x = x.flip({2});
        const auto t = build_targets(item.annotations, static_cast<double>(item.image.size(2)),
                                     static_cast<double>(item.image.size(1)), flip);
        xs.push_back(x);
        hs.push_back(t.heat);
        cs.push_back(t.centers);
        bs.push_back(t.box);
      }
      // Cosine decay keeps the last epochs stable.
      const double lr = config.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * step / std::max(1, total_steps)));
      for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
      const auto raw = net->forward(torch::stack(xs));
      const auto loss = detector_loss(raw, torch::stack(hs), torch::stack(cs), torch::stack(bs));
      opt.zero_grad();
      loss.backward();
      opt.step();
      ++step;
    }
  }
  return std::make_shared<ToyDetector>(net, config.label, config.nms_iou);
}

// ---------------------------------------------------------------------------
// External frozen graph

struct ExternalDetector::Impl {
  mutable torch::jit::Module module;
};

ExternalDetector::ExternalDetector(const ExternalDetectorConfig& config) : nms_iou_(config.nms_iou) {
  if (!std::filesystem::exists(config.model_path))
    throw ConfigError("detector model not found: " + config.model_path.string());
  if (!std::filesystem::exists(config.class_map_path))
    throw ConfigError("detector class map not found: " + config.class_map_path.string());
  if (config.input_size < 1) throw ConfigError("detector input_size must be positive");
  try {
    impl_ = std::make_unique<Impl>(Impl{torch::jit::load(config.model_path.string())});
  } catch (const c10::Error& e) {
    throw ConfigError("cannot load detector model " + config.model_path.string() + ": " + e.what_without_backtrace());
  }
  impl_->module.eval();
  for (auto p : impl_->module.parameters()) p.set_requires_grad(false);

  std::ifstream in(config.class_map_path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::int64_t id;
    std::string name;
    if (!(ls >> id >> name)) throw ConfigError("malformed class map line: '" + line + "'");
    class_names_[id] = name;
  }
  if (class_names_.empty()) throw ConfigError("class map " + config.class_map_path.string() + " is empty");
  metadata_.name = "external:" + config.model_path.filename().string();
  metadata_.input_size = config.input_size;
  for (const auto& [id, name] : class_names_) metadata_.classes.push_back(name);
}

ExternalDetector::~ExternalDetector() = default;

std::vector<Detection> ExternalDetector::detect(const torch::Tensor& image, double threshold) const {
  if (image.dim() != 3 || image.size(0) != 3)
    throw InputError("detect: expected a single [3,H,W] image, got " + shape_string(image));
  torch::NoGradGuard no_grad;
  const double width = static_cast<double>(image.size(2));
  const double height = static_cast<double>(image.size(1));
  const auto s = metadata_.input_size;
  const auto input = resize_batch(image.unsqueeze(0).to(torch::kFloat32), s, s);
  const auto result = impl_->module.forward({input}).toTuple();
  const auto boxes = result->elements().at(0).toTensor().to(torch::kFloat64).reshape({-1, 4});
  const auto scores = result->elements().at(1).toTensor().to(torch::kFloat64).reshape({-1});
  const auto classes = result->elements().at(2).toTensor().to(torch::kInt64).reshape({-1});
  std::vector<Detection> out;
  for (int64_t k = 0; k < scores.size(0); ++k) {
    const double score = std::clamp(scores[k].item<double>(), 0.0, 1.0);
    if (score < threshold) continue;
    const double ymin = boxes[k][0].item<double>(), xmin = boxes[k][1].item<double>();
    const double ymax = boxes[k][2].item<double>(), xmax = boxes[k][3].item<double>();
    Detection d;
    d.box = clip_box({xmin * width, ymin * height, (xmax - xmin) * width, (ymax - ymin) * height}, width, height);
    d.score = score;
    const auto it = class_names_.find(classes[k].item<int64_t>());
    d.label = it != class_names_.end() ? it->second : metadata_.classes.front();
    out.push_back(d);
  }
  return non_max_suppression(std::move(out), nms_iou_);
}

std::vector<TopDetection> ExternalDetector::top1_batch(const torch::Tensor& images, double threshold) const {
  require_file_batch(images);
  std::vector<TopDetection> out(static_cast<std::size_t>(images.size(0)));
  for (int64_t b = 0; b < images.size(0); ++b) {
    const auto top = detect_top1(*this, images[b].detach(), threshold);
    if (!top) continue;
    auto& t = out[static_cast<std::size_t>(b)];
    t.found = true;
    t.box = torch::tensor({top->box.x_min, top->box.y_min, top->box.w, top->box.h}, images.options().requires_grad(false));
    t.score = torch::full({}, top->score, images.options().requires_grad(false));
    t.label = top->label;
  }
  return out;
}

std::uint64_t ExternalDetector::checksum() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& p : impl_->module.named_parameters()) {
    mix(p.name.data(), p.name.size());
    const auto c = p.value.detach().cpu().contiguous();
    mix(c.data_ptr(), c.numel() * c.element_size());
  }
  return h;
}

// ---------------------------------------------------------------------------
// Records

void write_detection_records(std::ostream& os, std::span<const DetectionRecord> records) {
  os << "# image_id,label,score,x_min,y_min,w,h\n";
  os << std::setprecision(9);
  for (const auto& r : records) {
    const auto& d = r.detection;
    os << r.image_id << ',' << d.label << ',' << d.score << ',' << d.box.x_min << ',' << d.box.y_min << ','
       << d.box.w << ',' << d.box.h << '\n';
  }
}

std::vector<DetectionRecord> read_detection_records(std::istream& is) {
  std::vector<DetectionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 7) throw DataError("detection record line " + std::to_string(lineno) + ": expected 7 fields");
    try {
      DetectionRecord r;
      r.image_id = fields[0];
      r.detection.label = fields[1];
      r.detection.score = std::stod(fields[2]);
      r.detection.box = {std::stod(fields[3]), std::stod(fields[4]), std::stod(fields[5]), std::stod(fields[6])};
      out.push_back(std::move(r));
    } catch (const std::exception&) {
      throw DataError("detection record line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

}  // namespace detgan
