#include "detgan/datapipe.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace detgan {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Scenes

namespace {

struct Canvas {
  torch::Tensor xs;  // [S,S] pixel-center x
  torch::Tensor ys;
  torch::Tensor rgb;  // [3,S,S]
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Canvas water_background(std::int64_t size, std::mt19937_64& rng) {
  const auto coords = torch::arange(size, torch::kFloat32) + 0.5;
  auto grids = torch::meshgrid({coords, coords}, "ij");
  Canvas c{grids[1], grids[0], torch::empty({3, size, size})};
  const double s = static_cast<double>(size);
  const double brightness = uniform(rng, 0.75, 1.1);
  const std::array<double, 3> top{uniform(rng, 0.05, 0.25), uniform(rng, 0.45, 0.75), uniform(rng, 0.6, 0.9)};
  const std::array<double, 3> bottom{uniform(rng, 0.02, 0.15), uniform(rng, 0.25, 0.5), uniform(rng, 0.3, 0.6)};
  const auto t = c.ys / s;
  auto texture = torch::zeros({size, size});
  for (int k = 0; k < 3; ++k) {
    const double amp = uniform(rng, 0.01, 0.035);
    const double freq = uniform(rng, 1.0, 5.0) * 2.0 * std::numbers::pi / s;
    const double angle = uniform(rng, 0.0, std::numbers::pi);
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    texture += amp * torch::sin(freq * (std::cos(angle) * c.xs + std::sin(angle) * c.ys) + phase);
  }
  for (int ch = 0; ch < 3; ++ch)
    c.rgb[ch] = ((top[ch] * (1.0 - t) + bottom[ch] * t) * brightness + texture).clamp(0.0, 1.0);
  return c;
}

torch::Tensor ellipse_alpha(const Canvas& c, double cx, double cy, double rx, double ry) {
  const auto d = torch::sqrt(((c.xs - cx) / rx).pow(2) + ((c.ys - cy) / ry).pow(2));
  // One-pixel soft edge.
  return ((1.0 - d) * std::min(rx, ry) + 0.5).clamp(0.0, 1.0);
}

void composite(Canvas& c, const torch::Tensor& alpha, const std::array<double, 3>& color) {
  for (int ch = 0; ch < 3; ++ch) c.rgb[ch] = c.rgb[ch] * (1.0 - alpha) + color[ch] * alpha;
}

void add_distractors(Canvas& c, int count, std::mt19937_64& rng) {
  const double s = static_cast<double>(c.rgb.size(1));
  for (int k = 0; k < count; ++k) {
    const double rx = uniform(rng, 8.0, 32.0);
    const double ry = uniform(rng, 8.0, 32.0);
    const double cx = uniform(rng, 0.0, s);
    const double cy = uniform(rng, 0.0, s);
    const std::array<double, 3> color{uniform(rng, 0.15, 0.45), uniform(rng, 0.3, 0.6), uniform(rng, 0.3, 0.65)};
    composite(c, ellipse_alpha(c, cx, cy, rx, ry) * uniform(rng, 0.6, 1.0), color);
  }
}

}  // namespace

AnnotatedImage render_empty_scene(const SceneConfig& config, std::uint64_t seed, std::string id) {
  std::mt19937_64 rng(seed);
  auto c = water_background(config.size, rng);
  add_distractors(c, uniform_int(rng, 0, config.max_distractors), rng);
  return {std::move(id), quantize_8bit(c.rgb), {}};
}

AnnotatedImage render_scene(const SceneConfig& config, std::uint64_t seed, std::string id) {
  if (config.min_targets < 0 || config.max_targets < config.min_targets || config.min_target_extent <= 0 ||
      config.max_target_extent < config.min_target_extent ||
      config.max_target_extent > static_cast<double>(config.size))
    throw ConfigError("render_scene: inconsistent scene configuration");
  std::mt19937_64 rng(seed);
  auto c = water_background(config.size, rng);
  add_distractors(c, uniform_int(rng, 0, config.max_distractors), rng);

  const double s = static_cast<double>(config.size);
  const int n = uniform_int(rng, config.min_targets, config.max_targets);
  std::vector<Annotation> annotations;
  for (int k = 0; k < n; ++k) {
    Box box;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double w = uniform(rng, config.min_target_extent, config.max_target_extent);
      const double h = std::clamp(w * uniform(rng, 0.5, 2.0), config.min_target_extent, config.max_target_extent);
      box = {uniform(rng, 2.0, s - w - 2.0), uniform(rng, 2.0, s - h - 2.0), w, h};
      // Keep a gap between targets so they stay separable.
      const Box grown{box.x_min - 8, box.y_min - 8, box.w + 16, box.h + 16};
      placed = std::none_of(annotations.begin(), annotations.end(),
                            [&](const Annotation& a) { return iou(a.box, grown) > 0.0; });
    }
    if (!placed) break;
    const double cx = box.x_min + 0.5 * box.w;
    const double cy = box.y_min + 0.5 * box.h;
    const auto alpha = ellipse_alpha(c, cx, cy, 0.5 * box.w, 0.5 * box.h);
    const std::array<double, 3> body{uniform(rng, 0.85, 1.0), uniform(rng, 0.4, 0.8), uniform(rng, 0.0, 0.2)};
    composite(c, alpha, body);
    // Dark band across the short axis.
    const bool wide = box.w >= box.h;
    const double band = 0.12 * (wide ? box.w : box.h);
    const double offset = uniform(rng, -0.2, 0.2) * (wide ? box.w : box.h);
    const auto along = wide ? (c.xs - cx - offset).abs() : (c.ys - cy - offset).abs();
    const auto band_alpha = alpha * (band - along + 0.5).clamp(0.0, 1.0);
    composite(c, band_alpha, {0.05, 0.05, 0.08});
    annotations.push_back({clip_box(box, s, s), config.label});
  }
  return {std::move(id), quantize_8bit(c.rgb), std::move(annotations)};
}

std::vector<AnnotatedImage> synthesize_scenes(const SceneConfig& config, std::size_t count, std::uint64_t seed,
                                              std::string_view id_prefix) {
  std::vector<AnnotatedImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::ostringstream id;
    id << id_prefix << std::setw(5) << std::setfill('0') << i;
    out.push_back(render_scene(config, mix_seed(seed, i), id.str()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filtering

FilterReport filter_by_detection(std::span<const AnnotatedImage> images, const DetectorPort& detector,
                                 double threshold) {
  FilterReport report;
  for (const auto& item : images) {
    if (item.annotations.empty()) {
      report.warnings.push_back("image '" + item.id + "' has no ground-truth annotation; skipped");
      continue;
    }
    const auto top = detect_top1(detector, item.image, threshold);
    if (top && iou(top->box, item.annotations.front().box) > 0.0) {
      report.accepted.push_back(item);
      ++report.kept;
    } else {
      ++report.dropped;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Degradation

void DegradationParams::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  for (int c = 0; c < 3; ++c)
    if (!unit(gains[c]) || !unit(haze_color[c])) throw ConfigError("degradation gains and haze color must lie in [0, 1]");
  if (!unit(haze_weight)) throw ConfigError("haze weight must lie in [0, 1]");
  if (blur_radius < 0 || blur_radius > 15) throw ConfigError("blur radius must lie in [0, 15]");
  if (!(noise_sigma >= 0.0 && noise_sigma <= 0.5)) throw ConfigError("noise sigma must lie in [0, 0.5]");
}

bool DegradationParams::is_identity() const {
  return gains == std::array<double, 3>{1.0, 1.0, 1.0} && haze_weight == 0.0 && blur_radius == 0 &&
         noise_sigma == 0.0;
}

void DegradationRanges::validate() const {
  DegradationParams lo{gain_min, haze_min, haze_color_min, blur_min, noise_min, 0};
  DegradationParams hi{gain_max, haze_max, haze_color_max, blur_max, noise_max, 0};
  lo.validate();
  hi.validate();
  for (int c = 0; c < 3; ++c)
    if (gain_min[c] > gain_max[c] || haze_color_min[c] > haze_color_max[c])
      throw ConfigError("degradation range minimum exceeds maximum");
  if (haze_min > haze_max || blur_min > blur_max || noise_min > noise_max)
    throw ConfigError("degradation range minimum exceeds maximum");
}

DegradationParams sample_degradation(const DegradationRanges& ranges, std::uint64_t seed) {
  ranges.validate();
  std::mt19937_64 rng(seed);
  DegradationParams p;
  for (int c = 0; c < 3; ++c) p.gains[c] = uniform(rng, ranges.gain_min[c], ranges.gain_max[c]);
  p.haze_weight = uniform(rng, ranges.haze_min, ranges.haze_max);
  for (int c = 0; c < 3; ++c) p.haze_color[c] = uniform(rng, ranges.haze_color_min[c], ranges.haze_color_max[c]);
  p.blur_radius = uniform_int(rng, ranges.blur_min, ranges.blur_max);
  p.noise_sigma = uniform(rng, ranges.noise_min, ranges.noise_max);
  p.seed = mix_seed(seed, 1);
  return p;
}

namespace {

torch::Tensor gaussian_blur(const torch::Tensor& image, int radius) {
  const double sigma = std::max(0.5, radius / 2.0);
  const auto taps = torch::arange(-radius, radius + 1, torch::kFloat64);
  auto kernel = torch::exp(-taps.pow(2) / (2.0 * sigma * sigma));
  kernel = (kernel / kernel.sum()).to(image.scalar_type());
  const auto k = 2 * radius + 1;
  auto x = torch::reflection_pad2d(image.unsqueeze(0), {radius, radius, radius, radius});
  x = torch::nn::functional::conv2d(x, kernel.view({1, 1, 1, k}).expand({3, 1, 1, k}).contiguous(),
                                torch::nn::functional::Conv2dFuncOptions().groups(3));
  x = torch::nn::functional::conv2d(x, kernel.view({1, 1, k, 1}).expand({3, 1, k, 1}).contiguous(),
                                torch::nn::functional::Conv2dFuncOptions().groups(3));
  return x.squeeze(0);
}

}  // namespace

torch::Tensor distort(const torch::Tensor& image, const DegradationParams& params) {
  params.validate();
  if (image.dim() != 3 || image.size(0) != 3) throw InputError("distort: expected [3,H,W], got " + shape_string(image));
  if (image.min().item<double>() < 0.0 || image.max().item<double>() > 1.0)
    throw InputError("distort: image values must lie in [0, 1]");
  if (params.is_identity()) return image.clone();
  const auto opts = image.options();
  const auto gains = torch::tensor({params.gains[0], params.gains[1], params.gains[2]}, opts).view({3, 1, 1});
  const auto haze =
      torch::tensor({params.haze_color[0], params.haze_color[1], params.haze_color[2]}, opts).view({3, 1, 1});
  auto out = image * gains;
  out = out * (1.0 - params.haze_weight) + haze * params.haze_weight;
  if (params.blur_radius > 0) out = gaussian_blur(out, params.blur_radius);
  if (params.noise_sigma > 0.0) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(params.seed);
    out = out + torch::randn(out.sizes(), gen, opts) * params.noise_sigma;
  }
  return out.clamp(0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Paired corpus

void to_json(nlohmann::json& j, const DegradationParams& p) {
  j = {{"gains", p.gains},
       {"haze_weight", p.haze_weight},
       {"haze_color", p.haze_color},
       {"blur_radius", p.blur_radius},
       {"noise_sigma", p.noise_sigma},
       {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, DegradationParams& p) {
  j.at("gains").get_to(p.gains);
  j.at("haze_weight").get_to(p.haze_weight);
  j.at("haze_color").get_to(p.haze_color);
  j.at("blur_radius").get_to(p.blur_radius);
  j.at("noise_sigma").get_to(p.noise_sigma);
  j.at("seed").get_to(p.seed);
}

void to_json(nlohmann::json& j, const DegradationRanges& r) {
  j = {{"gain_min", r.gain_min},  {"gain_max", r.gain_max},       {"haze_min", r.haze_min},
       {"haze_max", r.haze_max},  {"haze_color_min", r.haze_color_min}, {"haze_color_max", r.haze_color_max},
       {"blur_min", r.blur_min},  {"blur_max", r.blur_max},       {"noise_min", r.noise_min},
       {"noise_max", r.noise_max}};
}

void from_json(const nlohmann::json& j, DegradationRanges& r) {
  j.at("gain_min").get_to(r.gain_min);
  j.at("gain_max").get_to(r.gain_max);
  j.at("haze_min").get_to(r.haze_min);
  j.at("haze_max").get_to(r.haze_max);
  j.at("haze_color_min").get_to(r.haze_color_min);
  j.at("haze_color_max").get_to(r.haze_color_max);
  j.at("blur_min").get_to(r.blur_min);
  j.at("blur_max").get_to(r.blur_max);
  j.at("noise_min").get_to(r.noise_min);
  j.at("noise_max").get_to(r.noise_max);
}

void to_json(nlohmann::json& j, const CorpusManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"image_id", e.image_id}, {"seed", e.seed}, {"params", e.params}, {"category", e.category}});
  j = {{"format", "detgan-corpus-1"}, {"seed", m.seed}, {"ranges", m.ranges}, {"entries", entries}};
}

void from_json(const nlohmann::json& j, CorpusManifest& m) {
  if (j.value("format", "") != "detgan-corpus-1") throw DataError("manifest: unsupported format");
  j.at("seed").get_to(m.seed);
  j.at("ranges").get_to(m.ranges);
  m.entries.clear();
  for (const auto& e : j.at("entries")) {
    ManifestEntry entry;
    e.at("image_id").get_to(entry.image_id);
    e.at("seed").get_to(entry.seed);
    e.at("params").get_to(entry.params);
    entry.category = e.value("category", "");
    m.entries.push_back(std::move(entry));
  }
}

PairedCorpus build_paired_corpus(std::span<const AnnotatedImage> clean, std::uint64_t seed,
                                 const DegradationRanges& ranges) {
  ranges.validate();
  for (const auto& item : clean)
    if (item.annotations.size() != 1)
      throw DataError("build_paired_corpus: image '" + item.id + "' has " + std::to_string(item.annotations.size()) +
                      " annotations; training pairs require exactly one");
  PairedCorpus corpus;
  corpus.manifest.seed = seed;
  corpus.manifest.ranges = ranges;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    ManifestEntry entry;
    entry.image_id = clean[i].id;
    entry.seed = mix_seed(seed, i);
    entry.params = sample_degradation(ranges, entry.seed);
    corpus.manifest.entries.push_back(entry);
  }
  auto rebuilt = regenerate_corpus(clean, corpus.manifest);
  corpus.samples = std::move(rebuilt.samples);
  return corpus;
}

PairedCorpus regenerate_corpus(std::span<const AnnotatedImage> clean, const CorpusManifest& manifest) {
  std::map<std::string, const AnnotatedImage*> by_id;
  for (const auto& item : clean) by_id[item.id] = &item;
  PairedCorpus corpus;
  corpus.manifest = manifest;
  corpus.samples.resize(manifest.entries.size());
  // Items are independent; the order of results follows the manifest.
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& entry = manifest.entries[i];
    const auto it = by_id.find(entry.image_id);
    if (it == by_id.end()) throw DataError("regenerate_corpus: clean image '" + entry.image_id + "' not found");
    const auto& item = *it->second;
    if (item.annotations.size() != 1)
      throw DataError("regenerate_corpus: image '" + item.id + "' must carry exactly one annotation");
    corpus.samples[i] = {item.id, quantize_8bit(distort(item.image, entry.params)), item.image,
                         item.annotations.front()};
  }
  return corpus;
}

std::vector<AnnotatedImage> distorted_view(const PairedCorpus& corpus) {
  std::vector<AnnotatedImage> out;
  out.reserve(corpus.samples.size());
  for (const auto& s : corpus.samples) out.push_back({s.image_id, s.distorted, {s.annotation}});
  return out;
}

// ---------------------------------------------------------------------------
// Categories

std::string_view to_string(DatasetCategory category) {
  switch (category) {
    case DatasetCategory::SdDetected: return "SD-Detected";
    case DatasetCategory::SdUndetected: return "SD-Undetected";
    case DatasetCategory::MdAllDetected: return "MD-AllDetected";
    case DatasetCategory::MdSomeDetected: return "MD-SomeDetected";
  }
  return "unknown";
}

DatasetCategory parse_category(std::string_view text) {
  for (auto c : {DatasetCategory::SdDetected, DatasetCategory::SdUndetected, DatasetCategory::MdAllDetected,
                 DatasetCategory::MdSomeDetected})
    if (to_string(c) == text) return c;
  throw ConfigError("unknown dataset category '" + std::string(text) + "'");
}

std::map<DatasetCategory, std::vector<AnnotatedImage>> categorize_test_set(std::span<const AnnotatedImage> images,
                                                                           const DetectorPort& detector,
                                                                           double threshold) {
  std::map<DatasetCategory, std::vector<AnnotatedImage>> out;
  for (const auto& item : images) {
    if (item.annotations.empty())
      throw InputError("categorize_test_set: image '" + item.id + "' has no ground-truth annotation");
    const auto dets = detect_all(detector, item.image, threshold);
    std::vector<bool> claimed(item.annotations.size(), false);
    std::size_t matched = 0;
    for (const auto& d : dets) {
      std::size_t best = item.annotations.size();
      double best_iou = 0.5;
      for (std::size_t g = 0; g < item.annotations.size(); ++g) {
        if (claimed[g]) continue;
        const double v = iou(d.box, item.annotations[g].box);
        if (v > best_iou) {
          best_iou = v;
          best = g;
        }
      }
      if (best < item.annotations.size()) {
        claimed[best] = true;
        ++matched;
      }
    }
    DatasetCategory category;
    if (item.annotations.size() == 1)
      category = matched == 1 ? DatasetCategory::SdDetected : DatasetCategory::SdUndetected;
    else
      category = matched == item.annotations.size() ? DatasetCategory::MdAllDetected : DatasetCategory::MdSomeDetected;
    out[category].push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Directory layout

void write_annotations(const fs::path& path, const AnnotatedImage& image) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write annotations " + path.string());
  os << std::setprecision(17);
  for (const auto& a : image.annotations)
    os << image.id << ',' << a.label << ',' << a.box.x_min << ',' << a.box.y_min << ',' << a.box.w << ','
       << a.box.h << '\n';
}

std::vector<Annotation> read_annotations(const fs::path& path, const std::string& image_id) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read annotations " + path.string());
  std::vector<Annotation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    const auto where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 6) throw DataError(where + ": expected 6 fields");
    if (f[0] != image_id) throw DataError(where + ": record for '" + f[0] + "' in file of '" + image_id + "'");
    Annotation a;
    a.label = f[1];
    try {
      a.box = {std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])};
    } catch (const std::exception&) {
      throw DataError(where + ": malformed number");
    }
    if (!(a.box.w > 0.0 && a.box.h > 0.0) || a.box.x_min < 0.0 || a.box.y_min < 0.0)
      throw DataError(where + ": ground-truth box needs x_min, y_min >= 0 and w, h > 0");
    out.push_back(a);
  }
  return out;
}

void write_annotated_set(const fs::path& dir, std::span<const AnnotatedImage> images) {
  for (const auto& item : images) {
    write_image(dir / "images" / (item.id + ".png"), item.image);
    write_annotations(dir / "annotations" / (item.id + ".txt"), item);
  }
}

std::vector<AnnotatedImage> read_annotated_set(const fs::path& dir) {
  const auto image_dir = dir / "images";
  if (!fs::is_directory(image_dir)) throw DataError("missing images/ directory under " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(image_dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<AnnotatedImage> out;
  for (const auto& f : files) {
    AnnotatedImage item;
    item.id = f.stem().string();
    item.image = read_image(f);
    const auto ann = dir / "annotations" / (item.id + ".txt");
    if (fs::exists(ann)) item.annotations = read_annotations(ann, item.id);
    out.push_back(std::move(item));
  }
  return out;
}

void write_corpus(const fs::path& dir, const PairedCorpus& corpus) {
  fs::create_directories(dir);
  for (const auto& s : corpus.samples) {
    write_image(dir / "images" / (s.image_id + ".png"), s.target);
    write_image(dir / "distorted" / (s.image_id + ".png"), s.distorted);
    write_annotations(dir / "annotations" / (s.image_id + ".txt"), {s.image_id, {}, {s.annotation}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw DataError("cannot write manifest under " + dir.string());
  os << nlohmann::json(corpus.manifest).dump(2) << '\n';
}

PairedCorpus read_corpus(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("missing manifest.json under " + dir.string());
  PairedCorpus corpus;
  try {
    corpus.manifest = nlohmann::json::parse(is).get<CorpusManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest under " + dir.string() + ": " + e.what());
  }
  for (const auto& e : corpus.manifest.entries) {
    PairedSample s;
    s.image_id = e.image_id;
    s.target = read_image(dir / "images" / (e.image_id + ".png"));
    s.distorted = read_image(dir / "distorted" / (e.image_id + ".png"));
    const auto ann = read_annotations(dir / "annotations" / (e.image_id + ".txt"), e.image_id);
    if (ann.size() != 1) throw DataError("corpus image '" + e.image_id + "' must carry exactly one annotation");
    s.annotation = ann.front();
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Dataset synthesis

void SynthesisConfig::validate() const {
  if (train_count == 0 || test_count == 0) throw ConfigError("train_count and test_count must be positive");
  if (test_multi_max_targets < 2 && test_multi_count > 0)
    throw ConfigError("test_multi_max_targets must be >= 2 when multi-target scenes are requested");
  if (!(filter_threshold >= 0.0 && filter_threshold <= 1.0)) throw ConfigError("filter_threshold must lie in [0, 1]");
  ranges.validate();
}

void apply_setting(SynthesisConfig& c, const std::string& key, const std::string& value) {
  if (key == "seed") c.seed = parse_setting<std::uint64_t>(key, value);
  else if (key == "train_count") c.train_count = parse_setting<std::size_t>(key, value);
  else if (key == "test_count") c.test_count = parse_setting<std::size_t>(key, value);
  else if (key == "test_multi_count") c.test_multi_count = parse_setting<std::size_t>(key, value);
  else if (key == "test_multi_max_targets") c.test_multi_max_targets = parse_setting<int>(key, value);
  else if (key == "detector_corpus") c.detector_corpus = parse_setting<std::size_t>(key, value);
  else if (key == "detector_epochs") c.detector.epochs = parse_setting<int>(key, value);
  else if (key == "detector_batch_size") c.detector.batch_size = parse_setting<int>(key, value);
  else if (key == "filter_threshold") c.filter_threshold = parse_setting<double>(key, value);
  else if (key == "max_distractors") c.scene.max_distractors = parse_setting<int>(key, value);
  else if (key == "min_target_extent") c.scene.min_target_extent = parse_setting<double>(key, value);
  else if (key == "max_target_extent") c.scene.max_target_extent = parse_setting<double>(key, value);
  else if (key == "blur_max") c.ranges.blur_max = parse_setting<int>(key, value);
  else if (key == "noise_max") c.ranges.noise_max = parse_setting<double>(key, value);
  else if (key == "haze_max") c.ranges.haze_max = parse_setting<double>(key, value);
  else throw ConfigError("unknown synthesis key '" + key + "'");
}

SynthesisConfig load_synthesis_config(const fs::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  SynthesisConfig config;
  if (root.IsNull()) return config;
  if (!root.IsMap()) throw ConfigError(path.string() + ": expected a mapping of synthesis keys");
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (!kv.second.IsScalar()) throw ConfigError(path.string() + ": value of '" + key + "' must be a scalar");
    apply_setting(config, key, kv.second.as<std::string>());
  }
  return config;
}

namespace {

std::string numbered(std::string_view prefix, std::size_t i) {
  std::ostringstream id;
  id << prefix << std::setw(5) << std::setfill('0') << i;
  return id.str();
}

}  // namespace

SyntheticDataset synthesize_dataset(const SynthesisConfig& config) {
  config.validate();
  SyntheticDataset ds;

  auto detector_scene = config.scene;
  detector_scene.min_targets = 1;
  detector_scene.max_targets = std::max(config.scene.max_targets, config.test_multi_count > 0 ? config.test_multi_max_targets : 1);
  const auto detector_images = synthesize_scenes(detector_scene, config.detector_corpus, mix_seed(config.seed, 101), "det_");
  auto detector_config = config.detector;
  detector_config.seed = mix_seed(config.seed, 808);
  detector_config.label = config.scene.label;
  ds.detector = train_toy_detector(detector_images, detector_config);

  std::vector<AnnotatedImage> train_clean;
  const auto limit = 4 * config.train_count;
  while (train_clean.size() < config.train_count && ds.train_candidates < limit) {
    const auto i = ds.train_candidates++;
    const auto scene = render_scene(config.scene, mix_seed(mix_seed(config.seed, 202), i), numbered("train_", i));
    const auto report = filter_by_detection(std::span(&scene, 1), *ds.detector, config.filter_threshold);
    if (report.kept == 1) train_clean.push_back(scene);
    else ++ds.train_dropped;
  }
  if (train_clean.size() < config.train_count)
    throw DataError("detector validation kept only " + std::to_string(train_clean.size()) + " of " +
                    std::to_string(ds.train_candidates) + " candidate scenes");
  ds.train = build_paired_corpus(train_clean, mix_seed(config.seed, 505), config.ranges);
  for (auto& e : ds.train.manifest.entries) e.category = "train";

  const auto test_clean = synthesize_scenes(config.scene, config.test_count, mix_seed(config.seed, 303), "test_");
  ds.test = build_paired_corpus(test_clean, mix_seed(config.seed, 606), config.ranges);
  for (auto& e : ds.test.manifest.entries) e.category = "test";

  if (config.test_multi_count > 0) {
    auto multi_scene = config.scene;
    multi_scene.min_targets = 2;
    multi_scene.max_targets = config.test_multi_max_targets;
    const auto multi = synthesize_scenes(multi_scene, config.test_multi_count, mix_seed(config.seed, 404), "multi_");
    for (std::size_t i = 0; i < multi.size(); ++i) {
      const auto params = sample_degradation(config.ranges, mix_seed(mix_seed(config.seed, 707), i));
      ds.test_multi.push_back({multi[i].id, quantize_8bit(distort(multi[i].image, params)), multi[i].annotations});
    }
  }
  return ds;
}

void write_dataset(const fs::path& dir, const SyntheticDataset& ds) {
  fs::create_directories(dir);
  ds.detector->save(dir / "detector.pt");
  write_corpus(dir / "train", ds.train);
  write_corpus(dir / "test", ds.test);
  if (!ds.test_multi.empty()) write_annotated_set(dir / "test_multi", ds.test_multi);
}

}  // namespace detgan
