#include "detgan/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace detgan {

MatchResult match_detections(std::span<const Detection> detections, std::span<const Box> truths, double iou_gate) {
  MatchResult r;
  std::vector<bool> claimed(truths.size(), false);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    std::size_t best = truths.size();
    double best_iou = -1.0;
    for (std::size_t g = 0; g < truths.size(); ++g) {
      if (claimed[g]) continue;
      const double v = iou(detections[d].box, truths[g]);
      if (v > 0.0 && v >= iou_gate && v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best < truths.size()) {
      claimed[best] = true;
      r.pairs.push_back({d, best, best_iou});
    } else {
      r.unmatched_detections.push_back(d);
    }
  }
  for (std::size_t g = 0; g < truths.size(); ++g)
    if (!claimed[g]) r.unmatched_truths.push_back(g);
  return r;
}

double penalized_mean_iou(std::span<const MatchResult> results) {
  if (results.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : results) {
    const auto entries = r.pairs.size() + r.unmatched_detections.size() + r.unmatched_truths.size();
    if (entries == 0) continue;
    double sum = 0.0;
    for (const auto& p : r.pairs) sum += p.iou;
    total += sum / static_cast<double>(entries);
  }
  return 100.0 * total / static_cast<double>(results.size());
}

std::optional<double> average_precision(std::span<const ScoredDetection> detections,
                                        const std::map<std::string, std::vector<Box>>& truths, double iou_gate) {
  std::size_t total_truths = 0;
  for (const auto& [id, boxes] : truths) total_truths += boxes.size();
  if (total_truths == 0) return std::nullopt;

  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& da = detections[a];
    const auto& db = detections[b];
    if (da.detection.score != db.detection.score) return da.detection.score > db.detection.score;
    if (da.image_id != db.image_id) return da.image_id < db.image_id;
    return da.detection.box < db.detection.box;
  });

  std::map<std::string, std::vector<bool>> claimed;
  for (const auto& [id, boxes] : truths) claimed[id].assign(boxes.size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (auto idx : order) {
    const auto& d = detections[idx];
    bool hit = false;
    const auto it = truths.find(d.image_id);
    if (it != truths.end()) {
      auto& used = claimed[d.image_id];
      std::size_t best = it->second.size();
      double best_iou = -1.0;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (used[g]) continue;
        const double v = iou(d.detection.box, it->second[g]);
        if (v >= iou_gate && v > best_iou) {
          best_iou = v;
          best = g;
        }
      }
      if (best < it->second.size()) {
        used[best] = true;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_truths));
  }

  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return 100.0 * ap;
}

// ---------------------------------------------------------------------------
// UIQM

namespace {

struct Plane {
  std::int64_t h = 0, w = 0;
  std::vector<double> v;
  double at(std::int64_t y, std::int64_t x) const { return v[static_cast<std::size_t>(y * w + x)]; }
};

std::int64_t reflect(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

// Gradient magnitude of the two separable Sobel responses, with half-sample
// symmetric boundaries.
Plane sobel_magnitude(const Plane& p) {
  Plane out{p.h, p.w, std::vector<double>(p.v.size())};
  for (std::int64_t y = 0; y < p.h; ++y) {
    for (std::int64_t x = 0; x < p.w; ++x) {
      auto px = [&](std::int64_t dy, std::int64_t dx) { return p.at(reflect(y + dy, p.h), reflect(x + dx, p.w)); };
      const double gy = (px(1, -1) + 2 * px(1, 0) + px(1, 1)) - (px(-1, -1) + 2 * px(-1, 0) + px(-1, 1));
      const double gx = (px(-1, 1) + 2 * px(0, 1) + px(1, 1)) - (px(-1, -1) + 2 * px(0, -1) + px(1, -1));
      out.v[static_cast<std::size_t>(y * p.w + x)] = std::hypot(gy, gx);
    }
  }
  return out;
}

double trimmed_mean(std::vector<double> x, double alpha_low, double alpha_high) {
  std::sort(x.begin(), x.end());
  const auto k = static_cast<double>(x.size());
  const auto low = static_cast<std::size_t>(std::ceil(alpha_low * k));
  const auto high = static_cast<std::size_t>(std::floor(alpha_high * k));
  if (low + high >= x.size()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = low; i < x.size() - high; ++i) sum += x[i];
  return sum / static_cast<double>(x.size() - low - high);
}

double spread(const std::vector<double>& x, double mu) {
  double s = 0.0;
  for (double v : x) s += (v - mu) * (v - mu);
  return s / static_cast<double>(x.size());
}

double colorfulness(const std::array<Plane, 3>& rgb) {
  const auto n = rgb[0].v.size();
  std::vector<double> rg(n), yb(n);
  for (std::size_t i = 0; i < n; ++i) {
    rg[i] = rgb[0].v[i] - rgb[1].v[i];
    yb[i] = 0.5 * (rgb[0].v[i] + rgb[1].v[i]) - rgb[2].v[i];
  }
  const double mu_rg = trimmed_mean(rg, 0.1, 0.1);
  const double mu_yb = trimmed_mean(yb, 0.1, 0.1);
  const double s_rg = spread(rg, mu_rg);
  const double s_yb = spread(yb, mu_yb);
  return -0.0268 * std::sqrt(mu_rg * mu_rg + mu_yb * mu_yb) + 0.1586 * std::sqrt(s_rg + s_yb);
}

// Block enhancement measure: 2/(k1 k2) * sum log(max/min) over window x window blocks.
double eme(const Plane& p, std::int64_t window) {
  const auto k1 = p.w / window;
  const auto k2 = p.h / window;
  if (k1 == 0 || k2 == 0) return 0.0;
  double val = 0.0;
  for (std::int64_t bx = 0; bx < k1; ++bx) {
    for (std::int64_t by = 0; by < k2; ++by) {
      double mx = -std::numeric_limits<double>::infinity(), mn = std::numeric_limits<double>::infinity();
      for (std::int64_t y = by * window; y < (by + 1) * window; ++y)
        for (std::int64_t x = bx * window; x < (bx + 1) * window; ++x) {
          mx = std::max(mx, p.at(y, x));
          mn = std::min(mn, p.at(y, x));
        }
      if (mn == 0.0 || mx == 0.0) continue;
      val += std::log(mx / mn);
    }
  }
  return 2.0 / static_cast<double>(k1 * k2) * val;
}

double sharpness(const std::array<Plane, 3>& rgb) {
  constexpr std::array<double, 3> weights{0.299, 0.587, 0.114};
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    auto mag = sobel_magnitude(rgb[c]);
    const double peak = *std::max_element(mag.v.begin(), mag.v.end());
    for (std::size_t i = 0; i < mag.v.size(); ++i) {
      const double scaled = peak > 0.0 ? mag.v[i] * 255.0 / peak : 0.0;
      mag.v[i] = scaled * rgb[c].v[i];
    }
    total += weights[c] * eme(mag, 10);
  }
  return total;
}

// Logarithmic AMEE-style contrast over blocks spanning all three channels.
double contrast(const std::array<Plane, 3>& rgb, std::int64_t window) {
  const auto k1 = rgb[0].w / window;
  const auto k2 = rgb[0].h / window;
  if (k1 == 0 || k2 == 0) return 0.0;
  double val = 0.0;
  for (std::int64_t bx = 0; bx < k1; ++bx) {
    for (std::int64_t by = 0; by < k2; ++by) {
      double mx = -std::numeric_limits<double>::infinity(), mn = std::numeric_limits<double>::infinity();
      for (const auto& p : rgb)
        for (std::int64_t y = by * window; y < (by + 1) * window; ++y)
          for (std::int64_t x = bx * window; x < (bx + 1) * window; ++x) {
            mx = std::max(mx, p.at(y, x));
            mn = std::min(mn, p.at(y, x));
          }
      const double top = mx - mn;
      const double bot = mx + mn;
      if (top == 0.0 || bot == 0.0) continue;
      const double ratio = top / bot;
      val += ratio * std::log(ratio);
    }
  }
  return -val / static_cast<double>(k1 * k2);
}

}  // namespace

UiqmScore uiqm(const torch::Tensor& image, const UiqmCoefficients& k) {
  if (image.dim() != 3 || image.size(0) != 3)
    throw InputError("uiqm: expected a 3-channel [3,H,W] image, got " + shape_string(image));
  const auto data = image.detach().to(torch::kFloat64).cpu().contiguous().mul(255.0);
  const auto h = data.size(1), w = data.size(2);
  std::array<Plane, 3> rgb;
  const auto* p = data.data_ptr<double>();
  for (int c = 0; c < 3; ++c) {
    rgb[c] = {h, w, std::vector<double>(p + c * h * w, p + (c + 1) * h * w)};
  }
  UiqmScore s;
  s.uicm = colorfulness(rgb);
  s.uism = sharpness(rgb);
  s.uiconm = contrast(rgb, 10);
  s.uiqm = k.c1 * s.uicm + k.c2 * s.uism + k.c3 * s.uiconm;
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation

Enhancer identity_enhancer() {
  return [](const torch::Tensor& batch) { return batch; };
}

Enhancer generator_enhancer(Generator generator, std::int64_t batch_size) {
  return [generator, batch_size](const torch::Tensor& batch) mutable {
    torch::NoGradGuard no_grad;
    generator->eval();
    std::vector<torch::Tensor> parts;
    for (std::int64_t i = 0; i < batch.size(0); i += batch_size) {
      const auto chunk = batch.slice(0, i, std::min(batch.size(0), i + batch_size));
      parts.push_back(to_file_space(generator->forward(to_model_space(chunk))).clamp(0.0, 1.0));
    }
    return torch::cat(parts, 0);
  };
}

EvalReport evaluate(const std::string& model_name, const Enhancer& enhancer, const DetectorPort& detector,
                    std::span<const EvalSet> sets, const EvalOptions& options) {
  EvalReport report;
  report.model = model_name;
  for (const auto& set : sets) {
    CategoryReport row;
    row.category = set.name;
    if (set.images.empty()) {
      report.rows.push_back(row);
      continue;
    }
    row.present = true;
    row.images = set.images.size();
    std::vector<ScoredDetection> pooled;
    std::map<std::string, std::vector<Box>> truths;
    std::vector<MatchResult> iou_matches;
    std::vector<double> quality;
    constexpr std::size_t kChunk = 8;
    for (std::size_t start = 0; start < set.images.size(); start += kChunk) {
      const auto end = std::min(set.images.size(), start + kChunk);
      std::vector<torch::Tensor> inputs;
      for (std::size_t i = start; i < end; ++i) inputs.push_back(set.images[i].image);
      const auto enhanced = enhancer(torch::stack(inputs));
      for (std::size_t i = start; i < end; ++i) {
        const auto& item = set.images[i];
        const auto img = enhanced[static_cast<int64_t>(i - start)];
        const auto dets = detect_all(detector, img, options.score_threshold);
        std::vector<Box> boxes;
        for (const auto& a : item.annotations) boxes.push_back(a.box);
        truths[item.id] = boxes;
        for (const auto& d : dets) {
          pooled.push_back({item.id, d});
          report.detections.push_back({item.id, d});
        }
        iou_matches.push_back(match_detections(dets, boxes, options.iou_gate));
        row.matches += match_detections(dets, boxes, options.ap_gate).pairs.size();
        row.detections += dets.size();
        quality.push_back(uiqm(img).uiqm);
      }
    }
    row.ap = average_precision(pooled, truths, options.ap_gate);
    row.mean_iou = penalized_mean_iou(iou_matches);
    const double mean = std::accumulate(quality.begin(), quality.end(), 0.0) / static_cast<double>(quality.size());
    double var = 0.0;
    for (double q : quality) var += (q - mean) * (q - mean);
    row.uiqm_mean = mean;
    row.uiqm_sd = quality.size() > 1 ? std::sqrt(var / static_cast<double>(quality.size() - 1)) : 0.0;
    report.rows.push_back(row);
  }
  return report;
}

std::string format_report_table(const EvalReport& report) {
  std::ostringstream os;
  os << "model: " << report.model << "\n";
  os << std::left << std::setw(18) << "category" << std::right << std::setw(8) << "images" << std::setw(10) << "AP(%)"
     << std::setw(10) << "IoU(%)" << std::setw(18) << "UIQM" << std::setw(8) << "dets" << std::setw(9) << "matches"
     << "\n";
  os << std::fixed;
  for (const auto& r : report.rows) {
    os << std::left << std::setw(18) << r.category << std::right;
    if (!r.present) {
      os << std::setw(8) << 0 << std::setw(10) << "absent" << std::setw(10) << "absent" << std::setw(18) << "absent"
         << std::setw(8) << 0 << std::setw(9) << 0 << "\n";
      continue;
    }
    std::ostringstream ap, q;
    ap << std::fixed << std::setprecision(2);
    if (r.ap)
      ap << *r.ap;
    else
      ap << "absent";
    q << std::fixed << std::setprecision(2) << r.uiqm_mean << " +- " << r.uiqm_sd;
    os << std::setw(8) << r.images << std::setw(10) << ap.str() << std::setw(10) << std::setprecision(2) << r.mean_iou
       << std::setw(18) << q.str() << std::setw(8) << r.detections << std::setw(9) << r.matches << "\n";
  }
  return os.str();
}

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json j = {{"category", r.category}, {"present", r.present}, {"images", r.images},
                        {"detections", r.detections}, {"matches", r.matches}};
    if (r.present) {
      j["ap"] = r.ap ? nlohmann::json(*r.ap) : nlohmann::json(nullptr);
      j["mean_iou"] = r.mean_iou;
      j["uiqm_mean"] = r.uiqm_mean;
      j["uiqm_sd"] = r.uiqm_sd;
    }
    rows.push_back(j);
  }
  return {{"model", report.model}, {"rows", rows}};
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.txt") << format_report_table(report);
  std::ofstream(dir / "report.json") << report_to_json(report).dump(2) << "\n";
  std::ofstream det(dir / "detections.csv");
  write_detection_records(det, report.detections);
}

// ---------------------------------------------------------------------------
// Benchmark

BenchmarkReport benchmark_generator(Generator generator, const BenchmarkOptions& options) {
  if (options.batch_size < 1 || options.iterations < 1 || options.warmup < 0)
    throw ConfigError("benchmark: batch_size and iterations must be >= 1, warmup >= 0");
  const torch::Device device(options.device);
  torch::NoGradGuard no_grad;
  generator->eval();
  generator->to(device);
  auto gen = torch::make_generator<at::CPUGeneratorImpl>(0);
  const auto input =
      (torch::rand({options.batch_size, 3, kImageSize, kImageSize}, gen, torch::TensorOptions()) * 2.0 - 1.0).to(device);
  auto sync = [&] {
    if (device.is_cuda()) torch::cuda::synchronize();
  };
  for (int i = 0; i < options.warmup; ++i) generator->forward(input);
  sync();

  using clock = std::chrono::steady_clock;
  std::vector<double> rates;
  const auto start = clock::now();
  auto last = start;
  for (int i = 0; i < options.iterations; ++i) {
    generator->forward(input);
    sync();
    const auto now = clock::now();
    rates.push_back(static_cast<double>(options.batch_size) / std::chrono::duration<double>(now - last).count());
    last = now;
  }
  BenchmarkReport r;
  r.options = options;
  r.elapsed_seconds = std::chrono::duration<double>(last - start).count();
  const double images = static_cast<double>(options.iterations) * static_cast<double>(options.batch_size);
  r.fps = images / r.elapsed_seconds;
  r.latency_ms = 1000.0 * r.elapsed_seconds / images;
  const double mean = std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(rates.size());
  double var = 0.0;
  for (double v : rates) var += (v - mean) * (v - mean);
  r.fps_sd = rates.size() > 1 ? std::sqrt(var / static_cast<double>(rates.size() - 1)) : 0.0;
  return r;
}

nlohmann::json to_json(const BenchmarkReport& r) {
  return {{"device", r.options.device},       {"batch_size", r.options.batch_size},
          {"iterations", r.options.iterations}, {"warmup", r.options.warmup},
          {"resolution", kImageSize},         {"elapsed_seconds", r.elapsed_seconds},
          {"fps", r.fps},                     {"fps_sd", r.fps_sd},
          {"latency_ms", r.latency_ms}};
}

}  // namespace detgan
