// detgan command-line tool: synthesize-data, train, enhance, evaluate, benchmark.

#include <torch/torch.h>

#include <CLI11.hpp>
#include "json.hpp"

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "detgan/datapipe.hpp"
#include "detgan/detector.hpp"
#include "detgan/evalkit.hpp"
#include "detgan/image.hpp"
#include "detgan/nets.hpp"
#include "detgan/trainer.hpp"

namespace fs = std::filesystem;
using namespace detgan;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::string device_name() {
  const char* env = std::getenv("DETGAN_DEVICE");
  std::string d = env && *env ? env : "cpu";
  if (d != "cpu" && d.rfind("cuda", 0) != 0) throw ConfigError("DETGAN_DEVICE must be 'cpu' or 'cuda[:N]', got " + d);
  if (d != "cpu" && !torch::cuda::is_available()) throw ConfigError("DETGAN_DEVICE=" + d + " but CUDA is unavailable");
  return d;
}

std::pair<std::string, std::string> split_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value, got '" + kv + "'");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

void print_json(const nlohmann::json& j) { std::cout << j.dump() << std::endl; }

std::shared_ptr<const DetectorPort> open_detector(const std::string& toy, const std::string& graph,
                                                  const std::string& class_map) {
  if (!graph.empty()) {
    if (class_map.empty()) throw ConfigError("--detector-graph requires --class-map");
    return std::make_shared<ExternalDetector>(ExternalDetectorConfig{graph, class_map});
  }
  return ToyDetector::load(toy);
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

// ---------------------------------------------------------------------------

int cmd_synthesize(const Common& c) {
  SynthesisConfig config = c.config.empty() ? SynthesisConfig{} : load_synthesis_config(c.config);
  for (const auto& kv : c.overrides) {
    const auto [k, v] = split_override(kv);
    apply_setting(config, k, v);
  }
  if (c.seed) config.seed = *c.seed;
  const auto ds = synthesize_dataset(config);
  write_dataset(c.out, ds);
  if (!c.config.empty()) fs::copy_file(c.config, fs::path(c.out) / "synthesis.yaml", fs::copy_options::overwrite_existing);
  print_json({{"status", "ok"},
              {"out", c.out},
              {"train", ds.train.samples.size()},
              {"test", ds.test.samples.size()},
              {"test_multi", ds.test_multi.size()},
              {"train_candidates", ds.train_candidates},
              {"train_dropped", ds.train_dropped},
              {"detector_checksum", ds.detector->checksum()}});
  return 0;
}

int cmd_train(const Common& c, const std::string& data, const std::string& mode, const std::string& resume,
              const std::string& toy, const std::string& graph, const std::string& class_map) {
  TrainConfig config = c.config.empty() ? TrainConfig{} : load_train_config(c.config);
  for (const auto& kv : c.overrides) {
    const auto [k, v] = split_override(kv);
    apply_setting(config, k, v);
  }
  if (c.seed) config.seed = *c.seed;
  if (!mode.empty()) config.mode = parse_mode(mode);
  config.validate();
  if (device_name() != "cpu") throw ConfigError("training runs on the CPU only");

  const auto corpus = read_corpus(fs::path(data) / "train");
  auto detector = open_detector(toy.empty() ? (fs::path(data) / "detector.pt").string() : toy, graph, class_map);
  fs::create_directories(c.out);
  std::ofstream(fs::path(c.out) / "train.yaml") << to_yaml(config);

  auto trainer = resume.empty() ? Trainer(config, make_models(config.net, config.seed), detector)
                                : Trainer::resume(resume, config, detector);
  trainer.set_diagnostics_dir(c.out);
  const auto result = trainer.train(corpus.samples, c.out);
  const auto& last = result.history.empty() ? StepLosses{} : result.history.back().mean;
  print_json({{"status", "ok"},
              {"checkpoint", result.final_checkpoint.string()},
              {"epochs", trainer.epoch()},
              {"mode", to_string(config.mode)},
              {"generator_total", last.generator_total},
              {"discriminator_total", last.discriminator_total},
              {"detector_checksum", result.detector_checksum}});
  return 0;
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_enhance(const Common& c, const std::string& input, const std::string& checkpoint, int workers) {
  if (!fs::is_directory(input)) throw DataError("input directory not found: " + input);
  const auto loaded = load_checkpoint(checkpoint);
  auto generator = loaded.models.generator;
  const torch::Device device(device_name());
  generator->to(device);
  generator->eval();
  fs::create_directories(c.out);

  const auto files = list_images(input);
  if (files.empty()) std::cerr << R"({"warning":"no images found in input directory"})" << std::endl;
  std::atomic<std::size_t> next{0};
  std::mutex report_mutex;
  std::vector<nlohmann::json> failures;
  auto work = [&] {
    torch::NoGradGuard no_grad;
    for (std::size_t i = next++; i < files.size(); i = next++) {
      const auto& f = files[i];
      try {
        const auto img = read_image(f);
        const auto h = img.size(1), w = img.size(2);
        auto x = resize_batch(img.unsqueeze(0), kImageSize, kImageSize).to(device);
        auto y = to_file_space(generator->forward(to_model_space(x))).clamp(0.0, 1.0).cpu();
        if (h != kImageSize || w != kImageSize) y = resize_batch(y, h, w);
        write_image(fs::path(c.out) / f.filename(), y[0]);
      } catch (const std::exception& e) {
        std::lock_guard lock(report_mutex);
        failures.push_back({{"file", f.filename().string()}, {"error", e.what()}});
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::max(1, workers); ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  std::sort(failures.begin(), failures.end(),
            [](const auto& a, const auto& b) { return a["file"].template get<std::string>() < b["file"].template get<std::string>(); });
  if (!failures.empty()) {
    std::ofstream err(fs::path(c.out) / "errors.jsonl");
    for (const auto& f : failures) {
      err << f.dump() << "\n";
      std::cerr << f.dump() << std::endl;
    }
  }
  print_json({{"status", "ok"}, {"enhanced", files.size() - failures.size()}, {"failed", failures.size()}});
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& data, const std::string& checkpoint, double threshold,
                 const std::string& toy, const std::string& graph, const std::string& class_map) {
  auto detector = open_detector(toy.empty() ? (fs::path(data) / "detector.pt").string() : toy, graph, class_map);
  const auto test = read_corpus(fs::path(data) / "test");
  auto distorted = distorted_view(test);
  const auto multi_dir = fs::path(data) / "test_multi";
  if (fs::is_directory(multi_dir)) {
    auto multi = read_annotated_set(multi_dir);
    distorted.insert(distorted.end(), multi.begin(), multi.end());
  }

  Enhancer enhancer = identity_enhancer();
  std::string model = "raw";
  if (!checkpoint.empty()) {
    const auto loaded = load_checkpoint(checkpoint);
    enhancer = generator_enhancer(loaded.models.generator);
    model = fs::path(checkpoint).stem().string() + (loaded.manifest.mode.empty() ? "" : "-" + loaded.manifest.mode);
  }

  auto categories = categorize_test_set(distorted, *detector, threshold);
  std::vector<EvalSet> sets{{"All", distorted}};
  for (auto cat : {DatasetCategory::SdDetected, DatasetCategory::SdUndetected, DatasetCategory::MdAllDetected,
                   DatasetCategory::MdSomeDetected})
    sets.push_back({std::string(to_string(cat)), categories[cat]});

  EvalOptions options;
  options.score_threshold = threshold;
  const auto report = evaluate(model, enhancer, *detector, sets, options);
  write_report(c.out, report);
  std::cout << format_report_table(report);
  return 0;
}

int cmd_benchmark(const Common& c, const std::string& checkpoint, std::int64_t batch, int iterations, int warmup) {
  const auto loaded = load_checkpoint(checkpoint);
  BenchmarkOptions options{batch, iterations, warmup, device_name()};
  const auto report = benchmark_generator(loaded.models.generator, options);
  auto j = to_json(report);
  j["method"] = "generator forward only; image decode/encode excluded; warm-up iterations untimed";
  j["threads"] = torch::get_num_threads();
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::ofstream(fs::path(c.out) / "benchmark.json") << j.dump(2) << "\n";
  }
  print_json(j);
  return 0;
}

int fail(int code, const char* kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"detgan: detection-driven underwater image enhancement"};
  app.require_subcommand(1);

  Common common;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub, bool overrides) {
    sub->add_option("--config", common.config, "YAML configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed for every stochastic component");
    sub->add_option("--out", common.out, "output directory")->required();
    if (overrides) sub->add_option("overrides", common.overrides, "key=value settings overriding the config file");
  };

  auto* synth = app.add_subcommand("synthesize-data", "build the synthetic detector, train and test sets");
  add_common(synth, true);

  std::string data, mode, checkpoint, toy, graph, class_map, input;
  double threshold = 0.55;
  int workers = 1, iterations = 100, warmup = 10;
  std::int64_t batch = 1;

  auto add_detector = [&](CLI::App* sub) {
    sub->add_option("--detector", toy, "toy detector weights (default <data>/detector.pt)");
    sub->add_option("--detector-graph", graph, "TorchScript detection graph");
    sub->add_option("--class-map", class_map, "class map for --detector-graph");
  };

  auto* train = app.add_subcommand("train", "train the enhancement GAN");
  add_common(train, true);
  train->add_option("--data", data, "dataset directory from synthesize-data")->required();
  train->add_option("--mode", mode, "L_rc placement")->check(CLI::IsMember({"B", "G", "D", "N"}));
  train->add_option("--checkpoint", checkpoint, "resume from this training checkpoint");
  add_detector(train);

  auto* enhance = app.add_subcommand("enhance", "enhance a directory of images");
  add_common(enhance, false);
  enhance->add_option("--input", input, "directory of images")->required();
  enhance->add_option("--checkpoint", checkpoint, "generator checkpoint")->required();
  enhance->add_option("--workers", workers, "parallel images")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("evaluate", "detection AP, IoU and UIQM on the test splits");
  add_common(eval, false);
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--checkpoint", checkpoint, "generator checkpoint (omit for the raw baseline)");
  eval->add_option("--threshold", threshold, "detection score threshold")->check(CLI::Range(0.0, 1.0));
  add_detector(eval);

  auto* bench = app.add_subcommand("benchmark", "generator inference throughput");
  bench->add_option("--out", common.out, "write benchmark.json here");
  bench->add_option("--checkpoint", checkpoint, "generator checkpoint")->required();
  bench->add_option("--batch", batch, "batch size")->check(CLI::PositiveNumber);
  bench->add_option("--iterations", iterations, "timed iterations")->check(CLI::PositiveNumber);
  bench->add_option("--warmup", warmup, "untimed warm-up iterations")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kExitUsage, "usage", e.what());
  }

  for (auto* sub : {synth, train, eval, enhance})
    if (sub->parsed() && sub->count("--seed")) common.seed = seed;

  try {
    if (synth->parsed()) return cmd_synthesize(common);
    if (train->parsed()) return cmd_train(common, data, mode, checkpoint, toy, graph, class_map);
    if (enhance->parsed()) return cmd_enhance(common, input, checkpoint, workers);
    if (eval->parsed()) return cmd_evaluate(common, data, checkpoint, threshold, toy, graph, class_map);
    if (bench->parsed()) return cmd_benchmark(common, checkpoint, batch, iterations, warmup);
  } catch (const ConfigError& e) {
    return fail(kExitUsage, "config", e.what());
  } catch (const NumericError& e) {
    return fail(kExitNumeric, "numeric", e.what());
  } catch (const Error& e) {
    return fail(kExitData, "data", e.what());
  } catch (const std::exception& e) {
    return fail(kExitData, "data", e.what());
  }
  return kExitUsage;
}
