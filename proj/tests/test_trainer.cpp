#include "doctest.h"

#include <fstream>

#include "detgan/trainer.hpp"
#include "support.hpp"

using namespace detgan;
using detgan::test::shared_detector;

namespace {

// Non-differentiable port that reports one fixed box for every image.
class FrozenBoxDetector final : public DetectorPort {
 public:
  FrozenBoxDetector() { meta_ = {"frozen-box", 256, {"diver"}}; }
  const DetectorMetadata& metadata() const override { return meta_; }
  bool differentiable() const override { return false; }
  std::vector<Detection> detect(const torch::Tensor& image, double threshold) const override {
    const double s = 0.5 + 0.4 * image.mean().item<double>();
    if (s < threshold) return {};
    return {{{60, 70, 80, 90}, s, "diver"}};
  }
  std::vector<TopDetection> top1_batch(const torch::Tensor& images, double threshold) const override {
    std::vector<TopDetection> out(static_cast<std::size_t>(images.size(0)));
    for (int64_t i = 0; i < images.size(0); ++i) {
      const auto d = detect(images[i].detach(), threshold);
      if (d.empty()) continue;
      auto& t = out[static_cast<std::size_t>(i)];
      t.found = true;
      t.box = torch::tensor({60.0, 70.0, 80.0, 90.0}, images.options().requires_grad(false));
      t.score = torch::full({}, d[0].score, images.options().requires_grad(false));
      t.label = "diver";
    }
    return out;
  }
  std::uint64_t checksum() const override { return 42; }

 private:
  DetectorMetadata meta_;
};

TrainConfig thin_config(AblationMode mode, int batch = 2) {
  TrainConfig c;
  c.mode = mode;
  c.batch_size = batch;
  c.epochs = 1;
  c.seed = 3;
  c.net.width_multiplier = 0.125;
  return c;
}

torch::Tensor flat_parameters(const torch::nn::Module& m) {
  std::vector<torch::Tensor> parts;
  for (const auto& p : m.parameters()) parts.push_back(p.detach().reshape({-1}));
  return torch::cat(parts);
}

Trainer fresh(const TrainConfig& c, std::shared_ptr<const DetectorPort> d, std::uint64_t init_seed = 1) {
  return Trainer(c, make_models(c.net, init_seed), std::move(d));
}

const std::vector<PairedSample>& corpus16() {
  static const auto c = detgan::test::small_corpus(16, 500);
  return c;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("config defaults, validation and keys") {
    TrainConfig c;
    CHECK(c.batch_size == 32);
    CHECK(c.learning_rate == 2e-4);
    CHECK(c.beta1 == 0.5);
    CHECK(c.beta2 == 0.999);
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    apply_setting(c, "mode", "D");
    apply_setting(c, "epochs", "12");
    apply_setting(c, "width_multiplier", "0.25");
    apply_setting(c, "rc_telemetry", "false");
    CHECK(c.mode == AblationMode::D);
    CHECK(c.epochs == 12);
    CHECK(c.net.width_multiplier == 0.25);
    CHECK_FALSE(c.rc_telemetry);
    CHECK_THROWS_AS(apply_setting(c, "mode", "Z"), ConfigError);
    CHECK_THROWS_AS(apply_setting(c, "learning_rat", "1"), ConfigError);
    CHECK_THROWS_AS(apply_setting(c, "epochs", "three"), ConfigError);

    const auto dir = detgan::test::scratch("train_cfg");
    std::ofstream(dir / "c.yaml") << to_yaml(c);
    const auto back = load_train_config(dir / "c.yaml");
    CHECK(to_yaml(back) == to_yaml(c));
    std::ofstream(dir / "bad.yaml") << "epochs: 3\nlearningrate: 0.1\n";
    CHECK_THROWS_AS(load_train_config(dir / "bad.yaml"), ConfigError);
    std::ofstream(dir / "nested.yaml") << "epochs:\n  a: 1\n";
    CHECK_THROWS_AS(load_train_config(dir / "nested.yaml"), ConfigError);
  }

  TEST_CASE("gradient routing table") {
    CHECK(rc_gradient_path(AblationMode::B, true).generator == RcRoute::Native);
    CHECK(rc_gradient_path(AblationMode::G, true).generator == RcRoute::Native);
    CHECK(rc_gradient_path(AblationMode::B, false).generator == RcRoute::StraightThrough);
    CHECK(rc_gradient_path(AblationMode::D, false).generator == RcRoute::None);
    CHECK(rc_gradient_path(AblationMode::D, false).discriminator_scalar);
    CHECK(rc_gradient_path(AblationMode::B, true).discriminator_scalar);
    CHECK_FALSE(rc_gradient_path(AblationMode::G, true).discriminator_scalar);
    const auto n = rc_gradient_path(AblationMode::N, true);
    CHECK(n.generator == RcRoute::None);
    CHECK_FALSE(n.discriminator_scalar);
  }

  TEST_CASE("one step updates the generator") {
    auto t = fresh(thin_config(AblationMode::B), shared_detector());
    const auto before = flat_parameters(*t.models().generator);
    const std::vector<PairedSample> batch(corpus16().begin(), corpus16().begin() + 2);
    const auto losses = t.train_step(batch);
    CHECK((flat_parameters(*t.models().generator) - before).norm().item<double>() > 0.0);
    for (double v : component_values(losses)) CHECK(std::isfinite(v));
    CHECK(losses.rc > 0.0);
    CHECK_THROWS_AS(t.train_step({}), InputError);
  }

  TEST_CASE("detector stays frozen over 100 steps") {
    const auto detector = shared_detector();
    const auto before = detector->checksum();
    auto t = fresh(thin_config(AblationMode::B), detector);
    for (int i = 0; i < 100; ++i) {
      const auto start = static_cast<std::size_t>((2 * i) % 16);
      t.train_step(std::vector<PairedSample>(corpus16().begin() + start, corpus16().begin() + start + 2));
    }
    CHECK(detector->checksum() == before);
  }

  TEST_CASE("mode N telemetry does not touch the updates") {
    auto run = [&](bool telemetry) {
      auto c = thin_config(AblationMode::N);
      c.rc_telemetry = telemetry;
      auto t = fresh(c, shared_detector());
      torch::manual_seed(9);
      StepLosses last;
      for (int i = 0; i < 4; ++i)
        last = t.train_step(std::vector<PairedSample>(corpus16().begin() + 2 * i, corpus16().begin() + 2 * i + 2));
      return std::make_pair(flat_parameters(*t.models().generator), last);
    };
    const auto [with_rc, l1] = run(true);
    const auto [without_rc, l2] = run(false);
    CHECK(torch::equal(with_rc, without_rc));
    CHECK(l1.rc > 0.0);
    CHECK(l2.rc == 0.0);
    CHECK(l1.generator_total == l2.generator_total);
  }

  TEST_CASE("mode G sends L_rc only into the generator") {
    const std::vector<PairedSample> batch(corpus16().begin(), corpus16().begin() + 2);
    auto step = [&](AblationMode m) {
      auto t = fresh(thin_config(m), shared_detector());
      torch::manual_seed(4);
      t.train_step(batch);
      return std::make_pair(flat_parameters(*t.models().generator), flat_parameters(*t.models().discriminator));
    };
    const auto [g_gen, g_disc] = step(AblationMode::G);
    const auto [n_gen, n_disc] = step(AblationMode::N);
    CHECK(torch::equal(g_disc, n_disc));
    CHECK((g_gen - n_gen).abs().max().item<double>() > 0.0);

    // Isolated L_rc gradient through the differentiable detector.
    auto m = make_models(NetConfig{0.125, 0.0}, 2);
    const auto x = to_model_space(torch::stack({batch[0].distorted, batch[1].distorted}));
    const auto fake = m.generator->forward(x);
    const auto tops = shared_detector()->top1_batch(to_file_space(fake), 0.01);
    std::vector<torch::Tensor> terms;
    for (std::size_t i = 0; i < 2; ++i) {
      const auto& b = batch[i].annotation.box;
      const auto truth = torch::tensor({b.x_min / 256, b.y_min / 256, b.w / 256, b.h / 256});
      terms.push_back(tops[i].found ? rc_loss(truth, DetectedTensors{tops[i].box / 256.0, tops[i].score})
                                    : rc_loss(truth, std::nullopt));
    }
    torch::stack(terms).mean().backward();
    double norm = 0.0;
    for (const auto& p : m.generator->parameters())
      if (p.grad().defined()) norm += p.grad().norm().item<double>();
    CHECK(norm > 0.0);
  }

  TEST_CASE("non-differentiable port: additive discriminator term and straight-through generator path") {
    auto port = std::make_shared<FrozenBoxDetector>();
    const std::vector<PairedSample> batch(corpus16().begin(), corpus16().begin() + 2);
    auto t = fresh(thin_config(AblationMode::D), port);
    const auto frozen = t.evaluate_objectives(batch);
    CHECK(frozen.components.rc > 0.0);
    CHECK(frozen.discriminator(AblationMode::D) - frozen.discriminator(AblationMode::N) ==
          doctest::Approx(frozen.components.rc).epsilon(1e-12));
    CHECK(frozen.generator(AblationMode::D) == frozen.generator(AblationMode::N));

    auto step = [&](AblationMode m) {
      auto tr = fresh(thin_config(m), port);
      torch::manual_seed(4);
      const auto l = tr.train_step(batch);
      return std::make_tuple(l, flat_parameters(*tr.models().generator), flat_parameters(*tr.models().discriminator));
    };
    const auto [ld, gd, dd] = step(AblationMode::D);
    const auto [ln, gn, dn] = step(AblationMode::N);
    const auto [lg, gg, dg] = step(AblationMode::G);
    CHECK(ld.discriminator_total - ln.discriminator_total == doctest::Approx(ld.rc).epsilon(1e-5));
    CHECK(torch::equal(gd, gn));  // the scalar carries no discriminator gradient
    CHECK(torch::equal(dd, dn));
    CHECK(lg.generator_total - ln.generator_total == doctest::Approx(lg.rc).epsilon(1e-5));
    CHECK((gg - gn).abs().max().item<double>() > 0.0);
  }

  TEST_CASE("mode algebra at frozen state") {
    auto t = fresh(thin_config(AblationMode::B), shared_detector());
    const std::vector<PairedSample> batch(corpus16().begin(), corpus16().begin() + 4);
    const auto f = t.evaluate_objectives(batch);
    const double rc = f.components.rc;
    CHECK(std::abs(f.generator(AblationMode::B) - f.generator(AblationMode::N) - rc) <= 1e-6);
    CHECK(std::abs(f.discriminator(AblationMode::D) - f.discriminator(AblationMode::N) - rc) <= 1e-6);
    const auto again = t.evaluate_objectives(batch);
    CHECK(again.components.generator_total == f.components.generator_total);
  }

  TEST_CASE("non-finite inputs abort with a snapshot") {
    const auto dir = detgan::test::scratch("nonfinite");
    auto t = fresh(thin_config(AblationMode::B), shared_detector());
    t.set_diagnostics_dir(dir);
    auto batch = std::vector<PairedSample>(corpus16().begin(), corpus16().begin() + 2);
    batch[0].distorted = batch[0].distorted.clone();
    batch[0].distorted[0][0][0] = std::nan("");
    const auto before = flat_parameters(*t.models().generator);
    CHECK_THROWS_AS(t.train_step(batch), NumericError);
    CHECK(torch::equal(before, flat_parameters(*t.models().generator)));
    bool snapshot = false;
    for (const auto& e : std::filesystem::directory_iterator(dir))
      snapshot |= e.path().filename().string().find("nonfinite") == 0;
    CHECK(snapshot);
  }

  TEST_CASE("discriminator hook receives every pair") {
    auto t = fresh(thin_config(AblationMode::N), shared_detector());
    int calls = 0;
    t.set_discriminator_hook([&](const torch::Tensor& ref, const torch::Tensor&, const DetectorPort&) {
      ++calls;
      return ref;
    });
    t.train_step(std::vector<PairedSample>(corpus16().begin(), corpus16().begin() + 2));
    CHECK(calls == 3);
  }

  TEST_CASE("loss curves round trip") {
    const auto dir = detgan::test::scratch("curves");
    std::vector<EpochRecord> h{{1, {1, 2, 3, 4, 5, 6, 7}}, {2, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0 / 3.0}}};
    write_loss_curves(dir / "c.csv", h);
    const auto back = read_loss_curves(dir / "c.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[1].epoch == 2);
    CHECK(back[1].mean.discriminator_total == 1.0 / 3.0);
    std::ifstream is(dir / "c.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "epoch,component,value");
  }

  TEST_CASE("training runs are deterministic and resumable") {
    const auto dir = detgan::test::scratch("resume");
    auto c = thin_config(AblationMode::B, 4);
    c.epochs = 5;
    c.checkpoint_every = 1;
    auto full = fresh(c, shared_detector(), 11);
    const auto a = full.train(corpus16(), dir / "a");
    auto twin = fresh(c, shared_detector(), 11);
    const auto b = twin.train(corpus16(), dir / "b");
    REQUIRE(a.history.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(component_values(a.history[i].mean) == component_values(b.history[i].mean));

    std::ifstream ca(dir / "a" / "loss_curves.csv"), cb(dir / "b" / "loss_curves.csv");
    std::stringstream sa, sb;
    sa << ca.rdbuf();
    sb << cb.rdbuf();
    CHECK(sa.str() == sb.str());

    auto resumed = Trainer::resume(dir / "a" / "checkpoint_epoch_0003.pt", c, shared_detector());
    CHECK(resumed.epoch() == 3);
    CHECK(resumed.history().size() == 3);
    const auto r = resumed.train(corpus16(), dir / "r");
    CHECK(resumed.epoch() == 5);
    CHECK(torch::equal(flat_parameters(*resumed.models().generator), flat_parameters(*full.models().generator)));
    CHECK(torch::equal(flat_parameters(*resumed.models().discriminator), flat_parameters(*full.models().discriminator)));
    CHECK(component_values(r.history.back().mean) == component_values(a.history.back().mean));

    const auto final_ck = load_checkpoint(a.final_checkpoint);
    CHECK(final_ck.manifest.mode == "B");
    CHECK(final_ck.manifest.epoch == 5);
    CHECK(a.detector_checksum == shared_detector()->checksum());

    auto wrong = c;
    wrong.mode = AblationMode::N;
    CHECK_THROWS_AS(Trainer::resume(dir / "a" / "final.pt", wrong, shared_detector()), ConfigError);
    CHECK_THROWS_AS(full.train({}, dir / "empty"), DataError);
  }

  TEST_CASE("five epochs on 256 pairs lower the generator objective") {
    const auto corpus = detgan::test::small_corpus(256, 900);
    auto c = thin_config(AblationMode::B, 32);
    c.epochs = 5;
    auto t = fresh(c, shared_detector(), 5);
    const auto r = t.train(corpus, detgan::test::scratch("trend"));
    const auto& first = r.history.front().mean;
    const auto& last = r.history.back().mean;
    CHECK(last.generator_total < first.generator_total);
    int decreased = (last.adversarial_g < first.adversarial_g) + (last.l1 < first.l1) +
                    (last.content < first.content) + (last.rc < first.rc);
    CHECK(decreased >= 3);
  }
}
