#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <torch/torch.h>

#include "detgan/datapipe.hpp"
#include "detgan/evalkit.hpp"
#include "detgan/losses.hpp"
#include "detgan/nets.hpp"

namespace py = pybind11;
using namespace detgan;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const Array& a) {
  std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

template <typename T>
py::array_t<T> to_array(const torch::Tensor& t) {
  const auto c = t.detach().cpu().to(c10::CppTypeToScalarType<T>::value).contiguous();
  py::array_t<T> out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.template data_ptr<T>(), sizeof(T) * static_cast<std::size_t>(c.numel()));
  return out;
}

// HxWx3 arrays on the Python side, 3xHxW tensors inside.
torch::Tensor from_hwc(const Array& image) {
  if (image.ndim() != 3 || image.shape(2) != 3) throw InputError("expected an HxWx3 image");
  return to_tensor(image).permute({2, 0, 1}).contiguous();
}

Box to_box(const std::array<double, 4>& b) { return {b[0], b[1], b[2], b[3]}; }

using BoxScore = std::pair<std::array<double, 4>, double>;

std::vector<Detection> to_detections(const std::vector<BoxScore>& dets) {
  std::vector<Detection> out;
  for (const auto& [b, s] : dets) out.push_back({to_box(b), s, "diver"});
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Detection-driven underwater image enhancement: losses, metrics, data and generator.";
  m.attr("IMAGE_SIZE") = kImageSize;
  m.attr("LOG_EPSILON") = kLogEpsilon;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<LoadError>(m, "LoadError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("iou", [](const std::array<double, 4>& a, const std::array<double, 4>& b) { return iou(to_box(a), to_box(b)); },
        py::arg("a"), py::arg("b"), "IoU of two (x_min, y_min, w, h) boxes.");

  m.def(
      "adversarial_loss",
      [](const Array& d_real, const Array& d_fake) {
        const auto l = adversarial_loss(to_tensor(d_real), to_tensor(d_fake));
        return py::make_tuple(l.discriminator.item<double>(), l.generator.item<double>());
      },
      py::arg("d_real"), py::arg("d_fake"), "Returns (discriminator, generator) losses for two patch maps.");
  m.def(
      "global_similarity_loss",
      [](const Array& target, const Array& generated) {
        return global_similarity_loss(to_tensor(target), to_tensor(generated)).item<double>();
      },
      py::arg("target"), py::arg("generated"));
  m.def(
      "content_loss",
      [](const Array& target, const Array& generated, const std::string& kind, std::uint64_t seed,
         const std::string& path) {
        const auto phi = make_feature_extractor({kind, seed, path});
        return content_loss(to_tensor(target), to_tensor(generated), phi.get()).item<double>();
      },
      py::arg("target"), py::arg("generated"), py::arg("kind") = "random_conv", py::arg("seed") = 7,
      py::arg("path") = "", "Inputs are [N,3,H,W] (or [3,H,W]) arrays in model space.");
  m.def(
      "random_conv_weights",
      [](std::uint64_t seed) {
        std::vector<py::array_t<double>> out;
        for (const auto& w : RandomConvFeatures(seed).weights()) out.push_back(to_array<double>(w));
        return out;
      },
      py::arg("seed") = 7);
  m.def(
      "smooth_l1",
      [](const std::array<double, 4>& detected, const std::array<double, 4>& truth) {
        return smooth_l1(torch::tensor(std::vector<double>(detected.begin(), detected.end()), torch::kFloat64),
                         torch::tensor(std::vector<double>(truth.begin(), truth.end()), torch::kFloat64))
            .item<double>();
      },
      py::arg("detected"), py::arg("truth"), "Summed smooth-L1 over normalized box components.");
  m.def("classification_loss", py::overload_cast<double>(&classification_loss), py::arg("score"));
  m.def(
      "rc_loss",
      [](const std::array<double, 4>& truth, std::optional<std::array<double, 4>> detected, double score,
         double width, double height) {
        DetectionTarget t;
        t.truth = to_box(truth);
        t.found = detected.has_value();
        if (detected) t.detected = to_box(*detected);
        t.score = score;
        t.image_width = width;
        t.image_height = height;
        return rc_loss(t);
      },
      py::arg("truth"), py::arg("detected") = py::none(), py::arg("score") = 0.0,
      py::arg("width") = static_cast<double>(kImageSize), py::arg("height") = static_cast<double>(kImageSize),
      "Pixel boxes; detected=None is a missed detection.");

  py::class_<UiqmScore>(m, "UiqmScore")
      .def_readonly("uiqm", &UiqmScore::uiqm)
      .def_readonly("uicm", &UiqmScore::uicm)
      .def_readonly("uism", &UiqmScore::uism)
      .def_readonly("uiconm", &UiqmScore::uiconm)
      .def("__repr__", [](const UiqmScore& s) {
        return "UiqmScore(uiqm=" + std::to_string(s.uiqm) + ", uicm=" + std::to_string(s.uicm) +
               ", uism=" + std::to_string(s.uism) + ", uiconm=" + std::to_string(s.uiconm) + ")";
      });
  m.def("uiqm", [](const Array& image) { return uiqm(from_hwc(image)); }, py::arg("image"),
        "HxWx3 RGB image with values in [0, 1].");

  m.def(
      "average_precision",
      [](const std::vector<std::tuple<std::string, std::array<double, 4>, double>>& detections,
         const std::map<std::string, std::vector<std::array<double, 4>>>& truths, double iou_gate) {
        std::vector<ScoredDetection> dets;
        for (const auto& [id, b, s] : detections) dets.push_back({id, {to_box(b), s, "diver"}});
        std::map<std::string, std::vector<Box>> gts;
        for (const auto& [id, boxes] : truths)
          for (const auto& b : boxes) gts[id].push_back(to_box(b));
        return average_precision(dets, gts, iou_gate);
      },
      py::arg("detections"), py::arg("truths"), py::arg("iou_gate") = 0.5,
      "detections: (image_id, box, score) triples; truths: image_id -> boxes. Percent, or None without truths.");
  m.def(
      "penalized_mean_iou",
      [](const std::vector<std::pair<std::vector<BoxScore>, std::vector<std::array<double, 4>>>>& images,
         double iou_gate) {
        std::vector<MatchResult> results;
        for (const auto& [dets, truths] : images) {
          std::vector<Box> gts;
          for (const auto& b : truths) gts.push_back(to_box(b));
          results.push_back(match_detections(to_detections(dets), gts, iou_gate));
        }
        return penalized_mean_iou(results);
      },
      py::arg("images"), py::arg("iou_gate") = 0.0, "images: ([(box, score), ...], [truth boxes]) per image.");

  py::class_<DegradationParams>(m, "DegradationParams")
      .def(py::init<>())
      .def_readwrite("gains", &DegradationParams::gains)
      .def_readwrite("haze_weight", &DegradationParams::haze_weight)
      .def_readwrite("haze_color", &DegradationParams::haze_color)
      .def_readwrite("blur_radius", &DegradationParams::blur_radius)
      .def_readwrite("noise_sigma", &DegradationParams::noise_sigma)
      .def_readwrite("seed", &DegradationParams::seed)
      .def("validate", &DegradationParams::validate)
      .def("is_identity", &DegradationParams::is_identity);
  m.def("sample_degradation", [](std::uint64_t seed) { return sample_degradation({}, seed); }, py::arg("seed"));
  m.def(
      "distort",
      [](const Array& image, const DegradationParams& params) {
        return to_array<double>(distort(from_hwc(image).to(torch::kFloat32), params).permute({1, 2, 0}));
      },
      py::arg("image"), py::arg("params"), "HxWx3 image in [0, 1] -> distorted copy.");

  py::class_<Generator>(m, "Generator")
      .def(py::init([](double width_multiplier, double decoder_dropout, std::uint64_t seed) {
             return make_models(NetConfig{width_multiplier, decoder_dropout}, seed).generator;
           }),
           py::arg("width_multiplier") = 1.0, py::arg("decoder_dropout") = 0.5, py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& path) { return load_checkpoint(path).models.generator; },
          py::arg("path"))
      .def(
          "save",
          [](const Generator& g, const std::filesystem::path& path, std::uint64_t seed) {
            auto models = make_models(g->config(), seed);
            models.generator = g;
            save_checkpoint(path, models, {});
          },
          py::arg("path"), py::arg("seed") = 0, "Writes a checkpoint with a freshly seeded discriminator.")
      .def_property_readonly("width_multiplier", [](const Generator& g) { return g->config().width_multiplier; })
      .def(
          "forward",
          [](Generator& g, const FloatArray& x) {
            torch::NoGradGuard ng;
            g->eval();
            return to_array<float>(g->forward(to_tensor(x)));
          },
          py::arg("x"), "[N,3,256,256] model-space batch (values in [-1, 1]), eval mode.")
      .def(
          "enhance",
          [](Generator& g, const Array& image) {
            torch::NoGradGuard ng;
            g->eval();
            const auto x = to_model_space(from_hwc(image).to(torch::kFloat32));
            return to_array<double>(to_file_space(g->forward(x)).clamp(0.0, 1.0).permute({1, 2, 0}));
          },
          py::arg("image"), "256x256x3 image in [0, 1] -> enhanced image.")
      .def("checksum", [](const Generator& g) { return parameter_checksum(*g); });
}
