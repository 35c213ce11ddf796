#include "detgan/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <sstream>

namespace detgan {

torch::Tensor to_model_space(const torch::Tensor& file_space) { return file_space * 2.0 - 1.0; }

torch::Tensor to_file_space(const torch::Tensor& model_space) { return (model_space + 1.0) * 0.5; }

std::string shape_string(const torch::Tensor& t) {
  std::ostringstream os;
  os << "(";
  for (int64_t i = 0; i < t.dim(); ++i) os << (i ? ", " : "") << t.size(i);
  os << ")";
  return os.str();
}

void require_image_shape(const torch::Tensor& image, std::int64_t height, std::int64_t width,
                         std::string_view what) {
  const bool single = image.dim() == 3;
  const bool batch = image.dim() == 4;
  const int64_t off = batch ? 1 : 0;
  if ((!single && !batch) || image.size(off) != 3 || image.size(off + 1) != height ||
      image.size(off + 2) != width) {
    std::ostringstream os;
    os << what << ": expected shape (3, " << height << ", " << width << ") or (N, 3, " << height
       << ", " << width << "), got " << shape_string(image);
    throw InputError(os.str());
  }
}

torch::Tensor as_batch(const torch::Tensor& image) {
  return image.dim() == 3 ? image.unsqueeze(0) : image;
}

torch::Tensor resize_batch(const torch::Tensor& batch, std::int64_t height, std::int64_t width) {
  if (batch.size(2) == height && batch.size(3) == width) return batch;
  namespace F = torch::nn::functional;
  return F::interpolate(batch, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{height, width})
                                   .mode(torch::kArea));
}

torch::Tensor read_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

torch::Tensor quantize_8bit(const torch::Tensor& image) {
  return image.clamp(0.0, 1.0).mul(255.0).round().div(255.0);
}

void write_image(const std::filesystem::path& path, const torch::Tensor& image) {
  require_image_shape(image, image.size(-2), image.size(-1), "write_image");
  auto hwc = image.detach()
                 .to(torch::kFloat32)
                 .clamp(0.0, 1.0)
                 .mul(255.0)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3,
              hwc.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image " + path.string());
}

}  // namespace detgan
