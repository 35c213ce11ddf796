#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "detgan/types.hpp"

namespace detgan {

// Images are CHW float tensors. File space is [0, 1]; model space is [-1, 1].
torch::Tensor to_model_space(const torch::Tensor& file_space);
torch::Tensor to_file_space(const torch::Tensor& model_space);

// Accepts [3,H,W] or [N,3,H,W]; throws InputError naming expected vs actual shape.
void require_image_shape(const torch::Tensor& image, std::int64_t height, std::int64_t width,
                         std::string_view what);
std::string shape_string(const torch::Tensor& t);

// Adds a leading batch dimension to a single image.
torch::Tensor as_batch(const torch::Tensor& image);

// Area resize of a [N,3,H,W] batch; differentiable.
torch::Tensor resize_batch(const torch::Tensor& batch, std::int64_t height, std::int64_t width);

// 8-bit PNG/JPEG decode into [3,H,W] file space; throws DataError when unreadable.
torch::Tensor read_image(const std::filesystem::path& path);
// Lossless 8-bit PNG encode of a [3,H,W] file-space image.
void write_image(const std::filesystem::path& path, const torch::Tensor& image);
// Rounds to the 8-bit grid, matching what write_image would store.
torch::Tensor quantize_8bit(const torch::Tensor& image);

struct AnnotatedImage {
  std::string id;
  torch::Tensor image;  // [3,H,W], file space
  std::vector<Annotation> annotations;
};

}  // namespace detgan
