#include "detgan/types.hpp"

#include <algorithm>

namespace detgan {

Box clip_box(const Box& box, double width, double height) {
  const double x0 = std::clamp(box.x_min, 0.0, width);
  const double y0 = std::clamp(box.y_min, 0.0, height);
  const double x1 = std::clamp(box.x_max(), 0.0, width);
  const double y1 = std::clamp(box.y_max(), 0.0, height);
  return {x0, y0, std::max(0.0, x1 - x0), std::max(0.0, y1 - y0)};
}

Box normalize_box(const Box& box, double width, double height) {
  return {box.x_min / width, box.y_min / height, box.w / width, box.h / height};
}

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x_max(), b.x_max()) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max(), b.y_max()) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

AblationMode parse_mode(std::string_view text) {
  if (text == "B" || text == "b") return AblationMode::B;
  if (text == "G" || text == "g") return AblationMode::G;
  if (text == "D" || text == "d") return AblationMode::D;
  if (text == "N" || text == "n") return AblationMode::N;
  throw ConfigError("unknown ablation mode '" + std::string(text) + "' (expected B, G, D or N)");
}

std::string_view to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::B: return "B";
    case AblationMode::G: return "G";
    case AblationMode::D: return "D";
    case AblationMode::N: return "N";
  }
  throw ConfigError("unknown ablation mode value " + std::to_string(static_cast<int>(mode)));
}

bool rc_in_generator(AblationMode mode) {
  switch (mode) {
    case AblationMode::B:
    case AblationMode::G: return true;
    case AblationMode::D:
    case AblationMode::N: return false;
  }
  throw ConfigError("unknown ablation mode value " + std::to_string(static_cast<int>(mode)));
}

bool rc_in_discriminator(AblationMode mode) {
  switch (mode) {
    case AblationMode::B:
    case AblationMode::D: return true;
    case AblationMode::G:
    case AblationMode::N: return false;
  }
  throw ConfigError("unknown ablation mode value " + std::to_string(static_cast<int>(mode)));
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 over the combined value
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detgan
