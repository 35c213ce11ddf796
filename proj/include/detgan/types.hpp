#pragma once

#include <charconv>
#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace detgan {

// Error kinds. The CLI maps each one onto a distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input rejected by an operation's precondition (shape, value range).
class InputError : public Error {
 public:
  using Error::Error;
};

// Invalid or incomplete configuration (unknown mode, missing extractor, bad ranges).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Checkpoint or model file could not be loaded.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Dataset content problems (unreadable images, malformed annotations).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or parameter encountered during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kLogEpsilon = 1e-7;
inline constexpr std::int64_t kImageSize = 256;
inline constexpr std::int64_t kPatchMapSize = 16;
inline constexpr std::int64_t kBottleneckSize = 8;
inline constexpr std::int64_t kBottleneckChannels = 256;

// Axis-aligned box in pixels: top-left corner plus extent.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x_max() const { return x_min + w; }
  double y_max() const { return y_min + h; }
  double area() const { return w * h; }

  auto operator<=>(const Box&) const = default;
};

Box clip_box(const Box& box, double width, double height);
Box normalize_box(const Box& box, double width, double height);

// Intersection over union; zero-area unions give 0.
double iou(const Box& a, const Box& b);

struct Detection {
  Box box;
  double score = 0.0;
  std::string label;
};

struct Annotation {
  Box box;
  std::string label;
};

// Where the detection loss enters the optimization.
enum class AblationMode { B, G, D, N };

AblationMode parse_mode(std::string_view text);
std::string_view to_string(AblationMode mode);
bool rc_in_generator(AblationMode mode);
bool rc_in_discriminator(AblationMode mode);

// Deterministic 64-bit mixing used to derive per-item seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Strict numeric parse of a setting value; trailing garbage is a ConfigError.
template <typename T>
T parse_setting(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (value.empty() || ec != std::errc() || ptr != end)
    throw ConfigError("invalid value for '" + key + "': '" + value + "'");
  return out;
}

}  // namespace detgan
