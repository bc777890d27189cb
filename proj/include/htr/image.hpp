#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "htr/tensor.hpp"

namespace htr {

/// Decoded 8-bit raster, row-major, channels interleaved (1 = gray, 3 = RGB, 4 = RGBA).
struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> samples;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return samples[(y * width + x) * channels + c];
  }
};

/// Grayscale line, ink dark on a light background, values in [0,1].
struct LineImage {
  Tensor pixels;  // [1,H,W]
  std::string source_path;
  std::pair<std::size_t, std::size_t> original_size{0, 0};  // (height, width)

  std::size_t height() const { return pixels.shape()[1]; }
  std::size_t width() const { return pixels.shape()[2]; }
};

inline constexpr std::size_t kCanonicalHeight = 64;
inline constexpr std::size_t kMaxWidth = 1024;

/// PNG or uncompressed BMP.
RawImage load_image(const std::filesystem::path& path);

/// 8-bit grayscale PNG; values are clamped to [0,1] and rounded to 1/255 steps.
void save_png(const std::filesystem::path& path, const LineImage& img);
void save_png(const std::filesystem::path& path, const RawImage& img);

/// Output width for a rescale to target_height, clamped to [1, max_width].
std::size_t scaled_width(std::size_t height, std::size_t width, std::size_t target_height,
                         std::size_t max_width);

/// Luma conversion, then bilinear rescale to target_height. RGBA is composited
/// over white. Lines wider than max_width after scaling are squeezed
/// horizontally to max_width.
LineImage normalize_image(const RawImage& raw, std::size_t target_height = kCanonicalHeight,
                          std::size_t max_width = kMaxWidth);
LineImage normalize_image(const LineImage& img, std::size_t target_height = kCanonicalHeight,
                          std::size_t max_width = kMaxWidth);

/// Intensity quantized to 256 levels, as used by the Otsu histogram.
inline std::size_t gray_level(float v) {
  const float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return std::size_t(c * 255.f + 0.5f);
}

/// Otsu threshold over the 256-bin histogram; the lowest maximizer wins ties.
/// Throws DegenerateError when the image has a single gray level.
std::size_t otsu_threshold(const LineImage& img);

/// Levels above the Otsu threshold become 1 (background), the rest 0 (ink).
LineImage otsu_binarize(const LineImage& img);

}  // namespace htr
