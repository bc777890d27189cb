#include "htr/image.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "htr/errors.hpp"

namespace htr {
namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RawImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw FormatError("undecodable PNG " + name + ": " + png.message);
  }
  RawImage img;
  if (png.format & PNG_FORMAT_FLAG_ALPHA) {
    png.format = PNG_FORMAT_RGBA;
    img.channels = 4;
  } else if (png.format & PNG_FORMAT_FLAG_COLOR) {
    png.format = PNG_FORMAT_RGB;
    img.channels = 3;
  } else {
    png.format = PNG_FORMAT_GRAY;
    img.channels = 1;
  }
  img.height = png.height;
  img.width = png.width;
  img.samples.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.samples.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw FormatError("undecodable PNG " + name + ": " + msg);
  }
  return img;
}

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return std::uint32_t(b[off]) | std::uint32_t(b[off + 1]) << 8 | std::uint32_t(b[off + 2]) << 16 |
         std::uint32_t(b[off + 3]) << 24;
}

std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t off) {
  return std::uint16_t(b[off] | b[off + 1] << 8);
}

RawImage decode_bmp(const std::vector<std::uint8_t>& b, const std::string& name) {
  auto bad = [&](const std::string& why) { return FormatError("undecodable BMP " + name + ": " + why); };
  if (b.size() < 54) throw bad("truncated header");
  const std::uint32_t data_off = le32(b, 10);
  const std::uint32_t dib = le32(b, 14);
  if (dib < 40) throw bad("unsupported DIB header");
  const auto w = std::int32_t(le32(b, 18));
  const auto h = std::int32_t(le32(b, 22));
  const std::uint16_t bpp = le16(b, 28);
  const std::uint32_t compression = le32(b, 30);
  if (w <= 0 || h == 0) throw bad("zero or negative width");
  if (compression != 0 && !(compression == 3 && bpp == 32)) throw bad("compressed BMP not supported");
  if (bpp != 8 && bpp != 24 && bpp != 32) throw bad("unsupported bit depth " + std::to_string(bpp));

  const bool top_down = h < 0;
  RawImage img;
  img.width = std::size_t(w);
  img.height = std::size_t(top_down ? -std::int64_t(h) : h);
  img.channels = bpp == 32 ? 4 : 3;
  const std::size_t row_bytes = (std::size_t(bpp) * img.width + 31) / 32 * 4;
  if (data_off + row_bytes * img.height > b.size()) throw bad("truncated pixel data");

  std::vector<std::array<std::uint8_t, 3>> palette;
  if (bpp == 8) {
    std::uint32_t colors = le32(b, 46);
    if (colors == 0) colors = 256;
    const std::size_t pal_off = 14 + dib;
    if (pal_off + 4 * colors > data_off) throw bad("truncated palette");
    for (std::uint32_t i = 0; i < colors; ++i) {
      palette.push_back({b[pal_off + 4 * i + 2], b[pal_off + 4 * i + 1], b[pal_off + 4 * i]});
    }
  }

  img.samples.resize(img.height * img.width * img.channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    const std::size_t src_row = top_down ? y : img.height - 1 - y;
    const std::uint8_t* row = b.data() + data_off + src_row * row_bytes;
    std::uint8_t* out = img.samples.data() + y * img.width * img.channels;
    for (std::size_t x = 0; x < img.width; ++x, out += img.channels) {
      if (bpp == 8) {
        if (row[x] >= palette.size()) throw bad("palette index out of range");
        std::copy(palette[row[x]].begin(), palette[row[x]].end(), out);
      } else {
        const std::uint8_t* px = row + x * (bpp / 8);
        out[0] = px[2];
        out[1] = px[1];
        out[2] = px[0];
        if (bpp == 32) out[3] = compression == 3 ? px[3] : 255;
      }
    }
  }
  return img;
}

void write_gray_png(const std::filesystem::path& path, std::size_t h, std::size_t w,
                    const std::vector<std::uint8_t>& gray, int format) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = png_uint_32(w);
  png.height = png_uint_32(h);
  png.format = png_uint_32(format);
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, gray.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

/// Bilinear resample of a single-channel plane with half-pixel centres.
std::vector<float> resample(const std::vector<float>& src, std::size_t sh, std::size_t sw,
                            std::size_t dh, std::size_t dw) {
  if (sh == dh && sw == dw) return src;
  auto taps = [](std::size_t dn, std::size_t sn) {
    std::vector<std::pair<std::size_t, float>> t(dn);
    const double scale = double(sn) / double(dn);
    for (std::size_t i = 0; i < dn; ++i) {
      double s = (double(i) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, double(sn - 1));
      const auto lo = std::size_t(s);
      t[i] = {lo, float(s - double(lo))};
    }
    return t;
  };
  const auto ty = taps(dh, sh), tx = taps(dw, sw);
  std::vector<float> out(dh * dw);
  for (std::size_t y = 0; y < dh; ++y) {
    const auto [y0, fy] = ty[y];
    const std::size_t y1 = std::min(y0 + 1, sh - 1);
    for (std::size_t x = 0; x < dw; ++x) {
      const auto [x0, fx] = tx[x];
      const std::size_t x1 = std::min(x0 + 1, sw - 1);
      const float top = src[y0 * sw + x0] * (1 - fx) + src[y0 * sw + x1] * fx;
      const float bot = src[y1 * sw + x0] * (1 - fx) + src[y1 * sw + x1] * fx;
      out[y * dw + x] = std::clamp(top * (1 - fy) + bot * fy, 0.f, 1.f);
    }
  }
  return out;
}

LineImage finish(std::vector<float> gray, std::size_t h, std::size_t w, std::size_t target_height,
                 std::size_t max_width, std::string source, std::pair<std::size_t, std::size_t> orig) {
  if (target_height < 16) throw ContractError("target_height must be at least 16");
  if (h == 0 || w == 0) throw DimensionError("cannot normalize a zero-area image");
  const std::size_t dw = scaled_width(h, w, target_height, max_width);
  auto out = resample(gray, h, w, target_height, dw);
  return LineImage{Tensor({1, target_height, dw}, std::move(out)), std::move(source), orig};
}

}  // namespace

RawImage load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("image not found: " + path.string());
  const auto bytes = read_file(path);
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) {
    return decode_png(bytes, path.string());
  }
  if (bytes.size() >= 2 && bytes[0] == 'B' && bytes[1] == 'M') return decode_bmp(bytes, path.string());
  throw FormatError("unsupported or corrupt image " + path.string());
}

void save_png(const std::filesystem::path& path, const LineImage& img) {
  const auto& v = img.pixels.data();
  std::vector<std::uint8_t> gray(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) gray[i] = std::uint8_t(gray_level(v[i]));
  write_gray_png(path, img.height(), img.width(), gray, PNG_FORMAT_GRAY);
}

void save_png(const std::filesystem::path& path, const RawImage& img) {
  const int format = img.channels == 1   ? PNG_FORMAT_GRAY
                     : img.channels == 3 ? PNG_FORMAT_RGB
                     : img.channels == 4 ? PNG_FORMAT_RGBA
                                         : -1;
  if (format < 0) throw ContractError("unsupported channel count " + std::to_string(img.channels));
  write_gray_png(path, img.height, img.width, img.samples, format);
}

std::size_t scaled_width(std::size_t height, std::size_t width, std::size_t target_height,
                         std::size_t max_width) {
  if (height == 0 || width == 0) throw DimensionError("cannot scale a zero-area image");
  const auto w = std::size_t(std::llround(double(width) * double(target_height) / double(height)));
  return std::clamp<std::size_t>(w, 1, std::max<std::size_t>(max_width, 1));
}

LineImage normalize_image(const RawImage& raw, std::size_t target_height, std::size_t max_width) {
  if (raw.height == 0 || raw.width == 0) throw DimensionError("cannot normalize a zero-area image");
  if (raw.channels != 1 && raw.channels != 3 && raw.channels != 4) {
    throw ContractError("unsupported channel count " + std::to_string(raw.channels));
  }
  std::vector<float> gray(raw.height * raw.width);
  for (std::size_t y = 0; y < raw.height; ++y) {
    for (std::size_t x = 0; x < raw.width; ++x) {
      float g;
      if (raw.channels == 1) {
        g = raw.at(y, x, 0) / 255.f;
      } else {
        g = (0.299f * raw.at(y, x, 0) + 0.587f * raw.at(y, x, 1) + 0.114f * raw.at(y, x, 2)) / 255.f;
        if (raw.channels == 4) {
          const float a = raw.at(y, x, 3) / 255.f;
          g = g * a + (1.f - a);
        }
      }
      gray[y * raw.width + x] = g;
    }
  }
  return finish(std::move(gray), raw.height, raw.width, target_height, max_width, "",
                {raw.height, raw.width});
}

LineImage normalize_image(const LineImage& img, std::size_t target_height, std::size_t max_width) {
  if (!img.pixels.defined() || img.pixels.rank() != 3 || img.pixels.shape()[0] != 1) {
    throw DimensionError("line image must be [1,H,W], got " + shape_str(img.pixels.shape()));
  }
  auto out = finish({img.pixels.data().begin(), img.pixels.data().end()}, img.height(), img.width(), target_height, max_width,
                    img.source_path, img.original_size);
  if (out.original_size == std::pair<std::size_t, std::size_t>{0, 0}) {
    out.original_size = {img.height(), img.width()};
  }
  return out;
}

std::size_t otsu_threshold(const LineImage& img) {
  std::array<std::uint64_t, 256> hist{};
  for (float v : img.pixels.data()) ++hist[gray_level(v)];
  const std::uint64_t total = img.pixels.numel();
  if (total > (std::uint64_t{1} << 26)) throw ContractError("image too large for the Otsu histogram");
  std::uint64_t weighted = 0;
  for (std::size_t k = 0; k < 256; ++k) weighted += k * hist[k];

  // Between-class variance is proportional to (S*n0 - N*s0)^2 / (n0*n1).
  // Fractions are compared exactly as quotient then remainder.
  using i128 = __int128;
  auto greater = [](i128 num_a, i128 den_a, i128 num_b, i128 den_b) {
    const i128 qa = num_a / den_a, qb = num_b / den_b;
    if (qa != qb) return qa > qb;
    return (num_a % den_a) * den_b > (num_b % den_b) * den_a;
  };
  std::uint64_t n0 = 0, s0 = 0;
  bool found = false;
  std::size_t best = 0;
  i128 best_num = 0, best_den = 1;
  for (std::size_t t = 0; t < 255; ++t) {
    n0 += hist[t];
    s0 += t * hist[t];
    const std::uint64_t n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const i128 diff = i128(weighted) * i128(n0) - i128(total) * i128(s0);
    const i128 num = diff * diff;
    const i128 den = i128(n0) * i128(n1);
    if (!found || greater(num, den, best_num, best_den)) {
      found = true;
      best = t;
      best_num = num;
      best_den = den;
    }
  }
  if (!found) throw DegenerateError("Otsu threshold undefined for a single-level image");
  return best;
}

LineImage otsu_binarize(const LineImage& img) {
  const std::size_t t = otsu_threshold(img);
  LineImage out = img;
  std::vector<float> v(img.pixels.data().begin(), img.pixels.data().end());
  for (auto& x : v) x = gray_level(x) > t ? 1.f : 0.f;
  out.pixels = Tensor(img.pixels.shape(), std::move(v));
  return out;
}

}  // namespace htr
