#pragma once

// RGB images in [0,1], portable pixmap/bitmap IO, PNG encoding, and the
// resampling, blur and color-ramp helpers used by the renderers.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "inv/error.hpp"
#include "inv/tensor.hpp"

namespace inv {

using Rgb = std::array<double, 3>;

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;  // interleaved RGB

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w, Rgb fill = {0.0, 0.0, 0.0}) : height(h), width(w), data(h * w * 3) {
    for (std::size_t i = 0; i < h * w; ++i) {
      for (int c = 0; c < 3; ++c) data[3 * i + c] = fill[c];
    }
  }

  Rgb pixel(std::size_t r, std::size_t c) const {
    const std::size_t i = 3 * (r * width + c);
    return {data[i], data[i + 1], data[i + 2]};
  }
  void set(std::size_t r, std::size_t c, Rgb v) {
    const std::size_t i = 3 * (r * width + c);
    data[i] = v[0];
    data[i + 1] = v[1];
    data[i + 2] = v[2];
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// (3,H,W) or (1,H,W) tensor -> image.
inline RgbImage image_from_tensor(const Tensor& t) {
  if (t.rank() != 3 || (t.channels() != 3 && t.channels() != 1)) {
    throw ValidationError("image tensors must be (3,H,W) or (1,H,W), got " + shape_string(t.shape()));
  }
  RgbImage img(t.height(), t.width());
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      for (std::size_t k = 0; k < 3; ++k) img.data[3 * (r * img.width + c) + k] = t.at(t.channels() == 3 ? k : 0, r, c);
    }
  }
  return img;
}

inline Tensor tensor_from_image(const RgbImage& img) {
  Tensor t({3, img.height, img.width});
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      for (std::size_t k = 0; k < 3; ++k) t.at(k, r, c) = img.data[3 * (r * img.width + c) + k];
    }
  }
  return t;
}

// ---- portable pixmap / bitmap -------------------------------------------------

inline std::vector<std::uint8_t> encode_ppm(const RgbImage& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.data.size());
  for (double v : img.data) out.push_back(to_byte(v));
  return out;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) { write_bytes(path, encode_ppm(img)); }

// Reads binary (P6) or ASCII (P3) pixmaps with maxval <= 255.
inline RgbImage read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip_space();
    std::string s;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') s += static_cast<char>(bytes[pos++]);
    if (s.empty()) throw ValidationError("truncated pixmap header in " + path.filename().string());
    return s;
  };
  auto number = [&] {
    const std::string s = token();
    try {
      return static_cast<std::size_t>(std::stoul(s));
    } catch (...) {
      throw ValidationError("malformed pixmap header in " + path.filename().string());
    }
  };
  const std::string magic = token();
  if (magic != "P6" && magic != "P3") throw ValidationError(path.filename().string() + " is not a P6/P3 pixmap");
  const std::size_t w = number(), h = number(), maxval = number();
  if (maxval == 0 || maxval > 255) throw ValidationError("only 8-bit pixmaps are supported");
  RgbImage img(h, w);
  if (magic == "P6") {
    ++pos;  // single whitespace after maxval
    if (bytes.size() < pos + img.data.size()) throw ValidationError("truncated pixmap " + path.filename().string());
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>(bytes[pos + i]) / static_cast<double>(maxval);
  } else {
    for (double& v : img.data) v = static_cast<double>(number()) / static_cast<double>(maxval);
  }
  return img;
}

// 1-bit bitmap; set bits mark `true` pixels.
inline std::vector<std::uint8_t> encode_pbm(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w) {
  const std::string header = "P4\n" + std::to_string(w) + " " + std::to_string(h) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const std::size_t row_bytes = (w + 7) / 8;
  for (std::size_t r = 0; r < h; ++r) {
    std::vector<std::uint8_t> row(row_bytes, 0);
    for (std::size_t c = 0; c < w; ++c) {
      if (mask[r * w + c]) row[c / 8] |= static_cast<std::uint8_t>(0x80 >> (c % 8));
    }
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

// ---- PNG ------------------------------------------------------------------------

namespace detail {

inline void png_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& payload) {
  auto be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  };
  be32(static_cast<std::uint32_t>(payload.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  be32(static_cast<std::uint32_t>(crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start))));
}

}  // namespace detail

// `text` entries become tEXt chunks (keyword, value).
inline std::vector<std::uint8_t> encode_png(const RgbImage& img, const std::vector<std::pair<std::string, std::string>>& text = {}) {
  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  auto be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) ihdr.push_back(static_cast<std::uint8_t>(v >> s));
  };
  be32(static_cast<std::uint32_t>(img.width));
  be32(static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit truecolor, no interlace
  detail::png_chunk(out, "IHDR", ihdr);
  std::vector<std::uint8_t> raw;
  raw.reserve(img.height * (1 + img.width * 3));
  for (std::size_t r = 0; r < img.height; ++r) {
    raw.push_back(0);
    for (std::size_t i = 0; i < img.width * 3; ++i) raw.push_back(to_byte(img.data[r * img.width * 3 + i]));
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(len);
  if (compress2(z.data(), &len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw std::runtime_error("png compression failed");
  }
  z.resize(len);
  for (const auto& [key, value] : text) {
    std::vector<std::uint8_t> t(key.begin(), key.end());
    t.push_back(0);
    t.insert(t.end(), value.begin(), value.end());
    detail::png_chunk(out, "tEXt", t);
  }
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  return out;
}

// ---- resampling / filtering ---------------------------------------------------

// Bilinear resize with half-pixel centers and edge clamping. Resizing to the
// same size is the identity.
inline Map2D resize_bilinear(const Map2D& src, std::size_t h, std::size_t w) {
  if (src.height == 0 || src.width == 0) throw ValidationError("cannot resize an empty map");
  Map2D out(h, w);
  const double sy = static_cast<double>(src.height) / static_cast<double>(h);
  const double sx = static_cast<double>(src.width) / static_cast<double>(w);
  for (std::size_t r = 0; r < h; ++r) {
    const double fy = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t c = 0; c < w; ++c) {
      const double fx = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = src(y0, x0) * (1.0 - tx) + src(y0, x1) * tx;
      const double bottom = src(y1, x0) * (1.0 - tx) + src(y1, x1) * tx;
      out(r, c) = top * (1.0 - ty) + bottom * ty;
    }
  }
  return out;
}

inline RgbImage resize_nearest(const RgbImage& src, std::size_t h, std::size_t w) {
  RgbImage out(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) out.set(r, c, src.pixel(r * src.height / h, c * src.width / w));
  }
  return out;
}

// Separable Gaussian blur, kernel radius ceil(3 sigma), replicated edges.
inline Map2D gaussian_blur(const Map2D& src, double sigma) {
  if (sigma <= 1e-6) return src;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * static_cast<std::size_t>(radius) + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    sum += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  }
  for (double& k : kernel) k /= sum;
  const auto H = static_cast<std::ptrdiff_t>(src.height), W = static_cast<std::ptrdiff_t>(src.width);
  Map2D tmp(src.height, src.width), out(src.height, src.width);
  for (std::ptrdiff_t r = 0; r < H; ++r) {
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += kernel[static_cast<std::size_t>(i + radius)] *
               src(static_cast<std::size_t>(r), static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(c + i, 0, W - 1)));
      }
      tmp(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
    }
  }
  for (std::ptrdiff_t r = 0; r < H; ++r) {
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += kernel[static_cast<std::size_t>(i + radius)] *
               tmp(static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(r + i, 0, H - 1)), static_cast<std::size_t>(c));
      }
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
    }
  }
  return out;
}

// Five-stop ramp: blue, cyan, green, yellow, red at 0, .25, .5, .75, 1.
inline Rgb color_ramp(double t) {
  static constexpr std::array<Rgb, 5> stops{{{0, 0, 1}, {0, 1, 1}, {0, 1, 0}, {1, 1, 0}, {1, 0, 0}}};
  t = std::clamp(t, 0.0, 1.0);
  const double pos = t * 4.0;
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(pos), 3);
  const double f = pos - static_cast<double>(i);
  Rgb out;
  for (int c = 0; c < 3; ++c) out[c] = stops[i][c] * (1.0 - f) + stops[i + 1][c] * f;
  return out;
}

}  // namespace inv
