#pragma once

// Percentile masks, the reveal ladder, and heatmap overlays.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "inv/error.hpp"
#include "inv/image.hpp"
#include "inv/saliency.hpp"

namespace inv {

inline const std::vector<double> kDefaultLadder{92, 86, 80, 74, 68, 62};
inline constexpr std::size_t kLadderLevels = 6;
inline constexpr Rgb kHiddenGray{0.5, 0.5, 0.5};

struct MaskOptions {
  double blur_sigma_224 = 8.0;  // blur sigma at 224 px, scaled with image size
};

struct MaskLevel {
  double percentile = 0.0;
  double threshold = 0.0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> binary;
  Map2D alpha;
  double visible_fraction = 0.0;  // of the binary mask, before blur
};

struct MaskedImageSeries {
  std::string image_ref;
  std::string map_id;
  std::vector<MaskLevel> levels;
  std::vector<RgbImage> composites;
  Rgb background = kHiddenGray;
};

inline double blur_sigma(std::size_t h, std::size_t w, const MaskOptions& opt = {}) {
  return opt.blur_sigma_224 * static_cast<double>(std::max(h, w)) / 224.0;
}

// k-th smallest with k = ceil(p N / 100), clamped to [1, N].
inline double nearest_rank(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("percentile of an empty map");
  const auto n = values.size();
  auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) / 100.0));
  k = std::clamp<std::size_t>(k, 1, n);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k - 1), values.end());
  return values[k - 1];
}

inline Map2D upscaled_saliency(const Map2D& map, std::size_t h, std::size_t w) {
  Map2D relu = map;
  for (double& v : relu.values) v = std::max(v, 0.0);
  return resize_bilinear(relu, h, w);
}

inline MaskLevel make_mask(const Map2D& map, std::size_t h, std::size_t w, double p, const MaskOptions& opt = {}) {
  if (!(p > 0.0 && p < 100.0)) throw ValidationError("percentile must lie in (0, 100), got " + std::to_string(p));
  if (h == 0 || w == 0) throw ValidationError("image size must be positive");
  const Map2D up = upscaled_saliency(map, h, w);
  if (std::all_of(up.values.begin(), up.values.end(), [](double v) { return v == 0.0; })) {
    throw ValidationError("empty saliency");
  }
  MaskLevel m;
  m.percentile = p;
  m.height = h;
  m.width = w;
  m.threshold = nearest_rank(up.values, p);
  m.binary.resize(up.size());
  Map2D bin(h, w);
  std::size_t visible = 0;
  for (std::size_t i = 0; i < up.size(); ++i) {
    m.binary[i] = up.values[i] > m.threshold;
    bin.values[i] = m.binary[i];
    visible += m.binary[i];
  }
  m.visible_fraction = static_cast<double>(visible) / static_cast<double>(up.size());
  m.alpha = gaussian_blur(bin, blur_sigma(h, w, opt));
  for (double& a : m.alpha.values) a = std::clamp(a, 0.0, 1.0);
  if (visible == 0) throw ValidationError("empty saliency");
  return m;
}

inline MaskLevel make_mask(const ClusterMap& map, std::size_t h, std::size_t w, double p, const MaskOptions& opt = {}) {
  return make_mask(map.map, h, w, p, opt);
}

inline void validate_ladder(const std::vector<double>& ladder) {
  if (ladder.size() != kLadderLevels) {
    throw ValidationError("the hint ladder needs exactly " + std::to_string(kLadderLevels) + " percentiles");
  }
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    if (!(ladder[i] > 0.0 && ladder[i] < 100.0)) throw ValidationError("ladder percentiles must lie in (0, 100)");
    if (i && !(ladder[i] < ladder[i - 1])) throw ValidationError("ladder percentiles must be strictly decreasing");
  }
}

inline RgbImage composite(const RgbImage& image, const Map2D& alpha, Rgb background) {
  RgbImage out(image.height, image.width);
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      out.data[3 * i + c] = image.data[3 * i + c] * alpha.values[i] + background[c] * (1.0 - alpha.values[i]);
    }
  }
  return out;
}

inline MaskedImageSeries masked_series(const RgbImage& image, const ClusterMap& map, const std::vector<double>& ladder = kDefaultLadder,
                                       const MaskOptions& opt = {}, std::string image_ref = {}) {
  validate_ladder(ladder);
  MaskedImageSeries s;
  s.image_ref = std::move(image_ref);
  s.map_id = map.id;
  for (double p : ladder) {
    s.levels.push_back(make_mask(map, image.height, image.width, p, opt));
    s.composites.push_back(composite(image, s.levels.back().alpha, s.background));
  }
  return s;
}

inline MaskedImageSeries masked_series(const Tensor& image, const ClusterMap& map, const std::vector<double>& ladder = kDefaultLadder,
                                       const MaskOptions& opt = {}, std::string image_ref = {}) {
  return masked_series(image_from_tensor(image), map, ladder, opt, std::move(image_ref));
}

// ReLU then min-max to [0,1]; a flat map becomes all zeros.
inline Map2D unit_scaled(const Map2D& map) {
  Map2D out = map;
  for (double& v : out.values) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
  const double a = *lo, b = *hi;
  for (double& v : out.values) v = b > a ? (v - a) / (b - a) : 0.0;
  return out;
}

inline RgbImage heatmap(const Map2D& map, std::size_t h, std::size_t w) {
  const Map2D up = resize_bilinear(unit_scaled(map), h, w);
  RgbImage out(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) out.set(r, c, color_ramp(up(r, c)));
  }
  return out;
}

inline RgbImage render_overlay(const RgbImage& image, const Map2D& map) {
  const RgbImage heat = heatmap(map, image.height, image.width);
  RgbImage out(image.height, image.width);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = 0.5 * image.data[i] + 0.5 * heat.data[i];
  return out;
}

inline RgbImage render_overlay(const RgbImage& image, const ClusterMap& map) { return render_overlay(image, map.map); }
inline RgbImage render_overlay(const Tensor& image, const ClusterMap& map) { return render_overlay(image_from_tensor(image), map.map); }

// Grayscale export of a map at its native resolution.
inline RgbImage map_image(const Map2D& map) {
  const Map2D s = unit_scaled(map);
  RgbImage out(map.height, map.width);
  for (std::size_t i = 0; i < s.size(); ++i) out.set(i / map.width, i % map.width, {s.values[i], s.values[i], s.values[i]});
  return out;
}

}  // namespace inv
