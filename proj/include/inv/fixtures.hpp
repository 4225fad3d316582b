#pragma once

// The tinynet-3class fixture: three synthetic 16x16 RGB images (disc, bars,
// checker) and a small CNN that tells them apart. Conv weights are seeded
// random; each dense row is the centered, unit-normalized penultimate
// feature vector d_c = f_c - mean of its class image, with bias -row.mean,
// so logit k on image c is row_k . d_c, largest at k = c.
// Every weight is rounded to float32 so the saved model equals this one.

#include <cmath>
#include <string>
#include <vector>

#include "inv/blob.hpp"
#include "inv/image.hpp"
#include "inv/model.hpp"
#include "inv/random.hpp"

namespace inv::fixtures {

inline constexpr std::size_t kSide = 16;
inline constexpr std::uint64_t kSeed = 20240611;
inline const std::vector<std::string> kClassNames{"disc", "bars", "checker"};

inline double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

// Class c's synthetic image, already on the 8-bit grid.
inline RgbImage synthetic_image(std::size_t c) {
  RgbImage img(kSide, kSide);
  for (std::size_t r = 0; r < kSide; ++r) {
    for (std::size_t x = 0; x < kSide; ++x) {
      const double dy = static_cast<double>(r) - 7.5, dx = static_cast<double>(x) - 7.5;
      Rgb px{0.1, 0.1, 0.15};
      if (c == 0 && dx * dx + dy * dy < 25.0) px = {0.95, 0.8, 0.2};
      if (c == 1 && (r / 2) % 2 == 0) px = {0.2, 0.5, 0.95};
      if (c == 2 && ((r / 4) + (x / 4)) % 2 == 0) px = {0.9, 0.9, 0.9};
      img.set(r, x, {quantize8(px[0]), quantize8(px[1]), quantize8(px[2])});
    }
  }
  return img;
}

namespace detail {

inline Tensor f32_normal(Rng& rng, Shape shape, double stddev, double mean = 0.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = to_f32(rng.normal(mean, stddev));
  return t;
}

inline Layer conv(Rng& rng, std::string name, std::size_t in, std::size_t out) {
  Conv2D c;
  c.out_channels = out;
  c.kernel_h = c.kernel_w = 3;
  c.stride = 1;
  c.padding = 1;
  c.weights = f32_normal(rng, {out, in, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(in)));
  c.bias = f32_normal(rng, {out}, 0.05, 0.05);
  return {std::move(name), std::move(c), {}};
}

}  // namespace detail

inline ModelSpec tinynet_3class() {
  Rng rng(kSeed);
  std::vector<Layer> layers;
  layers.push_back(detail::conv(rng, "conv1_pre", 3, 8));
  layers.push_back({"conv1", ReLU{}, {}});
  layers.push_back({"pool1", MaxPool2D{2, 2}, {}});
  layers.push_back(detail::conv(rng, "conv2_pre", 8, 16));
  layers.push_back({"conv2", ReLU{}, {}});
  layers.push_back({"pool2", MaxPool2D{2, 2}, {}});
  layers.push_back(detail::conv(rng, "conv3_pre", 16, 16));
  layers.push_back({"conv3", ReLU{}, {}});
  layers.push_back({"flatten", Flatten{}, {}});
  const std::size_t features = 16 * 4 * 4;

  // Penultimate features of each class image, via a provisional zero head.
  Dense zero;
  zero.units = kClassNames.size();
  zero.weights = Tensor({zero.units, features});
  zero.bias = Tensor({zero.units});
  auto provisional_layers = layers;
  provisional_layers.push_back({"fc", zero, {}});
  provisional_layers.push_back({"prob", Softmax{}, {}});
  const ModelSpec provisional({3, kSide, kSide}, std::move(provisional_layers), kClassNames);
  const std::size_t flat = provisional.layer_index("flatten");
  std::vector<std::vector<double>> f;
  for (std::size_t c = 0; c < kClassNames.size(); ++c) {
    f.push_back(forward(provisional, tensor_from_image(synthetic_image(c))).activations[flat].vector());
  }
  std::vector<double> mean(features, 0.0);
  for (const auto& v : f) {
    for (std::size_t i = 0; i < features; ++i) mean[i] += v[i] / static_cast<double>(f.size());
  }
  Dense fc;
  fc.units = kClassNames.size();
  fc.weights = Tensor({fc.units, features});
  fc.bias = Tensor({fc.units});
  for (std::size_t c = 0; c < fc.units; ++c) {
    double norm = 0.0;
    for (std::size_t i = 0; i < features; ++i) norm += (f[c][i] - mean[i]) * (f[c][i] - mean[i]);
    norm = std::sqrt(norm);
    double b = 0.0;
    for (std::size_t i = 0; i < features; ++i) {
      fc.weights[c * features + i] = to_f32(4.0 * (f[c][i] - mean[i]) / norm);
      b -= fc.weights[c * features + i] * mean[i];
    }
    fc.bias[c] = to_f32(b);
  }
  layers.push_back({"fc", std::move(fc), {}});
  layers.push_back({"prob", Softmax{}, {}});
  return ModelSpec({3, kSide, kSide}, std::move(layers), kClassNames);
}

inline const std::vector<std::string> kTinynetLayers{"conv1", "conv2", "conv3"};

}  // namespace inv::fixtures
