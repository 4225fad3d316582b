#pragma once

// Minimal sequential CNN: conv / relu / maxpool / flatten / dense / softmax,
// with a forward pass that records every layer output and a logit-seeded
// reverse pass down to any intermediate layer.
//
// On-disk format (model.json next to its weight blobs):
//
//   {
//     "format": "inv-model", "version": 1,
//     "input_shape": [C, H, W],
//     "class_names": ["...", ...],
//     "layers": [
//       {"type": "conv2d", "name": "...", "out_channels": O, "kernel": [KH, KW],
//        "stride": S, "padding": P, "weights": "file.f32", "bias": "file.f32"},
//       {"type": "relu", "name": "..."},
//       {"type": "maxpool2d", "name": "...", "window": K, "stride": S},
//       {"type": "flatten", "name": "..."},
//       {"type": "dense", "name": "...", "units": N, "weights": "file.f32", "bias": "file.f32"},
//       {"type": "softmax", "name": "..."}
//     ]
//   }
//
// Conv weights are [O, C, KH, KW], dense weights [N, IN], both row-major
// little-endian float32. Convolution is cross-correlation (no kernel flip)
// with zero padding.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "inv/blob.hpp"
#include "inv/error.hpp"
#include "inv/tensor.hpp"

namespace inv {

struct Conv2D {
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor weights;  // [O, C, KH, KW]
  Tensor bias;     // [O]
};
struct ReLU {};
struct MaxPool2D {
  std::size_t window = 2;
  std::size_t stride = 2;
};
struct Flatten {};
struct Dense {
  std::size_t units = 0;
  Tensor weights;  // [N, IN]
  Tensor bias;     // [N]
};
struct Softmax {};

using LayerOp = std::variant<Conv2D, ReLU, MaxPool2D, Flatten, Dense, Softmax>;

struct Layer {
  std::string name;
  LayerOp op;
  Shape output_shape;  // filled by validation
};

inline const char* layer_type_name(const LayerOp& op) {
  return std::visit(
      [](const auto& l) -> const char* {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv2D>) return "conv2d";
        else if constexpr (std::is_same_v<T, ReLU>) return "relu";
        else if constexpr (std::is_same_v<T, MaxPool2D>) return "maxpool2d";
        else if constexpr (std::is_same_v<T, Flatten>) return "flatten";
        else if constexpr (std::is_same_v<T, Dense>) return "dense";
        else return "softmax";
      },
      op);
}

class ModelSpec {
 public:
  ModelSpec(Shape input_shape, std::vector<Layer> layers, std::vector<std::string> class_names)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)), class_names_(std::move(class_names)) {
    validate();
  }

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  std::size_t num_classes() const { return class_names_.size(); }

  // Index of the layer producing the logits (the last non-softmax layer).
  std::size_t logits_index() const { return logits_index_; }

  std::optional<std::size_t> find_layer(std::string_view name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t layer_index(std::string_view name) const {
    auto idx = find_layer(name);
    if (!idx) throw ValidationError("unknown layer '" + std::string(name) + "'");
    return *idx;
  }

 private:
  void validate() {
    if (input_shape_.empty() || shape_size(input_shape_) == 0) throw ValidationError("model input shape is empty");
    if (layers_.empty()) throw ValidationError("model has no layers");
    Shape shape = input_shape_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Layer& layer = layers_[i];
      auto fail = [&](const std::string& why) {
        throw ValidationError("layer '" + layer.name + "' (" + layer_type_name(layer.op) + "): " + why);
      };
      if (std::holds_alternative<Softmax>(layer.op) && i + 1 != layers_.size()) fail("softmax is only allowed as the final layer");
      shape = std::visit(
          [&](auto& l) -> Shape {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Conv2D>) {
              if (shape.size() != 3) fail("expects a (C,H,W) input, got " + shape_string(shape));
              if (l.kernel_h == 0 || l.kernel_w == 0 || l.stride == 0 || l.out_channels == 0) fail("zero-sized hyperparameter");
              if (l.weights.shape() != Shape{l.out_channels, shape[0], l.kernel_h, l.kernel_w}) {
                fail("weight shape " + shape_string(l.weights.shape()) + " does not match input " + shape_string(shape));
              }
              if (l.bias.shape() != Shape{l.out_channels}) fail("bias shape mismatch");
              if (!l.weights.all_finite() || !l.bias.all_finite()) fail("non-finite weight");
              const std::size_t ph = shape[1] + 2 * l.padding;
              const std::size_t pw = shape[2] + 2 * l.padding;
              if (ph < l.kernel_h || pw < l.kernel_w) fail("kernel larger than padded input");
              return {l.out_channels, (ph - l.kernel_h) / l.stride + 1, (pw - l.kernel_w) / l.stride + 1};
            } else if constexpr (std::is_same_v<T, MaxPool2D>) {
              if (shape.size() != 3) fail("expects a (C,H,W) input, got " + shape_string(shape));
              if (l.window == 0 || l.stride == 0) fail("zero-sized hyperparameter");
              if (shape[1] < l.window || shape[2] < l.window) fail("window larger than input");
              return {shape[0], (shape[1] - l.window) / l.stride + 1, (shape[2] - l.window) / l.stride + 1};
            } else if constexpr (std::is_same_v<T, Flatten>) {
              return {shape_size(shape)};
            } else if constexpr (std::is_same_v<T, Dense>) {
              if (shape.size() != 1) fail("expects a flat input, got " + shape_string(shape));
              if (l.weights.shape() != Shape{l.units, shape[0]}) {
                fail("weight shape " + shape_string(l.weights.shape()) + " does not match upstream output dim " +
                     std::to_string(shape[0]));
              }
              if (l.bias.shape() != Shape{l.units}) fail("bias shape mismatch");
              if (!l.weights.all_finite() || !l.bias.all_finite()) fail("non-finite weight");
              return {l.units};
            } else if constexpr (std::is_same_v<T, Softmax>) {
              if (shape.size() != 1) fail("softmax expects a flat input");
              return shape;
            } else {
              return shape;
            }
          },
          layer.op);
      layer.output_shape = shape;
    }
    logits_index_ = std::holds_alternative<Softmax>(layers_.back().op) ? layers_.size() - 2 : layers_.size() - 1;
    if (layers_.size() == 1 && std::holds_alternative<Softmax>(layers_.back().op)) throw ValidationError("model has only a softmax layer");
    const Shape& logits = layers_[logits_index_].output_shape;
    if (logits.size() != 1) throw ValidationError("final layer output must be flat, got " + shape_string(logits));
    if (class_names_.size() != logits[0]) {
      throw ValidationError("class-name count " + std::to_string(class_names_.size()) + " does not match logit dimension " +
                            std::to_string(logits[0]));
    }
  }

  Shape input_shape_;
  std::vector<Layer> layers_;
  std::vector<std::string> class_names_;
  std::size_t logits_index_ = 0;
};

struct ActivationTrace {
  Tensor input;
  std::vector<Tensor> activations;  // one per layer, in layer order
  std::vector<double> logits;
  std::vector<double> probabilities;
  std::size_t predicted = 0;
};

struct LayerGradients {
  std::string layer;
  Tensor gradient;  // d(seeded logits) / d(layer output)
};

namespace detail {

inline Tensor conv_forward(const Conv2D& l, const Tensor& x, const Shape& out_shape) {
  Tensor y(out_shape);
  const std::size_t C = x.channels(), H = x.height(), W = x.width();
  const std::size_t OH = out_shape[1], OW = out_shape[2];
  const auto& w = l.weights;
  for (std::size_t o = 0; o < l.out_channels; ++o) {
    for (std::size_t i = 0; i < OH; ++i) {
      for (std::size_t j = 0; j < OW; ++j) {
        double acc = l.bias[o];
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t u = 0; u < l.kernel_h; ++u) {
            const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * l.stride + u) - static_cast<std::ptrdiff_t>(l.padding);
            if (r < 0 || r >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t v = 0; v < l.kernel_w; ++v) {
              const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(j * l.stride + v) - static_cast<std::ptrdiff_t>(l.padding);
              if (s < 0 || s >= static_cast<std::ptrdiff_t>(W)) continue;
              acc += w[((o * C + c) * l.kernel_h + u) * l.kernel_w + v] * x.at(c, r, s);
            }
          }
        }
        y.at(o, i, j) = acc;
      }
    }
  }
  return y;
}

inline Tensor conv_backward(const Conv2D& l, const Shape& in_shape, const Tensor& g) {
  Tensor dx(in_shape);
  const std::size_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
  const std::size_t OH = g.height(), OW = g.width();
  const auto& w = l.weights;
  for (std::size_t o = 0; o < l.out_channels; ++o) {
    for (std::size_t i = 0; i < OH; ++i) {
      for (std::size_t j = 0; j < OW; ++j) {
        const double go = g.at(o, i, j);
        if (go == 0.0) continue;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t u = 0; u < l.kernel_h; ++u) {
            const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * l.stride + u) - static_cast<std::ptrdiff_t>(l.padding);
            if (r < 0 || r >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t v = 0; v < l.kernel_w; ++v) {
              const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(j * l.stride + v) - static_cast<std::ptrdiff_t>(l.padding);
              if (s < 0 || s >= static_cast<std::ptrdiff_t>(W)) continue;
              dx.at(c, r, s) += w[((o * C + c) * l.kernel_h + u) * l.kernel_w + v] * go;
            }
          }
        }
      }
    }
  }
  return dx;
}

// Position (flat index into the input) of the first maximum of each window.
inline std::vector<std::size_t> maxpool_argmax(const MaxPool2D& l, const Tensor& x, const Shape& out_shape) {
  std::vector<std::size_t> arg(shape_size(out_shape));
  const std::size_t H = x.height(), W = x.width();
  std::size_t k = 0;
  for (std::size_t c = 0; c < out_shape[0]; ++c) {
    for (std::size_t i = 0; i < out_shape[1]; ++i) {
      for (std::size_t j = 0; j < out_shape[2]; ++j, ++k) {
        std::size_t best = (c * H + i * l.stride) * W + j * l.stride;
        for (std::size_t u = 0; u < l.window; ++u) {
          for (std::size_t v = 0; v < l.window; ++v) {
            const std::size_t idx = (c * H + i * l.stride + u) * W + j * l.stride + v;
            if (x[idx] > x[best]) best = idx;
          }
        }
        arg[k] = best;
      }
    }
  }
  return arg;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += (p[i] = std::exp(logits[i] - m));
  for (double& v : p) v /= sum;
  return p;
}

inline Tensor layer_forward(const Layer& layer, const Tensor& x) {
  return std::visit(
      [&](const auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv2D>) {
          return conv_forward(l, x, layer.output_shape);
        } else if constexpr (std::is_same_v<T, ReLU>) {
          Tensor y = x;
          for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
          return y;
        } else if constexpr (std::is_same_v<T, MaxPool2D>) {
          const auto arg = maxpool_argmax(l, x, layer.output_shape);
          Tensor y(layer.output_shape);
          for (std::size_t k = 0; k < arg.size(); ++k) y[k] = x[arg[k]];
          return y;
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return x.reshaped(layer.output_shape);
        } else if constexpr (std::is_same_v<T, Dense>) {
          Tensor y(layer.output_shape);
          const std::size_t in = x.size();
          for (std::size_t o = 0; o < l.units; ++o) {
            double acc = l.bias[o];
            for (std::size_t k = 0; k < in; ++k) acc += l.weights[o * in + k] * x[k];
            y[o] = acc;
          }
          return y;
        } else {
          return Tensor(layer.output_shape, softmax(x.values()));
        }
      },
      layer.op);
}

// Gradient w.r.t. the layer input, given the input x and output gradient g.
inline Tensor layer_backward(const Layer& layer, const Tensor& x, const Tensor& g) {
  return std::visit(
      [&](const auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv2D>) {
          return conv_backward(l, x.shape(), g);
        } else if constexpr (std::is_same_v<T, ReLU>) {
          Tensor dx(x.shape());
          for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
          return dx;
        } else if constexpr (std::is_same_v<T, MaxPool2D>) {
          const auto arg = maxpool_argmax(l, x, layer.output_shape);
          Tensor dx(x.shape());
          for (std::size_t k = 0; k < arg.size(); ++k) dx[arg[k]] += g[k];
          return dx;
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return g.reshaped(x.shape());
        } else if constexpr (std::is_same_v<T, Dense>) {
          const std::size_t in = x.size();
          Tensor dx(x.shape());
          for (std::size_t o = 0; o < l.units; ++o) {
            const double go = g[o];
            if (go == 0.0) continue;
            for (std::size_t k = 0; k < in; ++k) dx[k] += l.weights[o * in + k] * go;
          }
          return dx;
        } else {
          throw ValidationError("cannot back-propagate through softmax; gradients are seeded at the logits");
        }
      },
      layer.op);
}

}  // namespace detail

// Runs layers [first, logits_index] starting from `input` (the output of
// layer first-1, or the image when first == 0) and returns the logits.
inline std::vector<double> forward_logits_from(const ModelSpec& model, std::size_t first, const Tensor& input) {
  Tensor x = input;
  for (std::size_t i = first; i <= model.logits_index(); ++i) x = detail::layer_forward(model.layers()[i], x);
  return x.vector();
}

inline ActivationTrace forward(const ModelSpec& model, const Tensor& image) {
  if (image.shape() != model.input_shape()) {
    throw ValidationError("image shape " + shape_string(image.shape()) + " does not match model input " +
                          shape_string(model.input_shape()));
  }
  ActivationTrace trace;
  trace.input = image;
  trace.activations.reserve(model.layers().size());
  const Tensor* x = &image;
  for (const Layer& layer : model.layers()) {
    trace.activations.push_back(detail::layer_forward(layer, *x));
    x = &trace.activations.back();
  }
  trace.logits = trace.activations[model.logits_index()].vector();
  trace.probabilities = detail::softmax(trace.logits);
  trace.predicted = static_cast<std::size_t>(std::max_element(trace.logits.begin(), trace.logits.end()) - trace.logits.begin());
  return trace;
}

// Layer id naming the model input rather than any layer output.
inline constexpr std::string_view kInputLayer = "input";

// Reverse-mode gradient of sum_c seed[c] * logit_c w.r.t. the output of `layer`
// (or the model input when layer == kInputLayer).
inline LayerGradients backward_to_layer(const ModelSpec& model, const ActivationTrace& trace,
                                        std::span<const double> seed, std::string_view layer) {
  std::ptrdiff_t target = -1;
  if (layer != kInputLayer) {
    const auto found = model.find_layer(layer);
    if (!found) throw ValidationError("unknown layer '" + std::string(layer) + "'");
    target = static_cast<std::ptrdiff_t>(*found);
  }
  if (target >= static_cast<std::ptrdiff_t>(model.logits_index())) {
    throw ValidationError("layer '" + std::string(layer) + "' does not precede the logits layer");
  }
  if (seed.size() != model.num_classes()) throw ValidationError("gradient seed has the wrong length");
  if (trace.activations.size() != model.layers().size()) throw ValidationError("trace does not belong to this model");
  Tensor g(model.layers()[model.logits_index()].output_shape, std::vector<double>(seed.begin(), seed.end()));
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(model.logits_index()); i > target; --i) {
    const auto idx = static_cast<std::size_t>(i);
    const Tensor& x = idx == 0 ? trace.input : trace.activations[idx - 1];
    g = detail::layer_backward(model.layers()[idx], x, g);
  }
  return {std::string(layer), std::move(g)};
}

inline LayerGradients backward_to_layer(const ModelSpec& model, const ActivationTrace& trace,
                                        std::size_t class_index, std::string_view layer) {
  if (class_index >= model.num_classes()) throw ValidationError("class index " + std::to_string(class_index) + " out of range");
  std::vector<double> seed(model.num_classes(), 0.0);
  seed[class_index] = 1.0;
  return backward_to_layer(model, trace, seed, layer);
}

// ---- persistence ---------------------------------------------------------

inline ModelSpec load_model(const std::filesystem::path& path) {
  const std::filesystem::path manifest_path = std::filesystem::is_directory(path) ? path / "model.json" : path;
  const std::filesystem::path dir = manifest_path.parent_path();
  std::ifstream in(manifest_path);
  if (!in) throw ValidationError("cannot open model manifest " + manifest_path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed model manifest: " + std::string(e.what()));
  }
  try {
    if (doc.value("format", "") != "inv-model" || doc.value("version", 0) != 1) {
      throw ValidationError("unsupported model manifest (expected format inv-model, version 1)");
    }
    Shape input = doc.at("input_shape").get<Shape>();
    Shape shape = input;
    std::vector<Layer> layers;
    for (const auto& jl : doc.at("layers")) {
      Layer layer;
      layer.name = jl.at("name").get<std::string>();
      const std::string type = jl.at("type").get<std::string>();
      auto blob = [&](const char* key, Shape s) {
        try {
          return Tensor(s, read_f32_blob(dir / jl.at(key).get<std::string>(), shape_size(s)));
        } catch (const ValidationError& e) {
          throw ValidationError("layer '" + layer.name + "': " + e.what());
        }
      };
      if (type == "conv2d") {
        Conv2D c;
        c.out_channels = jl.at("out_channels").get<std::size_t>();
        const auto k = jl.at("kernel").get<std::vector<std::size_t>>();
        if (k.size() != 2) throw ValidationError("layer '" + layer.name + "': kernel must be [h, w]");
        c.kernel_h = k[0];
        c.kernel_w = k[1];
        c.stride = jl.value("stride", std::size_t{1});
        c.padding = jl.value("padding", std::size_t{0});
        if (shape.size() != 3) throw ValidationError("layer '" + layer.name + "': conv2d expects a (C,H,W) input");
        c.weights = blob("weights", {c.out_channels, shape[0], c.kernel_h, c.kernel_w});
        c.bias = blob("bias", {c.out_channels});
        const std::size_t ph = shape[1] + 2 * c.padding, pw = shape[2] + 2 * c.padding;
        if (ph < c.kernel_h || pw < c.kernel_w || c.stride == 0) throw ValidationError("layer '" + layer.name + "': kernel larger than padded input");
        shape = {c.out_channels, (ph - c.kernel_h) / c.stride + 1, (pw - c.kernel_w) / c.stride + 1};
        layer.op = std::move(c);
      } else if (type == "relu") {
        layer.op = ReLU{};
      } else if (type == "maxpool2d") {
        MaxPool2D m{jl.at("window").get<std::size_t>(), jl.value("stride", jl.at("window").get<std::size_t>())};
        if (shape.size() != 3 || shape[1] < m.window || shape[2] < m.window || m.stride == 0) {
          throw ValidationError("layer '" + layer.name + "': pooling window does not fit input " + shape_string(shape));
        }
        shape = {shape[0], (shape[1] - m.window) / m.stride + 1, (shape[2] - m.window) / m.stride + 1};
        layer.op = m;
      } else if (type == "flatten") {
        shape = {shape_size(shape)};
        layer.op = Flatten{};
      } else if (type == "dense") {
        Dense d;
        d.units = jl.at("units").get<std::size_t>();
        if (shape.size() != 1) {
          throw ValidationError("layer '" + layer.name + "': dense expects a flat input, got " + shape_string(shape));
        }
        const std::size_t in_dim = jl.value("in_features", shape[0]);
        if (in_dim != shape[0]) {
          throw ValidationError("layer '" + layer.name + "': dense input dim " + std::to_string(in_dim) +
                                " does not match upstream output dim " + std::to_string(shape[0]));
        }
        d.weights = blob("weights", {d.units, in_dim});
        d.bias = blob("bias", {d.units});
        shape = {d.units};
        layer.op = std::move(d);
      } else if (type == "softmax") {
        layer.op = Softmax{};
      } else {
        throw ValidationError("layer '" + layer.name + "': unknown layer type '" + type + "'");
      }
      layers.push_back(std::move(layer));
    }
    return ModelSpec(std::move(input), std::move(layers), doc.at("class_names").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed model manifest: " + std::string(e.what()));
  }
}

// Writes model.json plus one blob per parameter tensor. Parameters are stored
// as float32, so a saved model reloads with float32-rounded weights.
inline void save_model(const ModelSpec& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json doc;
  doc["format"] = "inv-model";
  doc["version"] = 1;
  doc["input_shape"] = model.input_shape();
  doc["class_names"] = model.class_names();
  doc["layers"] = nlohmann::json::array();
  Shape upstream = model.input_shape();
  for (const Layer& layer : model.layers()) {
    nlohmann::json jl{{"name", layer.name}, {"type", layer_type_name(layer.op)}};
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv2D>) {
            jl["out_channels"] = l.out_channels;
            jl["kernel"] = {l.kernel_h, l.kernel_w};
            jl["stride"] = l.stride;
            jl["padding"] = l.padding;
            jl["weights"] = layer.name + "_weights.f32";
            jl["bias"] = layer.name + "_bias.f32";
            write_f32_blob(dir / (layer.name + "_weights.f32"), l.weights.values());
            write_f32_blob(dir / (layer.name + "_bias.f32"), l.bias.values());
          } else if constexpr (std::is_same_v<T, MaxPool2D>) {
            jl["window"] = l.window;
            jl["stride"] = l.stride;
          } else if constexpr (std::is_same_v<T, Dense>) {
            jl["units"] = l.units;
            jl["in_features"] = upstream.at(0);
            jl["weights"] = layer.name + "_weights.f32";
            jl["bias"] = layer.name + "_bias.f32";
            write_f32_blob(dir / (layer.name + "_weights.f32"), l.weights.values());
            write_f32_blob(dir / (layer.name + "_bias.f32"), l.bias.values());
          }
        },
        layer.op);
    doc["layers"].push_back(std::move(jl));
    upstream = layer.output_shape;
  }
  std::ofstream(dir / "model.json") << doc.dump(2) << '\n';
}

}  // namespace inv
