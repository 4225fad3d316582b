#pragma once

// Activation bundles let any external runtime feed the pipeline.
//
// bundle.json:
//   {
//     "version": 1,
//     "image": "<image ref>",
//     "class_index": 3,
//     "class_names": [...],
//     "layers": [
//       {"name": "block5_conv3", "shape": [C, H, W],
//        "activations": "block5_conv3.act.f32", "gradients": "block5_conv3.grad.f32"}
//     ]
//   }
//
// Blobs are little-endian float32 in (channel, row, column) order.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "inv/blob.hpp"
#include "inv/error.hpp"
#include "inv/model.hpp"
#include "inv/tensor.hpp"

namespace inv {

struct BundleLayer {
  std::string name;
  Tensor activations;  // [C, H, W]
  Tensor gradients;    // [C, H, W]
};

struct ActivationBundle {
  std::string image;
  std::size_t class_index = 0;
  std::vector<std::string> class_names;
  std::vector<BundleLayer> layers;

  const BundleLayer& layer(std::string_view name) const {
    for (const auto& l : layers) {
      if (l.name == name) return l;
    }
    throw ValidationError("bundle has no layer '" + std::string(name) + "'");
  }
};

// Builds a bundle from a forward pass plus gradients of `class_index` at each
// requested layer. Only (C, H, W) layers are accepted.
inline ActivationBundle make_bundle(const ModelSpec& model, const ActivationTrace& trace, std::size_t class_index,
                                    const std::vector<std::string>& layer_names, std::string image_ref) {
  ActivationBundle b;
  b.image = std::move(image_ref);
  b.class_index = class_index;
  b.class_names = model.class_names();
  for (const auto& name : layer_names) {
    const std::size_t idx = model.layer_index(name);
    const Tensor& act = trace.activations[idx];
    if (act.rank() != 3) throw ValidationError("layer '" + name + "' is not a (C,H,W) feature-map layer");
    b.layers.push_back({name, act, backward_to_layer(model, trace, class_index, name).gradient});
  }
  return b;
}

inline void save_bundle(const ActivationBundle& b, const std::filesystem::path& dir, const std::string& config_hash = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json doc{{"version", 1}, {"image", b.image}, {"class_index", b.class_index}, {"class_names", b.class_names}};
  if (!config_hash.empty()) doc["config_hash"] = config_hash;
  doc["layers"] = nlohmann::json::array();
  for (const auto& l : b.layers) {
    const std::string act = l.name + ".act.f32";
    const std::string grad = l.name + ".grad.f32";
    write_f32_blob(dir / act, l.activations.values());
    write_f32_blob(dir / grad, l.gradients.values());
    doc["layers"].push_back({{"name", l.name}, {"shape", l.activations.shape()}, {"activations", act}, {"gradients", grad}});
  }
  std::ofstream(dir / "bundle.json") << doc.dump(2) << '\n';
}

inline ActivationBundle load_bundle(const std::filesystem::path& path) {
  const auto manifest = std::filesystem::is_directory(path) ? path / "bundle.json" : path;
  const auto dir = manifest.parent_path();
  std::ifstream in(manifest);
  if (!in) throw ValidationError("cannot open bundle manifest " + manifest.string());
  try {
    nlohmann::json doc;
    in >> doc;
    if (doc.at("version").get<int>() != 1) throw ValidationError("unsupported bundle version");
    ActivationBundle b;
    b.image = doc.at("image").get<std::string>();
    b.class_index = doc.at("class_index").get<std::size_t>();
    b.class_names = doc.at("class_names").get<std::vector<std::string>>();
    if (!b.class_names.empty() && b.class_index >= b.class_names.size()) {
      throw ValidationError("bundle class_index out of range");
    }
    for (const auto& jl : doc.at("layers")) {
      BundleLayer l;
      l.name = jl.at("name").get<std::string>();
      const Shape shape = jl.at("shape").get<Shape>();
      if (shape.size() != 3) throw ValidationError("bundle layer '" + l.name + "' shape must be [C,H,W]");
      l.activations = Tensor(shape, read_f32_blob(dir / jl.at("activations").get<std::string>(), shape_size(shape)));
      l.gradients = Tensor(shape, read_f32_blob(dir / jl.at("gradients").get<std::string>(), shape_size(shape)));
      b.layers.push_back(std::move(l));
    }
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed bundle manifest: " + std::string(e.what()));
  }
}

}  // namespace inv
