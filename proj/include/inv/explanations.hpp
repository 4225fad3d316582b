#pragma once

// Local (per-image, layer-wise) and global (per-class) explanations, with
// versioned JSON import/export.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "inv/error.hpp"
#include "inv/labels.hpp"
#include "inv/store.hpp"

namespace inv {

inline constexpr int kExplanationVersion = 1;
inline constexpr std::size_t kInvLabelsPerMap = 3;
inline constexpr std::size_t kGlobalTopN = 5;

struct ScoredLabel {
  std::string label;
  double score = 0.0;
  friend bool operator==(const ScoredLabel&, const ScoredLabel&) = default;
};

struct InvEntry {
  std::string map_ref;
  double weight = 0.0;
  std::vector<ScoredLabel> labels;  // score descending
  friend bool operator==(const InvEntry&, const InvEntry&) = default;
};

struct InvLayer {
  std::string layer;
  std::vector<InvEntry> entries;  // weight descending
  friend bool operator==(const InvLayer&, const InvLayer&) = default;
};

struct INVExplanation {
  std::string image;
  std::string predicted;
  std::vector<InvLayer> layers;  // shallow to deep
  std::string config_hash;
  friend bool operator==(const INVExplanation&, const INVExplanation&) = default;

  const InvLayer* find(std::string_view layer) const {
    for (const auto& l : layers) {
      if (l.layer == layer) return &l;
    }
    return nullptr;
  }
};

struct GlobalEntry {
  std::string label;
  double weight = 0.0;
  std::size_t support = 0;
  std::string exemplar_ref;
  double exemplar_score = 0.0;
  friend bool operator==(const GlobalEntry&, const GlobalEntry&) = default;
};

struct GlobalExplanation {
  std::string class_name;
  std::string layer;
  std::size_t images = 0;
  std::vector<GlobalEntry> entries;  // weight descending
  std::string config_hash;
  friend bool operator==(const GlobalExplanation&, const GlobalExplanation&) = default;
};

struct LabeledLayer {
  std::string layer;
  std::vector<LabeledMap> maps;
};

// `layers` must already be in network order. Map refs are qualified with
// `image_key`.
inline INVExplanation assemble_inv(std::string image, std::string predicted, const std::vector<LabeledLayer>& layers,
                                   const std::string& image_key, std::size_t labels_per_map = kInvLabelsPerMap) {
  INVExplanation inv{std::move(image), std::move(predicted), {}, {}};
  for (const auto& l : layers) {
    InvLayer out{l.layer, {}};
    double total = 0.0;
    for (const auto& m : l.maps) {
      if (m.groups.empty()) throw ValidationError("cluster map " + m.map.id + " has no scored labels");
      InvEntry e{map_ref(image_key, m.map.id), m.map.weight, {}};
      auto groups = m.groups;
      std::stable_sort(groups.begin(), groups.end(), [](const LabelGroup& a, const LabelGroup& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.representative < b.representative;
      });
      for (std::size_t i = 0; i < std::min(labels_per_map, groups.size()); ++i) e.labels.push_back({groups[i].representative, groups[i].score});
      total += e.weight;
      out.entries.push_back(std::move(e));
    }
    if (total > 1.0 + 1e-9) throw ValidationError("layer " + l.layer + " weights sum to more than 1");
    std::stable_sort(out.entries.begin(), out.entries.end(), [](const InvEntry& a, const InvEntry& b) { return a.weight > b.weight; });
    inv.layers.push_back(std::move(out));
  }
  return inv;
}

// For every label that tops some map in `layer`: mean weight of those maps,
// support = how many, exemplar = the one with the highest label score (ties
// by ref). Truncated to `top_n` by weight.
inline GlobalExplanation aggregate_global(const std::vector<INVExplanation>& invs, const std::string& layer, std::size_t top_n = kGlobalTopN) {
  if (invs.empty()) throw ValidationError("no explanations to aggregate");
  GlobalExplanation g;
  g.class_name = invs.front().predicted;
  g.layer = layer;
  g.images = invs.size();
  struct Acc {
    std::vector<double> weights;
    std::string ref;
    double best = -1.0;
  };
  std::map<std::string, Acc> acc;
  bool seen = false;
  for (const auto& inv : invs) {
    if (inv.predicted != g.class_name) throw ValidationError("explanations span several classes: " + g.class_name + ", " + inv.predicted);
    const auto* l = inv.find(layer);
    if (!l) continue;
    seen = true;
    for (const auto& e : l->entries) {
      if (e.labels.empty()) continue;
      auto& a = acc[e.labels.front().label];
      a.weights.push_back(e.weight);
      const double s = e.labels.front().score;
      if (s > a.best || (s == a.best && e.map_ref < a.ref)) a.best = s, a.ref = e.map_ref;
    }
  }
  if (!seen) throw ValidationError("layer " + layer + " appears in none of the explanations");
  for (auto& [label, a] : acc) {
    std::sort(a.weights.begin(), a.weights.end());  // summation order independent of input order
    const double sum = std::accumulate(a.weights.begin(), a.weights.end(), 0.0);
    g.entries.push_back({label, sum / static_cast<double>(a.weights.size()), a.weights.size(), a.ref, a.best});
  }
  std::stable_sort(g.entries.begin(), g.entries.end(), [](const GlobalEntry& a, const GlobalEntry& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    return a.label < b.label;
  });
  if (g.entries.size() > top_n) g.entries.resize(top_n);
  return g;
}

// ---- JSON ---------------------------------------------------------------------

inline nlohmann::json to_json(const INVExplanation& inv) {
  nlohmann::json doc{{"format", "inv-explanation"}, {"kind", "local"}, {"version", kExplanationVersion},
                     {"image", inv.image},        {"predicted", inv.predicted}, {"config_hash", inv.config_hash}};
  doc["layers"] = nlohmann::json::array();
  for (const auto& l : inv.layers) {
    nlohmann::json jl{{"layer", l.layer}, {"entries", nlohmann::json::array()}};
    for (const auto& e : l.entries) {
      nlohmann::json je{{"map_ref", e.map_ref}, {"weight", e.weight}, {"labels", nlohmann::json::array()}};
      for (const auto& s : e.labels) je["labels"].push_back({{"label", s.label}, {"score", s.score}});
      jl["entries"].push_back(std::move(je));
    }
    doc["layers"].push_back(std::move(jl));
  }
  return doc;
}

inline nlohmann::json to_json(const GlobalExplanation& g) {
  nlohmann::json doc{{"format", "inv-explanation"}, {"kind", "global"}, {"version", kExplanationVersion}, {"class", g.class_name},
                     {"layer", g.layer},            {"images", g.images}, {"config_hash", g.config_hash}};
  doc["entries"] = nlohmann::json::array();
  for (const auto& e : g.entries) {
    doc["entries"].push_back({{"label", e.label}, {"weight", e.weight}, {"support", e.support}, {"exemplar", e.exemplar_ref}, {"exemplar_score", e.exemplar_score}});
  }
  return doc;
}

using Explanation = std::variant<INVExplanation, GlobalExplanation>;

inline Explanation explanation_from_json(const nlohmann::json& doc) {
  if (doc.value("format", "") != "inv-explanation") throw ValidationError("not an explanation document");
  if (!doc.contains("version") || doc.at("version") != kExplanationVersion) {
    throw ValidationError("unsupported explanation version " + (doc.contains("version") ? doc.at("version").dump() : std::string("(missing)")));
  }
  try {
    const auto kind = doc.at("kind").get<std::string>();
    if (kind == "local") {
      INVExplanation inv;
      inv.image = doc.at("image").get<std::string>();
      inv.predicted = doc.at("predicted").get<std::string>();
      inv.config_hash = doc.value("config_hash", "");
      for (const auto& jl : doc.at("layers")) {
        InvLayer l{jl.at("layer").get<std::string>(), {}};
        for (const auto& je : jl.at("entries")) {
          InvEntry e{je.at("map_ref").get<std::string>(), je.at("weight").get<double>(), {}};
          for (const auto& s : je.at("labels")) e.labels.push_back({s.at("label").get<std::string>(), s.at("score").get<double>()});
          l.entries.push_back(std::move(e));
        }
        inv.layers.push_back(std::move(l));
      }
      return inv;
    }
    if (kind == "global") {
      GlobalExplanation g;
      g.class_name = doc.at("class").get<std::string>();
      g.layer = doc.at("layer").get<std::string>();
      g.images = doc.at("images").get<std::size_t>();
      g.config_hash = doc.value("config_hash", "");
      for (const auto& je : doc.at("entries")) {
        g.entries.push_back({je.at("label").get<std::string>(), je.at("weight").get<double>(), je.at("support").get<std::size_t>(),
                             je.at("exemplar").get<std::string>(), je.at("exemplar_score").get<double>()});
      }
      return g;
    }
    throw ValidationError("unknown explanation kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed explanation: ") + e.what());
  }
}

inline std::vector<std::string> map_refs(const Explanation& x) {
  std::vector<std::string> refs;
  if (const auto* inv = std::get_if<INVExplanation>(&x)) {
    for (const auto& l : inv->layers) {
      for (const auto& e : l.entries) refs.push_back(e.map_ref);
    }
  } else {
    for (const auto& e : std::get<GlobalExplanation>(x).entries) refs.push_back(e.exemplar_ref);
  }
  return refs;
}

inline void export_explanation(const Explanation& x, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << std::visit([](const auto& v) { return to_json(v); }, x).dump(2) << "\n";
}

// With a store root, every map ref must resolve to a persisted cluster map.
inline Explanation import_explanation(const std::filesystem::path& path, const std::filesystem::path& store_root = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed explanation " + path.string() + ": " + e.what());
  }
  auto x = explanation_from_json(doc);
  if (!store_root.empty()) {
    for (const auto& r : map_refs(x)) {
      if (!has_map(store_root, r)) throw ValidationError("map ref '" + r + "' does not resolve in " + store_root.string());
    }
  }
  return x;
}

}  // namespace inv
