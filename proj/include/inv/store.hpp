#pragma once

// On-disk cluster-map store.
//
//   <root>/<image key>/<layer>/manifest.json
//   <root>/<image key>/<layer>/c<rank>.f32
//
// A map ref is "<image key>/<layer>/c<rank>". The manifest records the full
// (pre-threshold) cluster set, which of them survived the cluster-weight
// threshold, the silhouette report and the reduction settings.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "inv/blob.hpp"
#include "inv/error.hpp"
#include "inv/saliency.hpp"

namespace inv {

inline constexpr int kClusterManifestVersion = 1;

struct StoredLayer {
  std::string image_key;
  std::string layer;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  double tau = 0.0;
  double retained_fraction = 0.0;
  std::size_t retained_count = 0;
  std::size_t positive_count = 0;
  std::optional<double> silhouette;
  std::vector<std::pair<std::size_t, double>> candidates;
  ReductionReport reduction;
  std::vector<ClusterMap> clusters;  // ids are layer-local ("<layer>/c<rank>")
  std::vector<bool> kept;
  std::string config_hash;

  std::vector<ClusterMap> kept_clusters() const {
    std::vector<ClusterMap> out;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      if (kept[i]) out.push_back(clusters[i]);
    }
    return out;
  }
};

// Keeps alphanumerics, '-', '_' and '.'; everything else becomes '_'.
inline std::string sanitize_key(std::string_view s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  if (out.empty() || out == "." || out == "..") out = "_";
  return out;
}

inline std::string map_ref(const std::string& image_key, const std::string& cluster_id) { return image_key + "/" + cluster_id; }

struct ParsedRef {
  std::string image_key;
  std::string layer;
  std::string cluster;  // "c<rank>"
};

inline ParsedRef parse_map_ref(std::string_view ref) {
  const auto a = ref.find('/');
  const auto b = ref.rfind('/');
  if (a == std::string_view::npos || a == b || b + 1 >= ref.size() || ref[b + 1] != 'c') {
    throw ValidationError("malformed map ref '" + std::string(ref) + "'");
  }
  return {std::string(ref.substr(0, a)), std::string(ref.substr(a + 1, b - a - 1)), std::string(ref.substr(b + 1))};
}

inline StoredLayer stored_layer(const LayerClustering& lc, std::string image_key, std::string config_hash = {}) {
  StoredLayer s;
  s.image_key = std::move(image_key);
  s.layer = lc.retained.layer;
  s.height = lc.retained.height;
  s.width = lc.retained.width;
  s.channels = lc.features.channels();
  s.tau = lc.retained.threshold;
  s.retained_fraction = lc.retained.retained_fraction;
  s.retained_count = lc.retained.size();
  s.positive_count = lc.retained.positive_count;
  s.silhouette = lc.assignment.silhouette;
  s.candidates = lc.assignment.candidates;
  s.reduction = lc.embedding.report;
  s.clusters = lc.clusters;
  for (const auto& c : lc.clusters) {
    bool k = false;
    for (const auto& m : lc.kept) k = k || m.id == c.id;
    s.kept.push_back(k);
  }
  s.config_hash = std::move(config_hash);
  return s;
}

inline std::string cluster_rank_name(const ClusterMap& c) { return c.id.substr(c.id.rfind('/') + 1); }

inline void save_layer(const std::filesystem::path& root, const StoredLayer& s) {
  const auto dir = root / sanitize_key(s.image_key) / sanitize_key(s.layer);
  std::filesystem::create_directories(dir);
  nlohmann::json doc;
  doc["format"] = "inv-clusters";
  doc["version"] = kClusterManifestVersion;
  doc["image"] = s.image_key;
  doc["layer"] = s.layer;
  doc["height"] = s.height;
  doc["width"] = s.width;
  doc["channels"] = s.channels;
  doc["tau"] = s.tau;
  doc["retained_fraction"] = s.retained_fraction;
  doc["retained_count"] = s.retained_count;
  doc["positive_count"] = s.positive_count;
  doc["silhouette"] = s.silhouette ? nlohmann::json(*s.silhouette) : nlohmann::json(nullptr);
  doc["candidates"] = nlohmann::json::array();
  for (auto [k, v] : s.candidates) doc["candidates"].push_back({{"k", k}, {"silhouette", v}});
  doc["reduction"] = {{"pca_dims", s.reduction.pca_dims},
                      {"tsne_applied", s.reduction.tsne_applied},
                      {"tsne_iterations", s.reduction.tsne_iterations},
                      {"perplexity", s.reduction.perplexity},
                      {"seed", s.reduction.seed}};
  doc["config_hash"] = s.config_hash;
  doc["clusters"] = nlohmann::json::array();
  for (std::size_t i = 0; i < s.clusters.size(); ++i) {
    const auto& c = s.clusters[i];
    const std::string blob = cluster_rank_name(c) + ".f32";
    write_f32_blob(dir / blob, c.map.values);
    doc["clusters"].push_back({{"id", c.id}, {"weight", c.weight}, {"members", c.members}, {"kept", bool(s.kept[i])}, {"blob", blob}});
  }
  std::ofstream(dir / "manifest.json") << doc.dump(2) << "\n";
}

inline StoredLayer load_layer(const std::filesystem::path& root, const std::string& image_key, const std::string& layer) {
  const auto dir = root / sanitize_key(image_key) / sanitize_key(layer);
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ValidationError("no stored clusters for " + image_key + "/" + layer);
  StoredLayer s;
  try {
    const auto doc = nlohmann::json::parse(in);
    if (doc.value("format", "") != "inv-clusters") throw ValidationError("not a cluster manifest: " + (dir / "manifest.json").string());
    if (doc.at("version").get<int>() != kClusterManifestVersion) {
      throw ValidationError("unsupported cluster manifest version " + doc.at("version").dump());
    }
    s.image_key = doc.at("image").get<std::string>();
    s.layer = doc.at("layer").get<std::string>();
    s.height = doc.at("height").get<std::size_t>();
    s.width = doc.at("width").get<std::size_t>();
    s.channels = doc.at("channels").get<std::size_t>();
    s.tau = doc.at("tau").get<double>();
    s.retained_fraction = doc.at("retained_fraction").get<double>();
    s.retained_count = doc.at("retained_count").get<std::size_t>();
    s.positive_count = doc.at("positive_count").get<std::size_t>();
    if (!doc.at("silhouette").is_null()) s.silhouette = doc.at("silhouette").get<double>();
    for (const auto& c : doc.at("candidates")) s.candidates.emplace_back(c.at("k").get<std::size_t>(), c.at("silhouette").get<double>());
    const auto& r = doc.at("reduction");
    s.reduction = {r.at("pca_dims").get<std::size_t>(), r.at("tsne_iterations").get<std::size_t>(), r.at("perplexity").get<double>(),
                   r.at("seed").get<std::uint64_t>(), r.at("tsne_applied").get<bool>()};
    s.config_hash = doc.value("config_hash", "");
    for (const auto& c : doc.at("clusters")) {
      ClusterMap m;
      m.id = c.at("id").get<std::string>();
      m.layer = s.layer;
      m.weight = c.at("weight").get<double>();
      m.members = c.at("members").get<std::vector<std::size_t>>();
      m.map = Map2D(s.height, s.width, read_f32_blob(dir / c.at("blob").get<std::string>(), s.height * s.width));
      s.clusters.push_back(std::move(m));
      s.kept.push_back(c.at("kept").get<bool>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed cluster manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  return s;
}

inline std::vector<std::string> stored_layers(const std::filesystem::path& root, const std::string& image_key) {
  std::vector<std::string> out;
  const auto dir = root / sanitize_key(image_key);
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (std::filesystem::exists(e.path() / "manifest.json")) out.push_back(e.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::string> stored_images(const std::filesystem::path& root) {
  std::vector<std::string> out;
  if (!std::filesystem::is_directory(root)) return out;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory()) out.push_back(e.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline bool has_map(const std::filesystem::path& root, std::string_view ref) {
  try {
    const auto p = parse_map_ref(ref);
    return std::filesystem::exists(root / sanitize_key(p.image_key) / sanitize_key(p.layer) / (p.cluster + ".f32"));
  } catch (const ValidationError&) {
    return false;
  }
}

inline ClusterMap load_map(const std::filesystem::path& root, std::string_view ref) {
  const auto p = parse_map_ref(ref);
  const auto layer = load_layer(root, p.image_key, p.layer);
  for (const auto& c : layer.clusters) {
    if (cluster_rank_name(c) == p.cluster) return c;
  }
  throw ValidationError("map ref '" + std::string(ref) + "' does not resolve");
}

}  // namespace inv
