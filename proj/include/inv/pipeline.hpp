#pragma once

// Stage-file pipeline behind the `inv` command. Every stage reads the files of
// the stage before it under one output directory and writes its own:
//
//   extract         bundles/<key>/, images/<key>.ppm
//   cluster         clusters/<key>/<layer>/, clusters/<key>/image.json
//   masks           masks/<key>/<layer>/c<rank>/, pool.json
//   serve           service/ (event log + snapshot)
//   analyze-labels  labels.json
//   assemble        inv_maps/ (merged maps), inv/<key>.json
//   global          global/<class>__<layer>.json
//   render          render/<key>.png
//   report          report.txt, report.json
//
// Each stage also leaves runs/<stage>.json with the full RunConfig and its hash.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "inv/bundle.hpp"
#include "inv/error.hpp"
#include "inv/explanations.hpp"
#include "inv/fixtures.hpp"
#include "inv/hash.hpp"
#include "inv/image.hpp"
#include "inv/labels.hpp"
#include "inv/mask.hpp"
#include "inv/model.hpp"
#include "inv/render.hpp"
#include "inv/saliency.hpp"
#include "inv/service.hpp"
#include "inv/store.hpp"

namespace inv::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

class MissingArtifactError : public ValidationError {
 public:
  MissingArtifactError(const std::string& what, const std::string& stage)
      : ValidationError(what + "; run `inv " + stage + "` first"), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RunConfig {
  std::string model;
  std::vector<std::string> bundles;
  std::vector<std::string> images;
  std::vector<std::string> layers;
  std::uint64_t seed = 0;
  std::optional<double> tau_f;
  std::map<std::string, double> tau_f_layers;  // per-layer overrides
  std::size_t k_min = 3;
  std::size_t k_max = 8;
  std::vector<double> ladder = kDefaultLadder;
  std::string service_config;
  std::string out = "inv-out";

  json to_json() const {
    return {{"model", model},
            {"bundles", bundles},
            {"images", images},
            {"layers", layers},
            {"seed", seed},
            {"tau_f", tau_f ? json(*tau_f) : json(nullptr)},
            {"tau_f_layers", tau_f_layers},
            {"k_min", k_min},
            {"k_max", k_max},
            {"ladder", ladder},
            {"service_config", service_config},
            {"out", out}};
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    const json defaults = c.to_json();
    if (!j.is_object()) throw ValidationError("run config must be a JSON object");
    for (const auto& [k, _] : j.items()) {
      if (!defaults.contains(k)) throw ValidationError("unknown run config key '" + k + "'");
    }
    try {
      c.model = j.value("model", c.model);
      c.bundles = j.value("bundles", c.bundles);
      c.images = j.value("images", c.images);
      c.layers = j.value("layers", c.layers);
      c.seed = j.value("seed", c.seed);
      if (j.contains("tau_f") && !j.at("tau_f").is_null()) c.tau_f = j.at("tau_f").get<double>();
      c.tau_f_layers = j.value("tau_f_layers", c.tau_f_layers);
      c.k_min = j.value("k_min", c.k_min);
      c.k_max = j.value("k_max", c.k_max);
      c.ladder = j.value("ladder", c.ladder);
      c.service_config = j.value("service_config", c.service_config);
      c.out = j.value("out", c.out);
    } catch (const json::exception& e) {
      throw ValidationError(std::string("bad run config: ") + e.what());
    }
    return c;
  }

  void validate() const {
    auto check_tau = [](double t, const std::string& what) {
      if (!(t >= 0.0 && t < 1.0)) throw ValidationError(what + " must lie in [0, 1)");
    };
    if (tau_f) check_tau(*tau_f, "--tau-f");
    for (const auto& [layer, t] : tau_f_layers) check_tau(t, "tau_f for layer " + layer);
    if (k_min < 2) throw ValidationError("--k-min must be at least 2");
    if (k_min > k_max) throw ValidationError("--k-min must not exceed --k-max");
    validate_ladder(ladder);
    if (out.empty()) throw ValidationError("--out must not be empty");
  }

  std::optional<double> tau_for(const std::string& layer) const {
    auto it = tau_f_layers.find(layer);
    if (it != tau_f_layers.end()) return it->second;
    return tau_f;
  }
};

// The output directory is left out so a relocated run hashes the same.
inline std::string config_hash(const RunConfig& cfg) {
  json j = cfg.to_json();
  j.erase("out");
  return hex64(fnv1a64(j.dump()));
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read run config " + path.string());
  try {
    return RunConfig::from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ValidationError("malformed run config " + path.string() + ": " + e.what());
  }
}

struct Paths {
  fs::path root;
  fs::path bundles() const { return root / "bundles"; }
  fs::path images() const { return root / "images"; }
  fs::path image(const std::string& key) const { return images() / (key + ".ppm"); }
  fs::path clusters() const { return root / "clusters"; }
  fs::path image_meta(const std::string& key) const { return clusters() / key / "image.json"; }
  fs::path masks() const { return root / "masks"; }
  fs::path pool() const { return root / "pool.json"; }
  fs::path service() const { return root / "service"; }
  fs::path label_export() const { return root / "labels_export.jsonl"; }
  fs::path labels() const { return root / "labels.json"; }
  fs::path inv_maps() const { return root / "inv_maps"; }
  fs::path inv() const { return root / "inv"; }
  fs::path global() const { return root / "global"; }
  fs::path render() const { return root / "render"; }
  fs::path runs() const { return root / "runs"; }
};

inline void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void record_run(const RunConfig& cfg, const std::string& stage, const json& summary) {
  write_json(Paths{cfg.out}.runs() / (stage + ".json"),
             {{"stage", stage}, {"config", cfg.to_json()}, {"config_hash", config_hash(cfg)}, {"summary", summary}});
}

inline std::vector<std::uint8_t> png_with_hash(const RgbImage& img, const std::string& hash) {
  return encode_png(img, {{"inv-config-hash", hash}});
}

inline std::vector<std::uint8_t> pbm_with_hash(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w, const std::string& hash) {
  auto bytes = encode_pbm(mask, h, w);
  const std::string comment = "# inv-config-hash " + hash + "\n";
  bytes.insert(bytes.begin() + 3, comment.begin(), comment.end());  // after "P4\n"
  return bytes;
}

// ---- extract ------------------------------------------------------------------

// A path to a model directory / model.json, or the built-in fixture name.
inline ModelSpec resolve_model(const std::string& name_or_path) {
  if (name_or_path.empty()) throw ValidationError("extract needs --model");
  if (!fs::exists(name_or_path) && (name_or_path == "tinynet-3class" || name_or_path == "tinynet")) return fixtures::tinynet_3class();
  return load_model(name_or_path);
}

// ReLU outputs with a (C,H,W) shape; any (C,H,W) layer if there are none.
inline std::vector<std::string> default_layers(const ModelSpec& model) {
  std::vector<std::string> relu, spatial;
  for (const auto& l : model.layers()) {
    if (l.output_shape.size() != 3) continue;
    spatial.push_back(l.name);
    if (std::holds_alternative<ReLU>(l.op)) relu.push_back(l.name);
  }
  return relu.empty() ? spatial : relu;
}

struct ExtractedImage {
  std::string key;
  std::string predicted;
  double probability = 0.0;
  std::vector<std::string> layers;
};

inline std::vector<ExtractedImage> run_extract(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.images.empty()) throw ValidationError("extract needs at least one --image");
  const ModelSpec model = resolve_model(cfg.model);
  const auto layers = cfg.layers.empty() ? default_layers(model) : cfg.layers;
  const Paths paths{cfg.out};
  const std::string hash = config_hash(cfg);
  std::vector<ExtractedImage> out;
  std::set<std::string> keys;
  for (const auto& image_path : cfg.images) {
    const std::string key = sanitize_key(fs::path(image_path).stem().string());
    if (!keys.insert(key).second) throw ValidationError("two images map to the key '" + key + "'");
    const RgbImage img = read_ppm(image_path);
    const ActivationTrace trace = forward(model, tensor_from_image(img));
    const ActivationBundle b = make_bundle(model, trace, trace.predicted, layers, key);
    fs::remove_all(paths.bundles() / key);
    save_bundle(b, paths.bundles() / key, hash);
    json weights = json::object();
    for (const auto& l : b.layers) weights[l.name] = gradcam_weights(l.name, l.activations, l.gradients).weights;
    write_json(paths.bundles() / key / "weights.json", {{"config_hash", hash}, {"class_index", b.class_index}, {"weights", weights}});
    write_ppm(paths.image(key), img);
    out.push_back({key, model.class_names()[trace.predicted], trace.probabilities[trace.predicted], layers});
  }
  json summary = json::array();
  for (const auto& e : out) summary.push_back({{"image", e.key}, {"predicted", e.predicted}, {"probability", e.probability}, {"layers", e.layers}});
  record_run(cfg, "extract", summary);
  return out;
}

// ---- cluster ------------------------------------------------------------------

struct LayerSummary {
  std::string image;
  std::string layer;
  std::size_t channels = 0;
  double tau = 0.0;
  std::size_t positive = 0;
  std::size_t retained = 0;
  double retained_fraction = 0.0;
  std::size_t clusters = 0;
  std::size_t kept = 0;
  std::size_t kept_fmaps = 0;
  double kept_weight = 0.0;
  std::optional<double> silhouette;
  double identity_error = 0.0;  // direct Grad-CAM vs. recomposition over all clusters
};

struct SkippedLayer {
  std::string image;
  std::string layer;
  std::string reason;
};

struct ClusterRun {
  std::vector<LayerSummary> layers;
  std::vector<SkippedLayer> skipped;
};

inline LayerSummary summarize(const StoredLayer& s) {
  LayerSummary r;
  r.image = s.image_key;
  r.layer = s.layer;
  r.channels = s.channels;
  r.tau = s.tau;
  r.positive = s.positive_count;
  r.retained = s.retained_count;
  r.retained_fraction = s.retained_fraction;
  r.clusters = s.clusters.size();
  for (const auto& c : s.kept_clusters()) {
    ++r.kept;
    r.kept_fmaps += c.members.size();
    r.kept_weight += c.weight;
  }
  r.silhouette = s.silhouette;
  return r;
}

inline json to_json(const LayerSummary& r) {
  return {{"image", r.image},
          {"layer", r.layer},
          {"channels", r.channels},
          {"tau", r.tau},
          {"positive", r.positive},
          {"retained", r.retained},
          {"retained_fraction", r.retained_fraction},
          {"clusters", r.clusters},
          {"kept", r.kept},
          {"kept_fmaps", r.kept_fmaps},
          {"kept_weight", r.kept_weight},
          {"silhouette", r.silhouette ? json(*r.silhouette) : json(nullptr)},
          {"identity_error", r.identity_error}};
}

inline std::vector<fs::path> bundle_sources(const RunConfig& cfg) {
  std::vector<fs::path> out;
  for (const auto& b : cfg.bundles) out.emplace_back(b);
  if (!out.empty()) return out;
  const Paths paths{cfg.out};
  if (fs::is_directory(paths.bundles())) {
    for (const auto& e : fs::directory_iterator(paths.bundles())) {
      if (fs::exists(e.path() / "bundle.json")) out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw MissingArtifactError("no activation bundles in " + paths.bundles().string(), "extract");
  return out;
}

inline ClusterRun run_cluster(const RunConfig& cfg) {
  cfg.validate();
  const Paths paths{cfg.out};
  const std::string hash = config_hash(cfg);
  ClusterRun run;
  for (const auto& src : bundle_sources(cfg)) {
    const ActivationBundle b = load_bundle(src);
    const std::string key = sanitize_key(fs::path(b.image).stem().string());
    if (!fs::exists(paths.image(key))) {
      const fs::path dir = fs::is_directory(src) ? src : src.parent_path();
      const fs::path candidate = fs::path(b.image).is_absolute() ? fs::path(b.image) : dir / b.image;
      if (fs::is_regular_file(candidate)) write_ppm(paths.image(key), read_ppm(candidate));
    }
    fs::remove_all(paths.clusters() / key);
    std::vector<std::string> done;
    for (const auto& l : b.layers) {
      if (!cfg.layers.empty() && std::find(cfg.layers.begin(), cfg.layers.end(), l.name) == cfg.layers.end()) continue;
      FeatureMapSet f = gradcam_weights(l.name, l.activations, l.gradients);
      LayerClusteringOptions opt;
      opt.tau = cfg.tau_for(l.name);
      opt.k_min = cfg.k_min;
      opt.k_max = cfg.k_max;
      opt.seed = cfg.seed;
      LayerClustering lc;
      try {
        lc = cluster_feature_maps(std::move(f), opt);
      } catch (const ValidationError& e) {
        run.skipped.push_back({key, l.name, e.what()});
        continue;
      }
      const StoredLayer s = stored_layer(lc, key, hash);
      save_layer(paths.clusters(), s);
      LayerSummary r = summarize(s);
      const Map2D direct = direct_gradcam(lc.retained, lc.features, false).map;
      const Map2D recomposed = compose_gradcam(lc.clusters, false, direct.height, direct.width).map;
      for (std::size_t i = 0; i < direct.size(); ++i) {
        r.identity_error = std::max(r.identity_error, std::abs(direct.values[i] - recomposed.values[i]));
      }
      run.layers.push_back(r);
      done.push_back(l.name);
    }
    json skipped = json::array();
    for (const auto& s : run.skipped) {
      if (s.image == key) skipped.push_back({{"layer", s.layer}, {"reason", s.reason}});
    }
    if (b.class_index >= b.class_names.size()) throw ValidationError("bundle " + src.string() + " has an out-of-range class index");
    write_json(paths.image_meta(key), {{"image", key},
                                       {"predicted", b.class_names[b.class_index]},
                                       {"class_index", b.class_index},
                                       {"class_names", b.class_names},
                                       {"layers", done},
                                       {"skipped", skipped},
                                       {"config_hash", hash}});
  }
  json summary{{"layers", json::array()}, {"skipped", json::array()}};
  for (const auto& r : run.layers) summary["layers"].push_back(to_json(r));
  for (const auto& s : run.skipped) summary["skipped"].push_back({{"image", s.image}, {"layer", s.layer}, {"reason", s.reason}});
  record_run(cfg, "cluster", summary);
  return run;
}

// ---- shared readers -----------------------------------------------------------

struct ImageMeta {
  std::string key;
  std::string predicted;
  std::vector<std::string> class_names;
  std::vector<std::string> layers;  // network order
};

inline std::vector<ImageMeta> clustered_images(const Paths& paths) {
  std::vector<ImageMeta> out;
  for (const auto& key : stored_images(paths.clusters())) {
    if (!fs::exists(paths.image_meta(key))) continue;
    const json j = read_json(paths.image_meta(key));
    out.push_back({key, j.at("predicted").get<std::string>(), j.at("class_names").get<std::vector<std::string>>(),
                   j.at("layers").get<std::vector<std::string>>()});
  }
  if (out.empty()) throw MissingArtifactError("no clustered images in " + paths.clusters().string(), "cluster");
  return out;
}

inline RgbImage stage_image(const Paths& paths, const std::string& key) {
  if (!fs::exists(paths.image(key))) throw MissingArtifactError("no copy of image " + key + " in " + paths.images().string(), "extract");
  return read_ppm(paths.image(key));
}

// ---- masks --------------------------------------------------------------------

struct MaskStageOptions {
  std::vector<std::string> screening;  // image keys or map refs
};

struct MaskRun {
  std::size_t series = 0;
  std::size_t screening = 0;
  std::vector<std::string> skipped;  // map refs with an empty saliency map
};

inline MaskRun run_masks(const RunConfig& cfg, const MaskStageOptions& opt = {}) {
  cfg.validate();
  const Paths paths{cfg.out};
  const std::string hash = config_hash(cfg);
  const auto images = clustered_images(paths);
  const std::set<std::string> screening(opt.screening.begin(), opt.screening.end());
  MaskRun run;
  json items = json::array();
  std::set<std::string> used;
  fs::remove_all(paths.masks());
  for (const auto& meta : images) {
    if (meta.class_names != images.front().class_names) throw ValidationError("images were extracted with different class lists");
    const RgbImage img = stage_image(paths, meta.key);
    for (const auto& layer : meta.layers) {
      const StoredLayer s = load_layer(paths.clusters(), meta.key, layer);
      for (const auto& c : s.kept_clusters()) {
        const std::string ref = map_ref(meta.key, c.id);
        MaskedImageSeries series;
        try {
          series = masked_series(img, c, cfg.ladder, {}, meta.key);
        } catch (const ValidationError&) {
          run.skipped.push_back(ref);
          continue;
        }
        const fs::path dir = paths.masks() / meta.key / sanitize_key(layer) / cluster_rank_name(c);
        for (std::size_t i = 0; i < series.levels.size(); ++i) {
          const auto& lv = series.levels[i];
          write_bytes(dir / ("level" + std::to_string(i) + ".png"), png_with_hash(series.composites[i], hash));
          write_bytes(dir / ("mask" + std::to_string(i) + ".pbm"), pbm_with_hash(lv.binary, lv.height, lv.width, hash));
        }
        write_bytes(dir / "overlay.png", png_with_hash(render_overlay(img, c), hash));
        const bool screen = screening.count(meta.key) > 0 || screening.count(ref) > 0;
        if (screening.count(meta.key)) used.insert(meta.key);
        if (screening.count(ref)) used.insert(ref);
        items.push_back({{"map", ref}, {"image", "images/" + meta.key + ".ppm"}, {"class", meta.predicted}, {"screening", screen}});
        ++run.series;
        run.screening += screen ? 1 : 0;
      }
    }
  }
  for (const auto& s : screening) {
    if (!used.count(s)) throw ValidationError("--screening value '" + s + "' matches no image key or cluster map");
  }
  write_json(paths.pool(), {{"version", 1}, {"classes", images.front().class_names}, {"store", "clusters"}, {"items", items}, {"config_hash", hash}});
  record_run(cfg, "masks", {{"series", run.series}, {"screening", run.screening}, {"skipped", run.skipped}});
  return run;
}

// ---- serve / service access -----------------------------------------------------

inline ServiceConfig service_config(const RunConfig& cfg) {
  if (cfg.service_config.empty()) return {};
  return ServiceConfig::from_json(read_json(cfg.service_config));
}

inline GamePool stage_pool(const Paths& paths) {
  if (!fs::exists(paths.pool())) throw MissingArtifactError("no game pool at " + paths.pool().string(), "masks");
  return load_pool(paths.pool());
}

// ---- analyze-labels -------------------------------------------------------------

struct LabelStageOptions {
  std::string labels;      // label export (JSONL); default: the service's own log
  std::string embeddings;  // precomputed table; default: trigram fallback
};

struct LabelRun {
  std::size_t records = 0;
  std::size_t maps = 0;
  bool fallback_embedder = false;
};

inline LabelRun run_analyze_labels(const RunConfig& cfg, const LabelStageOptions& opt = {}) {
  cfg.validate();
  const Paths paths{cfg.out};
  const std::string hash = config_hash(cfg);
  const GamePool pool = stage_pool(paths);
  std::vector<LabelRecord> records;
  if (!opt.labels.empty()) {
    records = read_label_export(opt.labels);
  } else {
    if (!fs::exists(paths.service() / "events.jsonl") && !fs::exists(paths.service() / "snapshot.json")) {
      throw MissingArtifactError("no label export given and no service data in " + paths.service().string(), "serve");
    }
    const CrowdService svc(pool, service_config(cfg), paths.service());
    const std::string text = svc.export_labels();
    std::ofstream(paths.label_export(), std::ios::trunc) << text;
    std::istringstream in(text);
    records = parse_label_export(in, paths.label_export().string());
  }
  LabelRun run{records.size(), 0, opt.embeddings.empty()};
  std::map<std::string, std::vector<LabelGroup>> result;
  if (opt.embeddings.empty()) {
    result = analyze_labels(records, TrigramEmbedder(), pool.classes);
  } else {
    result = analyze_labels(records, load_embeddings(opt.embeddings), pool.classes);
  }
  run.maps = result.size();
  save_label_analysis(paths.labels(), result, hash);
  record_run(cfg, "analyze-labels", {{"records", run.records}, {"maps", run.maps}, {"fallback_embedder", run.fallback_embedder}});
  return run;
}

// ---- assemble -------------------------------------------------------------------

struct AssembleOptions {
  bool skip_unlabeled = false;
  std::size_t labels_per_map = kInvLabelsPerMap;
};

struct AssembleRun {
  std::vector<std::string> written;  // image keys
  std::vector<std::string> screening_only;
  std::vector<std::string> dropped;     // unlabeled map refs (with skip_unlabeled)
  std::vector<std::string> unplayable;  // kept maps absent from the game pool
};

inline AssembleRun run_assemble(const RunConfig& cfg, const AssembleOptions& opt = {}) {
  cfg.validate();
  const Paths paths{cfg.out};
  const std::string hash = config_hash(cfg);
  const auto images = clustered_images(paths);
  if (!fs::exists(paths.labels())) throw MissingArtifactError("no label analysis at " + paths.labels().string(), "analyze-labels");
  const auto labels = load_label_analysis(paths.labels());
  std::set<std::string> screening_refs, playable;
  const bool have_pool = fs::exists(paths.pool());
  if (have_pool) {
    const json pool = read_json(paths.pool());
    for (const auto& it : pool.at("items")) {
      playable.insert(it.at("map").get<std::string>());
      if (it.value("screening", false)) screening_refs.insert(it.at("map").get<std::string>());
    }
  }
  AssembleRun run;
  fs::remove_all(paths.inv_maps());
  fs::remove_all(paths.inv());
  for (const auto& meta : images) {
    std::vector<LabeledLayer> layers;
    std::size_t total = 0, screened = 0;
    for (const auto& layer : meta.layers) {
      StoredLayer s = load_layer(paths.clusters(), meta.key, layer);
      std::vector<LabeledMap> maps;
      for (const auto& c : s.kept_clusters()) {
        const std::string ref = map_ref(meta.key, c.id);
        ++total;
        screened += screening_refs.count(ref);
        // Maps the masks stage could not show (empty saliency) never reach players.
        if (have_pool && !playable.count(ref)) {
          run.unplayable.push_back(ref);
          continue;
        }
        auto it = labels.find(ref);
        if (it == labels.end() || it->second.empty()) {
          if (!opt.skip_unlabeled && !screening_refs.count(ref)) {
            throw ValidationError("cluster map " + ref + " has no scored labels; collect labels or pass --skip-unlabeled");
          }
          run.dropped.push_back(ref);
          continue;
        }
        maps.push_back({c, it->second, {c.id}});
      }
      if (maps.empty()) continue;
      const auto merged = merge_same_top_label(maps);
      s.clusters.clear();
      s.kept.clear();
      for (const auto& m : merged) {
        s.clusters.push_back(m.map);
        s.kept.push_back(true);
      }
      s.config_hash = hash;
      save_layer(paths.inv_maps(), s);
      layers.push_back({layer, merged});
    }
    if (total > 0 && screened == total) {
      run.screening_only.push_back(meta.key);
      continue;
    }
    INVExplanation inv = assemble_inv(meta.key, meta.predicted, layers, meta.key, opt.labels_per_map);
    inv.config_hash = hash;
    export_explanation(inv, paths.inv() / (meta.key + ".json"));
    run.written.push_back(meta.key);
  }
  record_run(cfg, "assemble", {{"written", run.written}, {"screening_only", run.screening_only}, {"dropped", run.dropped}, {"unplayable", run.unplayable}});
  return run;
}

inline std::vector<INVExplanation> stage_invs(const Paths& paths) {
  std::vector<fs::path> files;
  if (fs::is_directory(paths.inv())) {
    for (const auto& e : fs::directory_iterator(paths.inv())) {
      if (e.path().extension() == ".json") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw MissingArtifactError("no local explanations in " + paths.inv().string(), "assemble");
  std::vector<INVExplanation> out;
  for (const auto& f : files) {
    auto x = import_explanation(f, paths.inv_maps());
    if (!std::holds_alternative<INVExplanation>(x)) throw ValidationError(f.string() + " is not a local explanation");
    out.push_back(std::get<INVExplanation>(std::move(x)));
  }
  return out;
}

// ---- global ---------------------------------------------------------------------

struct GlobalOptions {
  std::string class_name;  // default: every predicted class
  std::string layer;       // default: the deepest layer
  std::size_t top_n = kGlobalTopN;
};

inline std::vector<GlobalExplanation> run_global(const RunConfig& cfg, const GlobalOptions& opt = {}) {
  cfg.validate();
  const Paths paths{cfg.out};
  const std::string hash = config_hash(cfg);
  std::map<std::string, std::vector<INVExplanation>> by_class;
  for (auto& inv : stage_invs(paths)) by_class[inv.predicted].push_back(std::move(inv));
  if (!opt.class_name.empty() && !by_class.count(opt.class_name)) {
    throw ValidationError("no local explanations predict class '" + opt.class_name + "'");
  }
  std::vector<GlobalExplanation> out;
  for (const auto& [cls, invs] : by_class) {
    if (!opt.class_name.empty() && cls != opt.class_name) continue;
    std::string layer = opt.layer;
    if (layer.empty()) {
      if (invs.front().layers.empty()) throw ValidationError("local explanation of " + invs.front().image + " has no layers");
      layer = invs.front().layers.back().layer;
    }
    GlobalExplanation g = aggregate_global(invs, layer, opt.top_n);
    g.config_hash = hash;
    export_explanation(g, paths.global() / (sanitize_key(cls) + "__" + sanitize_key(layer) + ".json"));
    out.push_back(std::move(g));
  }
  json summary = json::array();
  for (const auto& g : out) summary.push_back({{"class", g.class_name}, {"layer", g.layer}, {"images", g.images}, {"entries", g.entries.size()}});
  record_run(cfg, "global", summary);
  return out;
}

// ---- render ---------------------------------------------------------------------

inline std::vector<fs::path> run_render(const RunConfig& cfg, const InvRenderOptions& opt = {}) {
  cfg.validate();
  const Paths paths{cfg.out};
  const std::string hash = config_hash(cfg);
  std::vector<fs::path> out;
  const auto resolve = store_resolver(paths.inv_maps());
  for (const auto& inv : stage_invs(paths)) {
    const RgbImage img = stage_image(paths, inv.image);
    const fs::path file = paths.render() / (sanitize_key(inv.image) + ".png");
    write_bytes(file, png_with_hash(render_inv(inv, img, resolve, opt), hash));
    out.push_back(file);
  }
  json summary = json::array();
  for (const auto& f : out) summary.push_back(fs::relative(f, paths.root).string());
  record_run(cfg, "render", summary);
  return out;
}

// ---- report ---------------------------------------------------------------------

inline constexpr double kRetainedBandLow = 0.70;
inline constexpr double kRetainedBandHigh = 0.90;

struct ReportRow {
  std::string layer;
  std::size_t images = 0;
  double threshold = 0.0;        // mean tau_f
  double clusters = 0.0;         // mean cluster count before the weight threshold
  double leftover_clusters = 0.0;
  double leftover_fmaps = 0.0;   // % of channels
  double leftover_weight = 0.0;  // % of positive weight
  double retained = 0.0;         // % of positive weight after tau_f
};

struct Report {
  std::vector<ReportRow> rows;
  std::string table;
  json doc;
};

inline std::string format_report(const std::vector<ReportRow>& rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %6s %10s %9s %18s %15s %16s %10s %s\n", "layer", "images", "threshold", "clusters", "leftover clusters",
                "leftover fmaps", "leftover weight", "retained", "70-90% band");
  out += buf;
  for (const auto& r : rows) {
    const bool in_band = r.retained >= 100 * kRetainedBandLow && r.retained <= 100 * kRetainedBandHigh;
    std::snprintf(buf, sizeof buf, "%-12s %6zu %9.2f%% %9.1f %18.1f %14.1f%% %15.1f%% %9.1f%% %s\n", r.layer.c_str(), r.images, 100 * r.threshold,
                  r.clusters, r.leftover_clusters, r.leftover_fmaps, r.leftover_weight, r.retained,
                  in_band ? "inside" : (r.retained > 100 * kRetainedBandHigh ? "above" : "below"));
    out += buf;
  }
  return out;
}

inline Report run_report(const RunConfig& cfg) {
  cfg.validate();
  const Paths paths{cfg.out};
  std::vector<std::string> order;
  std::map<std::string, std::vector<LayerSummary>> per_layer;
  std::set<std::string> hashes;
  for (const auto& meta : clustered_images(paths)) {
    for (const auto& layer : meta.layers) {
      const StoredLayer s = load_layer(paths.clusters(), meta.key, layer);
      if (!per_layer.count(layer)) order.push_back(layer);
      per_layer[layer].push_back(summarize(s));
      hashes.insert(s.config_hash);
    }
  }
  Report rep;
  for (const auto& layer : order) {
    const auto& v = per_layer[layer];
    ReportRow r;
    r.layer = layer;
    r.images = v.size();
    for (const auto& s : v) {
      r.threshold += s.tau;
      r.clusters += static_cast<double>(s.clusters);
      r.leftover_clusters += static_cast<double>(s.kept);
      r.leftover_fmaps += 100.0 * static_cast<double>(s.kept_fmaps) / static_cast<double>(s.channels);
      r.leftover_weight += 100.0 * s.kept_weight;
      r.retained += 100.0 * s.retained_fraction;
    }
    const double n = static_cast<double>(v.size());
    r.threshold /= n;
    r.clusters /= n;
    r.leftover_clusters /= n;
    r.leftover_fmaps /= n;
    r.leftover_weight /= n;
    r.retained /= n;
    rep.rows.push_back(r);
  }
  rep.table = format_report(rep.rows);
  rep.doc = {{"config", cfg.to_json()},
             {"config_hash", config_hash(cfg)},
             {"cluster_config_hashes", std::vector<std::string>(hashes.begin(), hashes.end())},
             {"retained_band", {kRetainedBandLow, kRetainedBandHigh}},
             {"rows", json::array()}};
  for (const auto& r : rep.rows) {
    rep.doc["rows"].push_back({{"layer", r.layer},
                               {"images", r.images},
                               {"threshold", r.threshold},
                               {"clusters", r.clusters},
                               {"leftover_clusters", r.leftover_clusters},
                               {"leftover_fmaps_pct", r.leftover_fmaps},
                               {"leftover_weight_pct", r.leftover_weight},
                               {"retained_pct", r.retained}});
  }
  std::ofstream(paths.root / "report.txt", std::ios::trunc) << "config " << config_hash(cfg) << "\n" << rep.table;
  write_json(paths.root / "report.json", rep.doc);
  record_run(cfg, "report", rep.doc["rows"]);
  return rep;
}

}  // namespace inv::pipeline
