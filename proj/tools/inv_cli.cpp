// inv: command-line driver for the explanation pipeline.
//
// Exit codes: 0 ok, 1 validation failure, 2 internal error.

#include <csignal>
#include <cstdlib>
#include <iostream>

#include "inv/pipeline.hpp"
#include "inv/http_api.hpp"

#include <CLI11.hpp>

namespace {

using namespace inv;
using namespace inv::pipeline;

struct CommonFlags {
  std::string config;
  std::optional<std::string> model;
  std::vector<std::string> bundles;
  std::vector<std::string> images;
  std::optional<std::string> layers;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau_f;
  std::optional<std::size_t> k_min;
  std::optional<std::size_t> k_max;
  std::optional<std::string> ladder;
  std::optional<std::string> service_config;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Run config JSON (default: $INV_CONFIG)");
  cmd->add_option("--model", f.model, "Model directory, model.json, or tinynet-3class");
  cmd->add_option("--bundle", f.bundles, "Activation bundle directory (repeatable)");
  cmd->add_option("--image", f.images, "Input image, 8-bit PPM (repeatable)");
  cmd->add_option("--layers", f.layers, "Comma-separated layer names");
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("--tau-f", f.tau_f, "Feature-map weight threshold (default 0.9/C)");
  cmd->add_option("--k-min", f.k_min, "Smallest cluster count tried");
  cmd->add_option("--k-max", f.k_max, "Largest cluster count tried");
  cmd->add_option("--ladder", f.ladder, "Comma-separated mask percentiles, 6 values");
  cmd->add_option("--service-config", f.service_config, "Crowd service config JSON");
  cmd->add_option("--out", f.out, "Output directory");
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

RunConfig build_config(const CommonFlags& f) {
  RunConfig cfg;
  std::string path = f.config;
  if (path.empty()) {
    if (const char* env = std::getenv("INV_CONFIG"); env && *env) path = env;
  }
  if (!path.empty()) cfg = load_run_config(path);
  if (f.model) cfg.model = *f.model;
  if (!f.bundles.empty()) cfg.bundles = f.bundles;
  if (!f.images.empty()) cfg.images = f.images;
  if (f.layers) cfg.layers = split_commas(*f.layers);
  if (f.seed) cfg.seed = *f.seed;
  if (f.tau_f) cfg.tau_f = *f.tau_f;
  if (f.k_min) cfg.k_min = *f.k_min;
  if (f.k_max) cfg.k_max = *f.k_max;
  if (f.ladder) {
    cfg.ladder.clear();
    for (const auto& p : split_commas(*f.ladder)) {
      try {
        std::size_t used = 0;
        cfg.ladder.push_back(std::stod(p, &used));
        if (used != p.size()) throw std::invalid_argument(p);
      } catch (const std::logic_error&) {
        throw ValidationError("--ladder value '" + p + "' is not a number");
      }
    }
  }
  if (f.service_config) cfg.service_config = *f.service_config;
  if (f.out) cfg.out = *f.out;
  cfg.validate();
  return cfg;
}

httplib::Server* g_server = nullptr;

void stop_server(int) {
  if (g_server) g_server->stop();
}

int serve(const RunConfig& cfg, std::optional<int> port) {
  const Paths paths{cfg.out};
  ServiceConfig sc = service_config(cfg);
  if (port) sc.port = *port;
  CrowdService svc(stage_pool(paths), sc, paths.service());
  httplib::Server server;
  mount_api(server, svc);
  g_server = &server;
  std::signal(SIGINT, stop_server);
  std::signal(SIGTERM, stop_server);
  std::cout << "serving " << svc.pool().items.size() << " cluster maps on http://" << sc.bind_address << ":" << sc.port << std::endl;
  if (!server.listen(sc.bind_address, sc.port)) throw ValidationError("cannot listen on " + sc.bind_address + ":" + std::to_string(sc.port));
  svc.snapshot();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise explanations from clustered Grad-CAM maps and crowd labels"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* extract = app.add_subcommand("extract", "Forward/backward pass; write activation bundles");
  auto* cluster = app.add_subcommand("cluster", "Threshold, reduce and cluster feature maps");
  auto* masks = app.add_subcommand("masks", "Render mask ladders and overlays; write the game pool");
  auto* serve_cmd = app.add_subcommand("serve", "Run the crowd labeling service");
  auto* analyze = app.add_subcommand("analyze-labels", "Cluster and score collected labels");
  auto* assemble = app.add_subcommand("assemble", "Merge labeled maps into local explanations");
  auto* global = app.add_subcommand("global", "Aggregate local explanations per class");
  auto* render = app.add_subcommand("render", "Render local explanations to PNG");
  auto* report = app.add_subcommand("report", "Per-layer thresholding and clustering table");
  for (auto* cmd : {extract, cluster, masks, serve_cmd, analyze, assemble, global, render, report}) add_common(cmd, flags);

  MaskStageOptions mask_opt;
  masks->add_option("--screening", mask_opt.screening, "Image key or map ref to use as a screening item (repeatable)");
  std::optional<int> port;
  serve_cmd->add_option("--port", port, "Override the configured port");
  LabelStageOptions label_opt;
  analyze->add_option("--labels", label_opt.labels, "Label export (JSONL); default: the service data under --out");
  analyze->add_option("--embeddings", label_opt.embeddings, "Precomputed embedding table manifest");
  AssembleOptions assemble_opt;
  assemble->add_flag("--skip-unlabeled", assemble_opt.skip_unlabeled, "Drop cluster maps without labels instead of failing");
  assemble->add_option("--labels-per-map", assemble_opt.labels_per_map, "Labels kept per map")->check(CLI::PositiveNumber);
  GlobalOptions global_opt;
  global->add_option("--class", global_opt.class_name, "Class to aggregate (default: all)");
  global->add_option("--layer", global_opt.layer, "Layer to aggregate (default: deepest)");
  global->add_option("--top-n", global_opt.top_n, "Entries kept")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const RunConfig cfg = build_config(flags);
    if (extract->parsed()) {
      for (const auto& e : run_extract(cfg)) {
        std::printf("%s: predicted %s (p=%.3f), layers %zu\n", e.key.c_str(), e.predicted.c_str(), e.probability, e.layers.size());
      }
    } else if (cluster->parsed()) {
      const auto run = run_cluster(cfg);
      for (const auto& r : run.layers) {
        std::printf("%s/%s: %zu/%zu maps retained (%.1f%% of weight), %zu clusters, %zu kept\n", r.image.c_str(), r.layer.c_str(), r.retained,
                    r.channels, 100 * r.retained_fraction, r.clusters, r.kept);
      }
      for (const auto& s : run.skipped) std::fprintf(stderr, "skipped %s/%s: %s\n", s.image.c_str(), s.layer.c_str(), s.reason.c_str());
    } else if (masks->parsed()) {
      const auto run = run_masks(cfg, mask_opt);
      std::printf("%zu mask series (%zu screening) -> %s\n", run.series, run.screening, Paths{cfg.out}.pool().string().c_str());
      for (const auto& s : run.skipped) std::fprintf(stderr, "skipped %s: empty saliency\n", s.c_str());
      if (run.screening == 0) std::fprintf(stderr, "warning: no screening items; no player can become trusted\n");
    } else if (serve_cmd->parsed()) {
      return serve(cfg, port);
    } else if (analyze->parsed()) {
      const auto run = run_analyze_labels(cfg, label_opt);
      std::printf("%zu label records -> %zu labeled maps\n", run.records, run.maps);
      if (run.fallback_embedder) std::fprintf(stderr, "warning: no --embeddings given; using the character-trigram fallback embedder\n");
    } else if (assemble->parsed()) {
      const auto run = run_assemble(cfg, assemble_opt);
      std::printf("%zu local explanations written\n", run.written.size());
      for (const auto& d : run.dropped) std::fprintf(stderr, "dropped unlabeled %s\n", d.c_str());
      for (const auto& d : run.unplayable) std::fprintf(stderr, "dropped %s (not in the game pool)\n", d.c_str());
    } else if (global->parsed()) {
      for (const auto& g : run_global(cfg, global_opt)) {
        std::printf("%s @ %s: %zu images, %zu entries\n", g.class_name.c_str(), g.layer.c_str(), g.images, g.entries.size());
      }
    } else if (render->parsed()) {
      for (const auto& f : run_render(cfg)) std::printf("%s\n", f.string().c_str());
    } else if (report->parsed()) {
      const auto rep = run_report(cfg);
      std::printf("config %s\n%s", config_hash(cfg).c_str(), rep.table.c_str());
    }
    return 0;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
}
