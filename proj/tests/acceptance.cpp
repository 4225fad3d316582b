// Acceptance run: one PASS/FAIL line per primary criterion. Exit status is
// the number of failures (capped at 1).

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <string>

#include "inv/pipeline.hpp"
#include "support.hpp"

namespace {

using namespace inv;
using namespace inv::pipeline;
namespace fs = std::filesystem;
namespace t = inv::testing;

const fs::path kFixtures = fs::path(INV_SOURCE_DIR) / "fixtures";

// Thrown by `require`; the message becomes the FAIL reason.
struct CheckFailed {
  std::string why;
};

void require(bool ok, const std::string& why) {
  if (!ok) throw CheckFailed{why};
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- recomposition identity -----------------------------------------------------

double direct_sum_error(const RetainedSet& r, const FeatureMapSet& f, const std::vector<ClusterMap>& clusters) {
  const auto composed = compose_gradcam(clusters, false, f.maps.height(), f.maps.width());
  const std::size_t plane = f.maps.height() * f.maps.width();
  double err = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    double direct = 0.0;
    for (auto idx : r.indices) direct += r.normalized[idx] * f.maps.channel(idx)[p];
    err = std::max(err, std::abs(composed.map.values[p] - direct));
  }
  return err;
}

std::string check_identity() {
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 + rng.below(11), h = 3 + rng.below(4), w = 3 + rng.below(4);
    FeatureMapSet f{"L", t::random_tensor(rng, {c, h, w}), std::vector<double>(c)};
    for (auto& wk : f.weights) wk = rng.uniform(-0.5, 1.0);
    f.weights[rng.below(c)] = 1.0;
    const auto r = normalize_and_threshold(f, rng.uniform(0.0, 0.5 / static_cast<double>(c)));
    ClusterAssignment a;
    a.count = 1 + rng.below(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) a.labels.push_back(i < a.count ? i : rng.below(a.count));
    rng.shuffle(a.labels);
    worst = std::max(worst, direct_sum_error(r, f, merge_clusters(r, a, f)));
  }
  const ModelSpec model = load_model(kFixtures / "tinynet-3class");
  std::size_t layers = 0;
  for (const auto& cls : fixtures::kClassNames) {
    const auto trace = forward(model, tensor_from_image(read_ppm(kFixtures / "images" / (cls + ".ppm"))));
    for (const auto& name : fixtures::kTinynetLayers) {
      const auto g = backward_to_layer(model, trace, trace.predicted, name).gradient;
      const auto lc = cluster_feature_maps(gradcam_weights(name, trace.activations[model.layer_index(name)], g), {});
      worst = std::max(worst, direct_sum_error(lc.retained, lc.features, lc.clusters));
      ++layers;
    }
  }
  require(worst < 1e-9, "max deviation " + fmt("%.3g", worst));
  return "100 random instances + " + std::to_string(layers) + " fixture layers, max deviation " + fmt("%.2g", worst);
}

// ---- gradient oracle ------------------------------------------------------------

std::string check_gradients() {
  Rng rng(202);
  double worst = 0.0;
  std::size_t checks = 0;
  for (int m = 0; m < 20; ++m) {
    const ModelSpec model = t::random_tiny_cnn(rng, 1 + rng.below(2), 1 + rng.below(3), 8);
    const Tensor img = t::uniform_tensor(rng, model.input_shape());
    const auto trace = forward(model, img);
    // ReLU outputs feeding a max-pool are skipped: the pool's routing is
    // piecewise, so a central difference can straddle a switch.
    std::vector<std::string> layers{"input"};
    for (const auto& l : model.layers()) {
      if (l.name.starts_with("conv") || l.name == "pool1" || l.name == "relu2") layers.push_back(l.name);
    }
    for (const auto& layer : layers) {
      for (std::size_t c = 0; c < model.num_classes(); ++c) {
        const auto analytic = backward_to_layer(model, trace, c, layer).gradient;
        Tensor numeric;
        if (layer == "input") {
          numeric = Tensor(img.shape());
          for (std::size_t k = 0; k < img.size(); ++k) {
            Tensor plus = img, minus = img;
            plus[k] += 1e-5;
            minus[k] -= 1e-5;
            numeric[k] = (forward_logits_from(model, 0, plus)[c] - forward_logits_from(model, 0, minus)[c]) / 2e-5;
          }
        } else {
          numeric = t::finite_difference_gradient(model, img, model.layer_index(layer), c, 1e-5);
        }
        worst = std::max(worst, t::max_relative_error(analytic, numeric));
        ++checks;
      }
    }
  }
  require(worst < 1e-6, "max relative error " + fmt("%.3g", worst));
  return "20 models, " + std::to_string(checks) + " (layer, class) gradients, max relative error " + fmt("%.2g", worst);
}

// ---- ward oracle ----------------------------------------------------------------

std::string check_ward() {
  Rng rng(303);
  int checked = 0, rejected = 0;
  while (checked < 50) {
    std::vector<std::array<double, 2>> pts(3 + rng.below(6));
    for (auto& p : pts) p = {rng.uniform(0, 10), rng.uniform(0, 10)};
    const auto oracle = t::brute_force_ward(pts);
    if (oracle.min_gap < 1e-9) {
      ++rejected;
      continue;
    }
    const auto sets = t::dendrogram_member_sets(agglomerate(euclidean_distances(pts), Linkage::kWard), pts.size());
    require(sets.size() == oracle.merges.size(), "merge count differs");
    for (std::size_t s = 0; s < sets.size(); ++s) {
      const auto& [a, b] = sets[s];
      require((a == oracle.merges[s].first && b == oracle.merges[s].second) || (a == oracle.merges[s].second && b == oracle.merges[s].first),
              "set " + std::to_string(checked) + " differs at merge " + std::to_string(s));
    }
    ++checked;
  }
  return "50 point sets (n 3..8) match step for step; " + std::to_string(rejected) + " near-tie sets redrawn";
}

// ---- silhouette / k selection -----------------------------------------------------

std::string check_blobs() {
  double lowest = 1.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    EmbeddingPoints e;
    for (const auto& p : t::three_blobs(rng, 5)) e.points.push_back({p[0], p[1]});
    const auto a = cluster_layer(e, 3, 8);
    require(a.count == 3, "seed " + std::to_string(seed) + " selected k=" + std::to_string(a.count));
    require(a.silhouette && *a.silhouette > 0.8, "seed " + std::to_string(seed) + " silhouette " + fmt("%.3f", a.silhouette.value_or(-2)));
    lowest = std::min(lowest, *a.silhouette);
  }
  return "k=3 for 10/10 seeds, lowest silhouette " + fmt("%.3f", lowest);
}

// ---- cluster-weight threshold ---------------------------------------------------

std::string check_threshold() {
  auto kept = [](std::vector<double> w) {
    std::vector<ClusterMap> maps;
    for (std::size_t i = 0; i < w.size(); ++i) maps.push_back({"L/c" + std::to_string(i), "L", Map2D(1, 1, 1.0), w[i], {i}});
    std::vector<double> out;
    for (const auto& m : threshold_cluster_maps(maps)) out.push_back(m.weight);
    return out;
  };
  require(kept({0.6, 0.2, 0.1, 0.1}) == std::vector<double>{0.6, 0.2}, "[0.6,0.2,0.1,0.1]");
  require(kept({0.25, 0.25, 0.25, 0.25}).size() == 4, "[0.25]x4");
  require(kept({1.0}) == std::vector<double>{1.0}, "[1.0]");
  return "[0.6,0.2,0.1,0.1] -> {0.6,0.2}; [0.25]x4 -> all; [1.0] -> kept";
}

// ---- label scoring ----------------------------------------------------------------

std::string check_scoring() {
  auto rec = [](std::string player, bool correct, int hints) {
    LabelRecord r;
    r.player = std::move(player);
    r.map_ref = "img/conv/c0";
    r.guessed_class = correct ? "church" : "castle";
    r.true_class = "church";
    r.correct = correct;
    r.hints_used = hints;
    r.text = "steeple";
    r.trusted = true;
    return r;
  };
  LabelGroup g;
  g.members = {"steeple"};
  g.representative = "steeple";
  const std::vector<std::pair<std::vector<LabelRecord>, double>> cases{
      {{rec("a", true, 0), rec("b", true, 2), rec("c", true, 1)}, 2.7},
      {{rec("a", false, 1), rec("b", false, 0)}, 0.475},
      {{rec("a", true, 0)}, 1.0}};
  for (const auto& [records, expected] : cases) {
    const double s = score({g}, records)[0].score;
    require(std::abs(s - expected) <= 1e-12, "expected " + fmt("%.6g", expected) + ", got " + fmt("%.17g", s));
  }
  return "2.7, 0.475, 1.0 exact to 1e-12";
}

// ---- mask ladder ------------------------------------------------------------------

std::string check_masks() {
  Rng rng(404);
  double worst = 0.0;
  int maps = 0, redrawn = 0;
  while (maps < 50) {
    // Past 3x upscaling the clamped corners repeat values, so stay below it.
    const std::size_t h = 6 + rng.below(10), w = 6 + rng.below(10);
    const std::size_t H = h + 1 + rng.below(2 * h), W = w + 1 + rng.below(2 * w);
    Map2D m(h, w);
    for (double& v : m.values) v = rng.uniform(0.01, 1.0);
    const auto up = upscaled_saliency(m, H, W);
    if (std::set<double>(up.values.begin(), up.values.end()).size() != up.size()) {
      ++redrawn;
      continue;
    }
    const ClusterMap cm{"L/c0", "L", m, 1.0, {0}};
    const auto s = masked_series(RgbImage(H, W, {0.3, 0.5, 0.7}), cm);
    for (std::size_t i = 0; i < s.levels.size(); ++i) {
      const double dev = std::abs(s.levels[i].visible_fraction - (100.0 - kDefaultLadder[i]) / 100.0);
      worst = std::max(worst, dev);
      require(dev <= 0.02, "visible fraction off by " + fmt("%.4f", dev));
      if (i == 0) continue;
      for (std::size_t p = 0; p < s.levels[i].binary.size(); ++p) {
        require(!s.levels[i - 1].binary[p] || s.levels[i].binary[p], "levels not nested");
      }
    }
    ++maps;
  }
  return "50 maps x 6 levels nested, max fraction deviation " + fmt("%.4f", worst) + ", " + std::to_string(redrawn) + " maps redrawn";
}

// ---- merge conservation ---------------------------------------------------------

std::string check_merge() {
  Rng rng(505);
  double worst_w = 0.0, worst_map = 0.0;
  std::size_t merges = 0;
  for (int layer = 0; layer < 50; ++layer) {
    const std::size_t n = 2 + rng.below(7);
    std::vector<LabeledMap> maps;
    std::vector<ClusterMap> raw;
    for (std::size_t i = 0; i < n; ++i) {
      LabeledMap m;
      m.map = ClusterMap{"L/c" + std::to_string(i), "L", Map2D(5, 5), rng.uniform(0.01, 0.3), {i}};
      for (double& v : m.map.map.values) v = rng.normal();
      if (rng.uniform() < 0.9) {
        for (std::size_t k = 0; k < 1 + rng.below(3); ++k) {
          LabelGroup g;
          g.representative = std::string(1, static_cast<char>('a' + rng.below(4)));
          g.score = rng.uniform(0.1, 3.0);
          m.groups.push_back(g);
        }
        std::stable_sort(m.groups.begin(), m.groups.end(), [](const LabelGroup& a, const LabelGroup& b) { return a.score > b.score; });
      }
      maps.push_back(m);
      raw.push_back(m.map);
    }
    const auto merged = merge_same_top_label(maps);
    merges += maps.size() - merged.size();
    std::vector<ClusterMap> out;
    double w0 = 0.0, w1 = 0.0;
    for (const auto& m : maps) w0 += m.map.weight;
    for (const auto& m : merged) {
      w1 += m.map.weight;
      out.push_back(m.map);
    }
    worst_w = std::max(worst_w, std::abs(w0 - w1));
    const auto a = compose_gradcam(raw, false), b = compose_gradcam(out, false);
    for (std::size_t p = 0; p < a.map.size(); ++p) worst_map = std::max(worst_map, std::abs(a.map.values[p] - b.map.values[p]));
  }
  require(worst_w <= 1e-9, "weight drift " + fmt("%.3g", worst_w));
  require(worst_map <= 1e-9, "reconstruction drift " + fmt("%.3g", worst_map));
  require(merges > 0, "no merges exercised");
  return "50 layers, " + std::to_string(merges) + " merges, weight drift " + fmt("%.2g", worst_w) + ", map drift " + fmt("%.2g", worst_map);
}

// ---- global aggregation ---------------------------------------------------------

std::string check_global() {
  auto inv_with = [](std::string image, std::vector<std::tuple<std::string, double, std::string, double>> entries) {
    INVExplanation x{std::move(image), "church", {{"conv5", {}}}, {}};
    for (auto& [ref, w, label, s] : entries) x.layers[0].entries.push_back({ref, w, {{label, s}}});
    return x;
  };
  const auto g = aggregate_global({inv_with("a", {{"a/conv5/c0", 0.5, "steeple", 1.0}, {"a/conv5/c1", 0.2, "door", 0.5}}),
                                   inv_with("b", {{"b/conv5/c0", 0.3, "steeple", 2.0}})},
                                  "conv5");
  require(!g.entries.empty() && g.entries[0].label == "steeple", "steeple is not the top entry");
  require(std::abs(g.entries[0].weight - 0.4) <= 1e-12, "weight " + fmt("%.17g", g.entries[0].weight));
  require(g.entries[0].support == 2, "support " + std::to_string(g.entries[0].support));
  return "steeple weight 0.4, support 2";
}

// ---- service conformance --------------------------------------------------------

GamePool synthetic_pool() {
  Rng rng(606);
  GamePool pool;
  pool.classes = {"church", "castle", "tower", "bridge", "lighthouse", "barn"};
  for (std::size_t i = 0; i < 8; ++i) {
    PoolItem it;
    it.map_ref = "img" + std::to_string(i) + "/conv5/c0";
    it.true_class = pool.classes[i % pool.classes.size()];
    it.screening = i >= 5;
    it.image = RgbImage(32, 32, {rng.uniform(), rng.uniform(), rng.uniform()});
    Map2D m(4, 4);
    for (double& v : m.values) v = rng.uniform(0.01, 1.0);
    it.map = ClusterMap{"conv5/c0", "conv5", m, 0.5, {0}};
    pool.items.push_back(std::move(it));
  }
  return pool;
}

std::string check_service() {
  const auto dir = t::temp_dir("acceptance_service");
  const ServiceConfig cfg;
  CrowdService svc(synthetic_pool(), cfg, dir, [] { return std::int64_t{1700000000000}; });
  const std::string tok = svc.create_session("ada").at("token");
  auto truth = [&](const std::string& game) { return svc.state().games.at(game).true_class; };
  for (int s = 0; s < 2; ++s) {
    const auto g = svc.next_game(tok);
    require(svc.state().games.at(g.at("game")).screening, "game " + std::to_string(s + 1) + " is not a screening game");
    svc.submit_guess(tok, g.at("game"), truth(g.at("game")));
  }
  const std::vector<int> hints{0, 3, 5};
  const std::vector<int> expected{100, 55, 0};
  const std::vector<std::vector<std::string>> labels{{"tall spire", "cross"}, {"arched door"}, {"stone wall", "windows"}};
  std::set<std::string> played;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto g = svc.next_game(tok);
    const std::string id = g.at("game");
    require(!svc.state().games.at(id).screening, "regular game " + id + " served as screening");
    for (int h = 0; h < hints[k]; ++h) svc.request_hint(tok, id);
    std::string guess = truth(id);
    if (k == 2) {
      for (const auto& o : g.at("options")) {
        if (o != guess) {
          guess = o;
          break;
        }
      }
    }
    const int points = svc.submit_guess(tok, id, guess).at("points");
    require(points == expected[k], "game " + id + " scored " + std::to_string(points));
    svc.submit_labels(tok, id, labels[k]);
    played.insert(svc.state().games.at(id).map_ref);
  }
  const auto profile = svc.profile(tok);
  require(profile.at("trusted") == true, "player not trusted");
  const std::string other = svc.create_session("bob").at("token");
  const auto g = svc.next_game(other);
  for (int h = 0; h < 2; ++h) svc.request_hint(other, g.at("game"));
  svc.submit_guess(other, g.at("game"), truth(g.at("game")));
  const auto lb = svc.leaderboard(10);
  require(lb.size() == 2 && lb[0].at("nickname") == "ada" && lb[1].at("nickname") == "bob", "leaderboard order " + lb.dump());
  require(lb[0].at("score") == profile.at("score"), "leaderboard score differs from profile");
  std::istringstream exported(svc.export_labels());
  const auto records = parse_label_export(exported);
  const auto analysis = analyze_labels(records, TrigramEmbedder(), svc.pool().classes);
  for (const auto& ref : played) {
    auto it = analysis.find(ref);
    require(it != analysis.end() && !it->second.empty(), "no scored group for " + ref);
  }
  const auto replayed = replay_events(read_event_log(dir / "events.jsonl"), cfg);
  require(state_to_json(replayed).dump() == svc.state_json().dump(), "replayed state differs");
  return "scores 100/55/0, trusted, leaderboard ada > bob, " + std::to_string(analysis.size()) + " maps scored from export, replay bit-exact";
}

// ---- end-to-end desk run ------------------------------------------------------------

struct DeskRun {
  std::vector<LayerSummary> layers;
  std::vector<ReportRow> report;
};

std::string check_desk_run(DeskRun& desk) {
  const auto dir = t::temp_dir("acceptance_desk");
  // The screening image is the operator-curated easy item: the disc fixture
  // under its own key, so every explained image keeps all its maps in play.
  fs::copy_file(kFixtures / "images" / "disc.ppm", dir / "screen-disc.ppm");
  RunConfig cfg;
  cfg.model = (kFixtures / "tinynet-3class").string();
  for (const auto& c : fixtures::kClassNames) cfg.images.push_back((kFixtures / "images" / (c + ".ppm")).string());
  cfg.images.push_back((dir / "screen-disc.ppm").string());
  cfg.out = (dir / "out").string();
  const Paths paths{cfg.out};

  run_extract(cfg);
  const auto clustered = run_cluster(cfg);
  require(clustered.skipped.empty(), "a layer had no positive evidence");
  for (const auto& r : clustered.layers) {
    require(r.kept >= 1 && r.kept <= 8, r.image + "/" + r.layer + " kept " + std::to_string(r.kept) + " clusters");
    require(r.identity_error < 1e-9, r.image + "/" + r.layer + " recomposition off by " + fmt("%.3g", r.identity_error));
  }
  desk.layers = clustered.layers;
  run_masks(cfg, {{"screen-disc"}});

  // Scripted crowd through the service: every player plays until the pool
  // runs out, guessing right with a varying number of hints.
  const std::map<std::string, std::vector<std::string>> words{
      {"disc", {"round blob", "circle", "round shape"}}, {"bars", {"stripes", "horizontal stripes", "lines"}},
      {"checker", {"grid", "squares", "checker grid"}}};
  {
    CrowdService svc(stage_pool(paths), service_config(cfg), paths.service());
    for (std::size_t p = 0; p < 3; ++p) {
      const std::string tok = svc.create_session("player" + std::to_string(p)).at("token");
      for (std::size_t k = 0;; ++k) {
        json g;
        try {
          g = svc.next_game(tok);
        } catch (const StateError&) {
          break;
        }
        const std::string id = g.at("game");
        const auto& state = svc.state().games.at(id);
        for (std::size_t h = 0; h < (state.screening ? 0 : (p + k) % 3); ++h) svc.request_hint(tok, id);
        svc.submit_guess(tok, id, state.true_class);
        if (!state.screening) svc.submit_labels(tok, id, {words.at(state.true_class)[p]});
      }
      require(svc.profile(tok).at("trusted") == true, "scripted player " + std::to_string(p) + " not trusted");
    }
  }
  run_analyze_labels(cfg);
  const auto assembled = run_assemble(cfg);
  run_global(cfg);
  run_render(cfg);
  desk.report = run_report(cfg).rows;

  require(assembled.written.size() == 3, std::to_string(assembled.written.size()) + " explanations written");
  require(assembled.screening_only == std::vector<std::string>{"screen-disc"}, "screening image was explained");
  std::set<std::string> unplayable(assembled.unplayable.begin(), assembled.unplayable.end());
  for (const auto& cls : fixtures::kClassNames) {
    require(fs::exists(paths.render() / (cls + ".png")), "no composite for " + cls);
    const auto x = import_explanation(paths.inv() / (cls + ".json"), paths.inv_maps());
    const auto& inv = std::get<INVExplanation>(x);
    require(inv.predicted == cls, cls + " explained as " + inv.predicted);
    require(inv.layers.size() == fixtures::kTinynetLayers.size(), cls + " has " + std::to_string(inv.layers.size()) + " layers");
    for (const auto& l : inv.layers) {
      double total = 0.0;
      for (const auto& e : l.entries) {
        total += e.weight;
        require(!e.labels.empty(), e.map_ref + " has no labels");
      }
      // Merging conserves the weight of the labeled maps.
      const auto stored = load_layer(paths.clusters(), cls, l.layer);
      double expected = 0.0;
      for (const auto& c : stored.kept_clusters()) {
        if (!unplayable.count(map_ref(cls, c.id))) expected += c.weight;
      }
      require(std::abs(total - expected) < 1e-9, cls + "/" + l.layer + " weight " + fmt("%.12f", total) + " vs " + fmt("%.12f", expected));
      require(total <= 1.0 + 1e-9, cls + "/" + l.layer + " weights exceed 1");
    }
  }
  return "3 INV JSON + 3 composites, " + std::to_string(clustered.layers.size()) + " layers clustered, " +
         std::to_string(unplayable.size()) + " empty-saliency maps left out of play";
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double budget_s;  // 0 = no runtime bound
    std::function<std::string()> run;
  };
  DeskRun desk;
  const std::vector<Criterion> criteria{
      {"gradcam-recomposition-identity", 10, check_identity},
      {"gradient-finite-differences", 60, check_gradients},
      {"ward-oracle", 0, check_ward},
      {"silhouette-k-selection", 0, check_blobs},
      {"cluster-weight-threshold", 0, check_threshold},
      {"label-scoring", 0, check_scoring},
      {"mask-ladder-properties", 0, check_masks},
      {"merge-conservation", 0, check_merge},
      {"global-aggregation", 0, check_global},
      {"service-conformance", 0, check_service},
      {"end-to-end-desk-run", 120, [&] { return check_desk_run(desk); }},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = c.run();
    } catch (const CheckFailed& e) {
      ok = false;
      detail = e.why;
    } catch (const std::exception& e) {
      ok = false;
      detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (ok && c.budget_s > 0 && secs >= c.budget_s) {
      ok = false;
      detail += "; over the " + fmt("%.0f", c.budget_s) + " s budget";
    }
    failures += ok ? 0 : 1;
    std::printf("%s %s (%.2f s): %s\n", ok ? "PASS" : "FAIL", c.name, secs, detail.c_str());
  }
  if (!desk.report.empty()) {
    std::printf("\nretained weight after the feature-map threshold, against the 70-90%% band (informational):\n");
    for (const auto& r : desk.report) {
      std::printf("  %-6s mean %.1f%% over %zu images\n", r.layer.c_str(), r.retained, r.images);
    }
    for (const auto& l : desk.layers) {
      const double pct = 100 * l.retained_fraction;
      std::printf("  %s/%s %.1f%% %s\n", l.image.c_str(), l.layer.c_str(), pct, pct < 70 ? "below" : pct > 90 ? "above" : "inside");
    }
  }
  return failures == 0 ? 0 : 1;
}
