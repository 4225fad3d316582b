#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "inv/saliency.hpp"
#include "support.hpp"

using namespace inv;
namespace t = inv::testing;

namespace {

FeatureMapSet random_features(Rng& rng, std::size_t c, std::size_t h, std::size_t w, double positive_fraction = 0.8) {
  FeatureMapSet f{"L", t::uniform_tensor(rng, {c, h, w}), std::vector<double>(c)};
  for (auto& wk : f.weights) wk = rng.uniform() < positive_fraction ? rng.uniform(0.01, 1.0) : -rng.uniform();
  if (std::none_of(f.weights.begin(), f.weights.end(), [](double x) { return x > 0; })) f.weights[0] = 0.5;
  return f;
}

RetainedSet retained_all(const FeatureMapSet& f) { return normalize_and_threshold(f, 0.0); }

ClusterAssignment random_assignment(Rng& rng, std::size_t n) {
  const std::size_t k = 1 + rng.below(n);
  ClusterAssignment a;
  a.count = k;
  a.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) a.labels[i] = i < k ? i : rng.below(k);
  rng.shuffle(a.labels);
  return a;
}

}  // namespace

// ---- gradcam_weights --------------------------------------------------------

TEST(GradcamWeights, MeanOfOnesIsOne) {
  const auto f = gradcam_weights("L", Tensor({1, 4, 4}, 0.3), Tensor({1, 4, 4}, 1.0));
  EXPECT_EQ(f.weights, std::vector<double>{1.0});
}

TEST(GradcamWeights, SymmetricGradientIsZero) {
  const auto f = gradcam_weights("L", Tensor({1, 2, 2}), Tensor({1, 2, 2}, {1, -1, -1, 1}));
  EXPECT_EQ(f.weights, std::vector<double>{0.0});
}

TEST(GradcamWeights, MatchesColumnOrderResummation) {
  Rng rng(3);
  const Tensor g = t::random_tensor(rng, {3, 5, 5});
  const auto f = gradcam_weights("L", Tensor({3, 5, 5}), g);
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0.0;
    for (std::size_t col = 0; col < 5; ++col) {
      for (std::size_t row = 0; row < 5; ++row) s += g.at(k, row, col);
    }
    EXPECT_NEAR(f.weights[k], s / 25.0, 1e-14);
  }
}

TEST(GradcamWeights, ShapeMismatchRejected) {
  EXPECT_THROW(gradcam_weights("L", Tensor({2, 2, 2}), Tensor({2, 2, 3})), ValidationError);
}

// ---- normalize_and_threshold --------------------------------------------------

TEST(NormalizeAndThreshold, HandEvaluatedRule) {
  FeatureMapSet f{"L", Tensor({4, 1, 2}, {0, 1, 0, 1, 0, 1, 0, 1}), {2, -1, 1, 1}};
  const auto r = normalize_and_threshold(f, 0.3);
  EXPECT_EQ(r.normalized, (std::vector<double>{0.5, 0.0, 0.25, 0.25}));
  EXPECT_EQ(r.indices, std::vector<std::size_t>{0});
  EXPECT_DOUBLE_EQ(r.retained_fraction, 0.5);
  EXPECT_EQ(r.positive_count, 3u);
}

TEST(NormalizeAndThreshold, SingleChannel) {
  FeatureMapSet f{"L", Tensor({1, 2, 2}, 1.0), {1.0}};
  const auto r = normalize_and_threshold(f, 0.0);
  EXPECT_EQ(r.indices, std::vector<std::size_t>{0});
  EXPECT_EQ(r.weights, std::vector<double>{1.0});
  EXPECT_EQ(r.retained_fraction, 1.0);
  // Constant map min-max scales to all zeros.
  EXPECT_EQ(r.scaled_maps[0], std::vector<double>(4, 0.0));
}

TEST(NormalizeAndThreshold, NoPositiveEvidence) {
  FeatureMapSet f{"L", Tensor({2, 1, 1}), {0.0, -1.0}};
  try {
    normalize_and_threshold(f, 0.0);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("no positive evidence"), std::string::npos);
  }
}

TEST(NormalizeAndThreshold, TauOutOfRange) {
  FeatureMapSet f{"L", Tensor({1, 1, 1}), {1.0}};
  EXPECT_THROW(normalize_and_threshold(f, 1.0), ValidationError);
  EXPECT_THROW(normalize_and_threshold(f, -0.1), ValidationError);
}

TEST(NormalizeAndThreshold, DefaultTauMatchesPublishedLayerThresholds) {
  // 256-channel layers use < 0.35 %, 512-channel layers < 0.175 %.
  EXPECT_NEAR(100.0 * default_tau(256), 0.35, 0.005);
  EXPECT_NEAR(100.0 * default_tau(512), 0.175, 0.001);
  EXPECT_DOUBLE_EQ(default_tau(256), 2.0 * default_tau(512));
}

TEST(NormalizeAndThreshold, PositiveWeightsSumToOneAndThresholdsAreMonotone) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto f = random_features(rng, 5 + rng.below(60), 3, 3);
    const auto r0 = normalize_and_threshold(f, 0.0);
    EXPECT_NEAR(std::accumulate(r0.normalized.begin(), r0.normalized.end(), 0.0), 1.0, 1e-9);
    // The default threshold 0.9/C never empties a layer: the largest
    // normalized weight is at least 1/C.
    EXPECT_NO_THROW(normalize_and_threshold(f, default_tau(f.channels())));
    const double t1 = rng.uniform(0.0, 0.9 / static_cast<double>(f.channels())), t2 = t1 + rng.uniform(0.0, 0.05);
    const auto r1 = normalize_and_threshold(f, t1);
    RetainedSet r2;
    try {
      r2 = normalize_and_threshold(f, t2);
    } catch (const ValidationError&) {
      continue;  // t2 removed everything, trivially a subset
    }
    const std::set<std::size_t> s1(r1.indices.begin(), r1.indices.end());
    for (auto i : r2.indices) EXPECT_TRUE(s1.count(i));
    for (double w : r2.weights) EXPECT_GT(w, t2);
    EXPECT_GT(r1.retained_fraction, 0.0);
    EXPECT_LE(r1.retained_fraction, 1.0 + 1e-12);
  }
}

// ---- reduce_dims -------------------------------------------------------------

TEST(ReduceDims, SingleMapIsOrigin) {
  FeatureMapSet f{"L", Tensor({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}), {1.0}};
  const auto e = reduce_dims(retained_all(f), 1);
  ASSERT_EQ(e.points.size(), 1u);
  EXPECT_EQ(e.points[0], (Point2{0.0, 0.0}));
}

TEST(ReduceDims, IdenticalMapsCollapseUnderPca) {
  Rng rng(4);
  std::vector<std::vector<double>> rows(6, std::vector<double>(16));
  for (double& v : rows[0]) v = rng.uniform();
  for (auto& r : rows) r = rows[0];
  for (const auto& s : pca_scores(rows, 5)) {
    for (double v : s) EXPECT_NEAR(v, 0.0, 1e-12);
  }
  // Fewer than 8 maps keep the PCA coordinates, so all points coincide.
  FeatureMapSet f{"L", Tensor({6, 4, 4}), std::vector<double>(6, 1.0)};
  for (std::size_t k = 0; k < 6; ++k) std::copy(rows[0].begin(), rows[0].end(), f.maps.channel(k).begin());
  const auto e = reduce_dims(retained_all(f), 2);
  for (const auto& p : e.points) {
    EXPECT_NEAR(std::hypot(p[0] - e.points[0][0], p[1] - e.points[0][1]), 0.0, 1e-12);
  }
}

TEST(ReduceDims, SeparatesTemplatesUnderNearestNeighborPurity) {
  Rng rng(21);
  const std::size_t side = 8, n = 20;
  std::vector<std::vector<double>> templates(3, std::vector<double>(side * side));
  for (auto& tpl : templates) {
    for (double& v : tpl) v = rng.uniform();
  }
  FeatureMapSet f{"L", Tensor({n, side, side}), std::vector<double>(n, 1.0)};
  std::vector<std::size_t> truth(n);
  for (std::size_t k = 0; k < n; ++k) {
    truth[k] = k % 3;
    auto ch = f.maps.channel(k);
    for (std::size_t p = 0; p < ch.size(); ++p) ch[p] = templates[truth[k]][p] + rng.normal(0.0, 0.05);
  }
  const auto e = reduce_dims(retained_all(f), 7);
  EXPECT_TRUE(e.report.tsne_applied);
  EXPECT_EQ(e.report.pca_dims, 19u);
  EXPECT_EQ(e.report.perplexity, 6.0);
  std::size_t pure = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t nn = i;
    double best = INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = std::hypot(e.points[i][0] - e.points[j][0], e.points[i][1] - e.points[j][1]);
      if (j != i && d < best) {
        best = d;
        nn = j;
      }
    }
    pure += truth[nn] == truth[i];
  }
  EXPECT_GE(static_cast<double>(pure) / n, 0.9);
  for (const auto& p : e.points) EXPECT_TRUE(std::isfinite(p[0]) && std::isfinite(p[1]));
}

TEST(ReduceDims, DeterministicGivenSeed) {
  Rng rng(8);
  const auto f = random_features(rng, 12, 4, 4, 1.0);
  const auto a = reduce_dims(retained_all(f), 99), b = reduce_dims(retained_all(f), 99);
  EXPECT_EQ(a.points, b.points);
}

// ---- cluster_layer / hierarchical clustering --------------------------------

TEST(ClusterLayer, TwoPointsAreSingletonsWithoutSilhouette) {
  EmbeddingPoints e{{{0.0, 0.0}, {1.0, 1.0}}, {}};
  const auto a = cluster_layer(e);
  EXPECT_EQ(a.count, 2u);
  EXPECT_EQ(a.labels, (std::vector<std::size_t>{0, 1}));
  EXPECT_FALSE(a.silhouette.has_value());
}

TEST(ClusterLayer, ThreeSeparatedBlobsGiveThreeClusters) {
  Rng rng(31);
  const auto blobs = t::three_blobs(rng, 5);
  EmbeddingPoints e;
  for (const auto& p : blobs) e.points.push_back({p[0], p[1]});
  const auto a = cluster_layer(e, 3, 8);
  EXPECT_EQ(a.count, 3u);
  ASSERT_TRUE(a.silhouette);
  EXPECT_GT(*a.silhouette, 0.8);
  EXPECT_NEAR(*a.silhouette, t::silhouette_oracle(blobs, a.labels), 1e-12);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 1; i < 5; ++i) EXPECT_EQ(a.labels[5 * b + i], a.labels[5 * b]);
  }
}

TEST(ClusterLayer, SelectedKAttainsMaximumSilhouette) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    EmbeddingPoints e;
    const std::size_t n = 4 + rng.below(20);
    for (std::size_t i = 0; i < n; ++i) e.points.push_back({rng.normal(), rng.normal()});
    const auto a = cluster_layer(e);
    ASSERT_TRUE(a.silhouette);
    double best = -2.0;
    std::size_t best_k = 0;
    for (const auto& [k, s] : a.candidates) {
      EXPECT_GE(s, -1.0);
      EXPECT_LE(s, 1.0);
      if (s > best) {
        best = s;
        best_k = k;
      }
    }
    EXPECT_EQ(a.count, best_k);
    EXPECT_EQ(*a.silhouette, best);
    std::set<std::size_t> used(a.labels.begin(), a.labels.end());
    EXPECT_EQ(used.size(), a.count);
    EXPECT_EQ(*used.rbegin(), a.count - 1);
  }
}

TEST(ClusterLayer, RangeClippedForSmallN) {
  EmbeddingPoints e{{{0, 0}, {0, 1}, {5, 5}, {5, 6}}, {}};
  const auto a = cluster_layer(e, 3, 8);
  // n = 4 -> k range [3, 3]
  EXPECT_EQ(a.count, 3u);
  ASSERT_EQ(a.candidates.size(), 1u);
}

TEST(Ward, MatchesBruteForceGreedyOracle) {
  Rng rng(55);
  int checked = 0;
  while (checked < 30) {
    std::vector<std::array<double, 2>> pts(8);
    for (auto& p : pts) p = {rng.uniform(0, 10), rng.uniform(0, 10)};
    const auto oracle = t::brute_force_ward(pts);
    if (oracle.min_gap < 1e-9) continue;
    const auto tree = agglomerate(euclidean_distances(pts), Linkage::kWard);
    const auto sets = t::dendrogram_member_sets(tree, pts.size());
    ASSERT_EQ(sets.size(), oracle.merges.size());
    for (std::size_t s = 0; s < sets.size(); ++s) {
      const bool same = (sets[s] == oracle.merges[s]) ||
                        (sets[s].first == oracle.merges[s].second && sets[s].second == oracle.merges[s].first);
      EXPECT_TRUE(same) << "step " << s;
    }
    ++checked;
  }
}

TEST(Ward, MergeCostIsVarianceIncrease) {
  std::vector<std::array<double, 2>> pts{{0, 0}, {2, 0}, {10, 0}};
  const auto tree = agglomerate(euclidean_distances(pts), Linkage::kWard);
  ASSERT_EQ(tree.size(), 2u);
  EXPECT_DOUBLE_EQ(tree[0].cost, 2.0);  // SSE of {0,2}
  // centroid 1 (n=2) with 10 (n=1): 2*1/3 * 81 = 54
  EXPECT_DOUBLE_EQ(tree[1].cost, 54.0);
}

TEST(Silhouette, UndefinedForOneOrAllClusters) {
  DistanceMatrix d(3);
  const std::vector<std::size_t> one{0, 0, 0}, all{0, 1, 2};
  EXPECT_FALSE(silhouette_score(d, one));
  EXPECT_FALSE(silhouette_score(d, all));
}

// ---- merge / threshold / compose ----------------------------------------------

TEST(MergeClusters, ConstantMapsHandArithmetic) {
  FeatureMapSet f{"L", Tensor({2, 2, 2}, {1, 1, 1, 1, 0, 0, 0, 0}), {0.2, 0.6}};
  RetainedSet r = retained_all(f);
  // Use unnormalized weights 0.2 / 0.6 directly.
  r.weights = {0.2, 0.6};
  ClusterAssignment a{{0, 0}, 1, std::nullopt, {}};
  const auto maps = merge_clusters(r, a, f);
  ASSERT_EQ(maps.size(), 1u);
  for (double v : maps[0].map.values) EXPECT_NEAR(v, 0.25, 1e-15);
  EXPECT_NEAR(maps[0].weight, 0.8, 1e-15);
  EXPECT_EQ(maps[0].id, "L/c0");
}

TEST(MergeClusters, SingleMemberIsExact) {
  Rng rng(2);
  const auto f = random_features(rng, 3, 4, 4, 1.0);
  const auto r = retained_all(f);
  ClusterAssignment a{{0, 1, 2}, 3, std::nullopt, {}};
  for (const auto& c : merge_clusters(r, a, f)) {
    ASSERT_EQ(c.members.size(), 1u);
    const auto src = f.maps.channel(c.members[0]);
    EXPECT_TRUE(std::equal(src.begin(), src.end(), c.map.values.begin()));
    EXPECT_EQ(c.weight, r.normalized[c.members[0]]);
  }
}

TEST(MergeClusters, SortedByWeightWithInvariants) {
  Rng rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const auto f = random_features(rng, 6, 3, 3);
    const auto r = retained_all(f);
    const auto a = random_assignment(rng, r.size());
    const auto maps = merge_clusters(r, a, f);
    double total = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      if (i > 0) {
        EXPECT_GE(maps[i - 1].weight, maps[i].weight);
      }
      double w = 0.0;
      Map2D avg(3, 3);
      for (auto m : maps[i].members) {
        w += r.normalized[m];
        for (std::size_t p = 0; p < 9; ++p) avg.values[p] += r.normalized[m] * f.maps.channel(m)[p];
      }
      EXPECT_NEAR(maps[i].weight, w, 1e-9);
      for (std::size_t p = 0; p < 9; ++p) EXPECT_NEAR(maps[i].map.values[p], avg.values[p] / w, 1e-9);
      total += maps[i].weight;
    }
    EXPECT_NEAR(total, r.retained_fraction, 1e-9);
  }
}

TEST(ComposeGradcam, ReconstructsDirectSumForAnyPartition) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto f = random_features(rng, 6, 5, 5);
    const auto r = normalize_and_threshold(f, rng.uniform(0.0, 0.1));
    const auto maps = merge_clusters(r, random_assignment(rng, r.size()), f);
    const auto composed = compose_gradcam(maps, false);
    // Oracle: direct summation over retained channels, written independently.
    for (std::size_t p = 0; p < 25; ++p) {
      double direct = 0.0;
      for (std::size_t i = 0; i < r.indices.size(); ++i) direct += r.normalized[r.indices[i]] * f.maps.channel(r.indices[i])[p];
      EXPECT_NEAR(composed.map.values[p], direct, 1e-9);
    }
  }
}

TEST(ComposeGradcam, EmptyWithReluIsZeroMap) {
  const auto s = compose_gradcam(std::vector<ClusterMap>{}, true, 3, 4);
  EXPECT_EQ(s.map.values, std::vector<double>(12, 0.0));
}

TEST(ComposeGradcam, SingleClusterIsScaledMap) {
  ClusterMap c{"L/c0", "L", Map2D(1, 3, {1.0, -2.0, 3.0}), 0.5, {0}};
  EXPECT_EQ(compose_gradcam(std::vector{c}, false).map.values, (std::vector<double>{0.5, -1.0, 1.5}));
  EXPECT_EQ(compose_gradcam(std::vector{c}, true).map.values, (std::vector<double>{0.5, 0.0, 1.5}));
}

TEST(ComposeGradcam, MixedLayersRejected) {
  ClusterMap a{"A/c0", "A", Map2D(1, 1, {1.0}), 0.5, {0}};
  ClusterMap b{"B/c0", "B", Map2D(1, 1, {1.0}), 0.5, {0}};
  EXPECT_THROW(compose_gradcam(std::vector{a, b}, false), ValidationError);
}

TEST(ThresholdClusterMaps, HandCases) {
  auto with_weights = [](std::vector<double> w) {
    std::vector<ClusterMap> v;
    for (double x : w) {
      v.push_back({"", "L", Map2D(1, 1), x, {0}});
    }
    return v;
  };
  auto weights_of = [](const std::vector<ClusterMap>& v) {
    std::vector<double> w;
    for (const auto& c : v) w.push_back(c.weight);
    return w;
  };
  EXPECT_DOUBLE_EQ(cluster_threshold(std::vector<double>{0.6, 0.2, 0.1, 0.1}), 0.2);
  EXPECT_EQ(weights_of(threshold_cluster_maps(with_weights({0.6, 0.2, 0.1, 0.1}))), (std::vector<double>{0.6, 0.2}));
  EXPECT_DOUBLE_EQ(cluster_threshold(std::vector<double>{0.25, 0.25, 0.25, 0.25}), 0.125);
  EXPECT_EQ(threshold_cluster_maps(with_weights({0.25, 0.25, 0.25, 0.25})).size(), 4u);
  EXPECT_DOUBLE_EQ(cluster_threshold(std::vector<double>{1.0}), 0.5);
  EXPECT_EQ(weights_of(threshold_cluster_maps(with_weights({1.0}))), std::vector<double>{1.0});
  EXPECT_THROW(threshold_cluster_maps({}), ValidationError);
}

TEST(ClusterFeatureMaps, PermutingChannelsKeepsPartitionsAndMaps) {
  Rng rng(41);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t C = 14;
    const auto f = random_features(rng, C, 6, 6, 1.0);
    std::vector<std::size_t> perm(C);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    FeatureMapSet g{"L", Tensor({C, 6, 6}), std::vector<double>(C)};
    for (std::size_t k = 0; k < C; ++k) {
      const auto src = f.maps.channel(perm[k]);
      std::copy(src.begin(), src.end(), g.maps.channel(k).begin());
      g.weights[k] = f.weights[perm[k]];
    }
    LayerClusteringOptions opt;
    opt.tau = 0.0;
    opt.seed = 7;
    const auto a = cluster_feature_maps(f, opt);
    const auto b = cluster_feature_maps(g, opt);
    // Compare partitions in terms of original channel ids.
    std::set<t::MemberSet> pa, pb;
    std::map<t::MemberSet, const ClusterMap*> by_members;
    for (const auto& c : a.clusters) {
      t::MemberSet s(c.members.begin(), c.members.end());
      pa.insert(s);
      by_members[s] = &c;
    }
    for (const auto& c : b.clusters) {
      t::MemberSet s;
      for (auto m : c.members) s.insert(perm[m]);
      pb.insert(s);
      const ClusterMap* twin = by_members.count(s) ? by_members[s] : nullptr;
      ASSERT_NE(twin, nullptr);
      EXPECT_NEAR(twin->weight, c.weight, 1e-12);
      for (std::size_t p = 0; p < c.map.size(); ++p) EXPECT_NEAR(twin->map.values[p], c.map.values[p], 1e-12);
    }
    EXPECT_EQ(pa, pb);
  }
}
