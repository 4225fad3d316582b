#pragma once

// Grad-CAM generalized to clusters of feature maps.
//
// Starting from a layer's activations A^k and the gradients of a class logit,
// channel weights w_k are the spatial means of the gradients. Positive weights
// are unit-normalized, low-weight channels are dropped, the remaining maps are
// embedded in 2-D (PCA then t-SNE) and grouped with ward linkage. Each group
// C_i becomes a cluster map
//
//   A_Ci = sum_{j in C_i} w_j A^j / sum_{j in C_i} w_j,   w_Ci = sum_{j in C_i} w_j
//
// so that sum_i w_Ci A_Ci reproduces the Grad-CAM sum sum_k w_k A^k exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "inv/error.hpp"
#include "inv/hclust.hpp"
#include "inv/reduce.hpp"
#include "inv/tensor.hpp"

namespace inv {

struct FeatureMapSet {
  std::string layer;
  Tensor maps;                  // [C, H, W]
  std::vector<double> weights;  // raw w_k, one per channel

  std::size_t channels() const { return maps.channels(); }
  Map2D map(std::size_t k) const {
    auto ch = maps.channel(k);
    return Map2D(maps.height(), maps.width(), std::vector<double>(ch.begin(), ch.end()));
  }
};

struct RetainedSet {
  std::string layer;
  double threshold = 0.0;               // tau_f
  std::vector<double> normalized;       // per channel; 0 for non-positive channels
  std::vector<std::size_t> indices;     // retained channels, ascending
  std::vector<double> weights;          // normalized weight of each retained channel
  double retained_fraction = 0.0;       // sum of retained normalized weights
  std::size_t positive_count = 0;
  std::vector<std::vector<double>> scaled_maps;  // min-max normalized copies, one per retained channel
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return indices.size(); }
};

struct ReductionReport {
  std::size_t pca_dims = 0;
  std::size_t tsne_iterations = 0;
  double perplexity = 0.0;
  std::uint64_t seed = 0;
  bool tsne_applied = false;
};

struct EmbeddingPoints {
  std::vector<Point2> points;  // one per retained map, in retained order
  ReductionReport report;
};

struct ClusterAssignment {
  std::vector<std::size_t> labels;  // per retained map
  std::size_t count = 0;
  std::optional<double> silhouette;
  std::vector<std::pair<std::size_t, double>> candidates;
};

struct ClusterMap {
  std::string id;
  std::string layer;
  Map2D map;
  double weight = 0.0;
  std::vector<std::size_t> members;  // channel indices
};

enum class SaliencySource { kDirect, kClusterRecomposition };

struct SaliencyMap {
  Map2D map;
  SaliencySource source = SaliencySource::kDirect;
};

inline FeatureMapSet gradcam_weights(std::string layer, const Tensor& activations, const Tensor& gradients) {
  if (activations.shape() != gradients.shape()) {
    throw ValidationError("activation shape " + shape_string(activations.shape()) + " does not match gradient shape " +
                          shape_string(gradients.shape()));
  }
  if (activations.rank() != 3) throw ValidationError("feature maps must be (C,H,W)");
  FeatureMapSet f{std::move(layer), activations, std::vector<double>(activations.channels())};
  const double plane = static_cast<double>(gradients.height() * gradients.width());
  for (std::size_t k = 0; k < gradients.channels(); ++k) {
    const auto g = gradients.channel(k);
    f.weights[k] = std::accumulate(g.begin(), g.end(), 0.0) / plane;
  }
  return f;
}

// Default feature-map threshold: 0.9 / C.
inline double default_tau(std::size_t channels) { return 0.9 / static_cast<double>(channels); }

inline std::vector<double> min_max_scaled(std::span<const double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  std::vector<double> out(v.size(), 0.0);
  if (v.empty() || *hi == *lo) return out;
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
  return out;
}

// Drops non-positive weights, divides the positives by their sum, then drops
// channels whose normalized weight is <= tau. The survivors are not
// renormalized, so retained_fraction reports how much weight is left.
inline RetainedSet normalize_and_threshold(const FeatureMapSet& f, double tau) {
  if (!(tau >= 0.0 && tau < 1.0)) throw ValidationError("feature-map threshold must lie in [0, 1)");
  if (f.weights.size() != f.channels()) throw ValidationError("weight count does not match channel count");
  double positive_sum = 0.0;
  RetainedSet r;
  r.layer = f.layer;
  r.threshold = tau;
  r.height = f.maps.height();
  r.width = f.maps.width();
  for (double w : f.weights) {
    if (w > 0.0) {
      positive_sum += w;
      ++r.positive_count;
    }
  }
  if (r.positive_count == 0) {
    throw ValidationError("no positive evidence: every channel weight of layer '" + f.layer + "' is <= 0");
  }
  r.normalized.assign(f.weights.size(), 0.0);
  for (std::size_t k = 0; k < f.weights.size(); ++k) {
    if (f.weights[k] > 0.0) r.normalized[k] = f.weights[k] / positive_sum;
  }
  for (std::size_t k = 0; k < f.weights.size(); ++k) {
    if (f.weights[k] > 0.0 && r.normalized[k] > tau) {
      r.indices.push_back(k);
      r.weights.push_back(r.normalized[k]);
      r.retained_fraction += r.normalized[k];
      r.scaled_maps.push_back(min_max_scaled(f.maps.channel(k)));
    }
  }
  if (r.indices.empty()) {
    throw ValidationError("threshold " + std::to_string(tau) + " removes every channel of layer '" + f.layer + "'");
  }
  return r;
}

namespace detail {

// Order of rows by lexicographic content. Processing in this order makes the
// reduction independent of the channel order it was given.
template <typename Row>
std::vector<std::size_t> canonical_order(const std::vector<Row>& rows) {
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(rows[a].begin(), rows[a].end(), rows[b].begin(), rows[b].end());
  });
  return order;
}

}  // namespace detail

struct ReduceOptions {
  std::size_t max_pca_dims = 40;
  std::size_t min_points_for_tsne = 8;
  TsneOptions tsne;  // perplexity is derived from n unless overridden below
  std::optional<double> perplexity;
};

inline double default_perplexity(std::size_t n) {
  return std::min(30.0, std::floor(static_cast<double>(n - 1) / 3.0));
}

// PCA to min(40, n-1, H*W) dims, then exact t-SNE to 2-D. Fewer than 8 maps
// skip t-SNE and keep the first two PCA coordinates.
inline EmbeddingPoints reduce_dims(const RetainedSet& r, std::uint64_t seed, const ReduceOptions& opt = {}) {
  const std::size_t n = r.size();
  if (n == 0) throw ValidationError("no retained maps to reduce");
  EmbeddingPoints out;
  out.report.seed = seed;
  out.points.assign(n, Point2{0.0, 0.0});
  if (n == 1) return out;

  const auto order = detail::canonical_order(r.scaled_maps);
  std::vector<std::vector<double>> rows;
  rows.reserve(n);
  for (auto idx : order) rows.push_back(r.scaled_maps[idx]);
  const std::size_t dims = std::min({opt.max_pca_dims, n - 1, r.height * r.width});
  const auto scores = pca_scores(rows, dims);
  out.report.pca_dims = dims;

  std::vector<Point2> canonical(n, Point2{0.0, 0.0});
  if (n < opt.min_points_for_tsne) {
    for (std::size_t i = 0; i < n; ++i) {
      canonical[i][0] = scores[i].size() > 0 ? scores[i][0] : 0.0;
      canonical[i][1] = scores[i].size() > 1 ? scores[i][1] : 0.0;
    }
  } else {
    TsneOptions t = opt.tsne;
    t.seed = seed;
    t.perplexity = opt.perplexity.value_or(default_perplexity(n));
    canonical = tsne(scores, t);
    out.report.tsne_applied = true;
    out.report.tsne_iterations = t.iterations;
    out.report.perplexity = t.perplexity;
  }
  for (std::size_t i = 0; i < n; ++i) out.points[order[i]] = canonical[i];
  return out;
}

// Ward clustering of the embedded points with k chosen by mean silhouette over
// [k_min, k_max] clipped to [2, n-1]. Three or fewer points stay singletons.
inline ClusterAssignment cluster_layer(const EmbeddingPoints& emb, std::size_t k_min = 3, std::size_t k_max = 8) {
  const std::size_t n = emb.points.size();
  ClusterAssignment a;
  if (n == 0) return a;
  if (n <= 3) {
    a.labels.resize(n);
    std::iota(a.labels.begin(), a.labels.end(), std::size_t{0});
    a.count = n;
    return a;
  }
  if (k_min > k_max) throw ValidationError("k_min must not exceed k_max");
  const auto order = detail::canonical_order(emb.points);
  std::vector<Point2> pts;
  for (auto idx : order) pts.push_back(emb.points[idx]);
  const DistanceMatrix dist = euclidean_distances(pts);
  const Dendrogram tree = agglomerate(dist, Linkage::kWard);
  const std::size_t lo = std::clamp<std::size_t>(k_min, 2, n - 1);
  const std::size_t hi = std::clamp<std::size_t>(k_max, 2, n - 1);
  KSelection sel = select_k(tree, dist, lo, hi);
  if (!sel.silhouette) {
    // Every candidate was degenerate; fall back to the lower bound.
    sel.k = lo;
    sel.labels = cut_tree(tree, n, lo);
  }
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[order[i]] = sel.labels[i];
  // Renumber by first appearance in retained order.
  std::vector<std::size_t> remap(sel.k, SIZE_MAX);
  std::size_t next = 0;
  for (auto& l : labels) {
    if (remap[l] == SIZE_MAX) remap[l] = next++;
    l = remap[l];
  }
  a.labels = std::move(labels);
  a.count = sel.k;
  a.silhouette = sel.silhouette;
  a.candidates = std::move(sel.candidates);
  return a;
}

// Weighted average of the ORIGINAL member maps per cluster. Output is sorted
// by weight descending (ties: smallest member channel first); ids are
// "<layer>/c<rank>".
inline std::vector<ClusterMap> merge_clusters(const RetainedSet& r, const ClusterAssignment& a, const FeatureMapSet& f) {
  if (a.labels.size() != r.size()) throw ValidationError("cluster assignment does not cover the retained set");
  std::vector<ClusterMap> out(a.count);
  const std::size_t plane = f.maps.height() * f.maps.width();
  for (auto& c : out) {
    c.layer = r.layer;
    c.map = Map2D(f.maps.height(), f.maps.width());
  }
  for (std::size_t i = 0; i < r.size(); ++i) {
    ClusterMap& c = out.at(a.labels[i]);
    const double w = r.weights[i];
    const auto src = f.maps.channel(r.indices[i]);
    for (std::size_t p = 0; p < plane; ++p) c.map.values[p] += w * src[p];
    c.weight += w;
    c.members.push_back(r.indices[i]);
  }
  for (auto& c : out) {
    if (c.members.empty()) throw ValidationError("empty cluster in assignment");
    if (c.members.size() == 1) {
      const auto src = f.maps.channel(c.members[0]);
      c.map.values.assign(src.begin(), src.end());
    } else {
      for (double& v : c.map.values) v /= c.weight;
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const ClusterMap& x, const ClusterMap& y) {
    if (x.weight != y.weight) return x.weight > y.weight;
    return x.members.front() < y.members.front();
  });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].id = r.layer + "/c" + std::to_string(i);
  return out;
}

// th = max(max(w) / 3, mean(w) / 2); clusters with w >= th survive.
inline double cluster_threshold(std::span<const double> weights) {
  if (weights.empty()) return 0.0;
  const double mx = *std::max_element(weights.begin(), weights.end());
  const double avg = std::accumulate(weights.begin(), weights.end(), 0.0) / static_cast<double>(weights.size());
  return std::max(mx / 3.0, avg / 2.0);
}

inline std::vector<ClusterMap> threshold_cluster_maps(const std::vector<ClusterMap>& maps) {
  if (maps.empty()) throw ValidationError("no cluster maps to threshold");
  std::vector<double> w;
  for (const auto& m : maps) w.push_back(m.weight);
  const double th = cluster_threshold(w);
  const double mx = *std::max_element(w.begin(), w.end());
  std::vector<ClusterMap> kept;
  for (const auto& m : maps) {
    if (m.weight >= th || m.weight == mx) kept.push_back(m);
  }
  return kept;
}

// sum_i w_Ci A_Ci, optionally followed by ReLU.
inline SaliencyMap compose_gradcam(std::span<const ClusterMap> maps, bool relu, std::size_t height = 0, std::size_t width = 0) {
  SaliencyMap s;
  s.source = SaliencySource::kClusterRecomposition;
  if (!maps.empty()) {
    height = maps[0].map.height;
    width = maps[0].map.width;
  }
  s.map = Map2D(height, width);
  for (const auto& m : maps) {
    if (m.layer != maps[0].layer) throw ValidationError("cluster maps from different layers cannot be composed");
    if (m.map.height != height || m.map.width != width) throw ValidationError("cluster map sizes differ");
    for (std::size_t p = 0; p < s.map.size(); ++p) s.map.values[p] += m.weight * m.map.values[p];
  }
  if (relu) {
    for (double& v : s.map.values) v = std::max(v, 0.0);
  }
  return s;
}

// Grad-CAM computed straight from the retained channels: sum_k w_k A^k.
inline SaliencyMap direct_gradcam(const RetainedSet& r, const FeatureMapSet& f, bool relu) {
  SaliencyMap s{Map2D(f.maps.height(), f.maps.width()), SaliencySource::kDirect};
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto src = f.maps.channel(r.indices[i]);
    for (std::size_t p = 0; p < s.map.size(); ++p) s.map.values[p] += r.weights[i] * src[p];
  }
  if (relu) {
    for (double& v : s.map.values) v = std::max(v, 0.0);
  }
  return s;
}

struct LayerClusteringOptions {
  std::optional<double> tau;  // default 0.9 / C
  std::size_t k_min = 3;
  std::size_t k_max = 8;
  std::uint64_t seed = 0;
  ReduceOptions reduce;
};

struct LayerClustering {
  FeatureMapSet features;
  RetainedSet retained;
  EmbeddingPoints embedding;
  ClusterAssignment assignment;
  std::vector<ClusterMap> clusters;  // full set, before the cluster-weight threshold
  std::vector<ClusterMap> kept;      // after it
};

inline LayerClustering cluster_feature_maps(FeatureMapSet f, const LayerClusteringOptions& opt) {
  LayerClustering out;
  out.retained = normalize_and_threshold(f, opt.tau.value_or(default_tau(f.channels())));
  out.embedding = reduce_dims(out.retained, opt.seed, opt.reduce);
  out.assignment = cluster_layer(out.embedding, opt.k_min, opt.k_max);
  out.clusters = merge_clusters(out.retained, out.assignment, f);
  out.kept = threshold_cluster_maps(out.clusters);
  out.features = std::move(f);
  return out;
}

}  // namespace inv
