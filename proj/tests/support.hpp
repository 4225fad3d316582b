#pragma once

// Shared helpers for the unit and acceptance suites: random model
// generators and oracles that are deliberately independent of the library
// code they check.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "inv/hclust.hpp"
#include "inv/model.hpp"
#include "inv/random.hpp"
#include "inv/tensor.hpp"

namespace inv::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, scale);
  return t;
}

inline Tensor uniform_tensor(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// conv(3x3) -> relu -> maxpool -> [conv(3x3) -> relu] -> flatten -> dense.
inline ModelSpec random_tiny_cnn(Rng& rng, std::size_t convs = 2, std::size_t in_channels = 2, std::size_t side = 8,
                                 std::size_t classes = 3) {
  std::vector<Layer> layers;
  std::size_t c = in_channels, h = side;
  for (std::size_t i = 0; i < convs; ++i) {
    Conv2D conv;
    conv.out_channels = 3 + rng.below(3);
    conv.kernel_h = conv.kernel_w = 3;
    conv.stride = 1;
    conv.padding = 1;
    conv.weights = random_tensor(rng, {conv.out_channels, c, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(c)));
    conv.bias = random_tensor(rng, {conv.out_channels}, 0.1);
    c = conv.out_channels;
    layers.push_back({"conv" + std::to_string(i + 1), std::move(conv), {}});
    layers.push_back({"relu" + std::to_string(i + 1), ReLU{}, {}});
    if (i == 0) {
      layers.push_back({"pool1", MaxPool2D{2, 2}, {}});
      h /= 2;
    }
  }
  layers.push_back({"flatten", Flatten{}, {}});
  Dense fc;
  fc.units = classes;
  fc.weights = random_tensor(rng, {classes, c * h * h}, 1.0 / std::sqrt(static_cast<double>(c * h * h)));
  fc.bias = random_tensor(rng, {classes}, 0.1);
  layers.push_back({"fc", std::move(fc), {}});
  layers.push_back({"prob", Softmax{}, {}});
  std::vector<std::string> names;
  for (std::size_t k = 0; k < classes; ++k) names.push_back("class" + std::to_string(k));
  return ModelSpec({in_channels, side, side}, std::move(layers), std::move(names));
}

// Central finite differences of the seeded logit w.r.t. a layer's output.
inline Tensor finite_difference_gradient(const ModelSpec& model, const Tensor& image, std::size_t layer_index,
                                         std::size_t class_index, double h) {
  std::vector<Tensor> acts;
  Tensor x = image;
  for (std::size_t i = 0; i <= layer_index; ++i) {
    x = detail::layer_forward(model.layers()[i], x);
  }
  Tensor grad(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    Tensor plus = x, minus = x;
    plus[k] += h;
    minus[k] -= h;
    const double fp = forward_logits_from(model, layer_index + 1, plus)[class_index];
    const double fm = forward_logits_from(model, layer_index + 1, minus)[class_index];
    grad[k] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|): error relative to the
// gradient's own scale. Two all-zero tensors compare as 0.
inline double max_relative_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale == 0.0 ? 0.0 : diff / scale;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("inv_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// ---- clustering oracles ---------------------------------------------------

using MemberSet = std::set<std::size_t>;

// Greedy ward by exhaustive search: at each step merge the pair of clusters
// whose union raises the total within-cluster sum of squares the least,
// computed from centroids. Returns the merged member sets in order, plus the
// smallest gap between the best and second-best cost seen at any step.
struct WardOracleResult {
  std::vector<std::pair<MemberSet, MemberSet>> merges;
  double min_gap = 0.0;
};

template <typename Point>
WardOracleResult brute_force_ward(const std::vector<Point>& pts) {
  std::vector<MemberSet> clusters;
  for (std::size_t i = 0; i < pts.size(); ++i) clusters.push_back({i});
  auto centroid = [&](const MemberSet& c) {
    std::vector<double> m(pts[0].size(), 0.0);
    for (auto i : c) {
      for (std::size_t k = 0; k < m.size(); ++k) m[k] += pts[i][k];
    }
    for (double& v : m) v /= static_cast<double>(c.size());
    return m;
  };
  auto sse = [&](const MemberSet& c) {
    const auto m = centroid(c);
    double s = 0.0;
    for (auto i : c) {
      for (std::size_t k = 0; k < m.size(); ++k) s += (pts[i][k] - m[k]) * (pts[i][k] - m[k]);
    }
    return s;
  };
  WardOracleResult out;
  out.min_gap = std::numeric_limits<double>::infinity();
  while (clusters.size() > 1) {
    double best = std::numeric_limits<double>::infinity(), second = best;
    std::size_t ba = 0, bb = 0;
    for (std::size_t a = 0; a < clusters.size(); ++a) {
      for (std::size_t b = a + 1; b < clusters.size(); ++b) {
        MemberSet u = clusters[a];
        u.insert(clusters[b].begin(), clusters[b].end());
        const double inc = sse(u) - sse(clusters[a]) - sse(clusters[b]);
        if (inc < best) {
          second = best;
          best = inc;
          ba = a;
          bb = b;
        } else if (inc < second) {
          second = inc;
        }
      }
    }
    if (clusters.size() > 2) out.min_gap = std::min(out.min_gap, second - best);
    out.merges.emplace_back(clusters[ba], clusters[bb]);
    MemberSet u = clusters[ba];
    u.insert(clusters[bb].begin(), clusters[bb].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bb));
    clusters[ba] = u;
  }
  return out;
}

// Member sets of each merge of a library dendrogram.
inline std::vector<std::pair<MemberSet, MemberSet>> dendrogram_member_sets(const std::vector<inv::Merge>& merges, std::size_t n) {
  std::vector<MemberSet> sets;
  for (std::size_t i = 0; i < n; ++i) sets.push_back({i});
  std::vector<std::pair<MemberSet, MemberSet>> out;
  for (const auto& m : merges) {
    out.emplace_back(sets[m.a], sets[m.b]);
    MemberSet u = sets[m.a];
    u.insert(sets[m.b].begin(), sets[m.b].end());
    sets.push_back(u);
  }
  return out;
}

// Mean silhouette straight from the definition, recomputing every distance.
template <typename Point>
double silhouette_oracle(const std::vector<Point>& pts, const std::vector<std::size_t>& labels) {
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < pts[i].size(); ++k) s += (pts[i][k] - pts[j][k]) * (pts[i][k] - pts[j][k]);
    return std::sqrt(s);
  };
  std::set<std::size_t> ks(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double a = 0.0;
    std::size_t na = 0;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j != i && labels[j] == labels[i]) {
        a += dist(i, j);
        ++na;
      }
    }
    if (na == 0) continue;
    a /= static_cast<double>(na);
    double b = std::numeric_limits<double>::infinity();
    for (auto k : ks) {
      if (k == labels[i]) continue;
      double s = 0.0;
      std::size_t nk = 0;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        if (labels[j] == k) {
          s += dist(i, j);
          ++nk;
        }
      }
      b = std::min(b, s / static_cast<double>(nk));
    }
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(pts.size());
}

// Three isotropic Gaussian blobs of `per_blob` points; centers are 10x the
// spread apart.
inline std::vector<std::array<double, 2>> three_blobs(Rng& rng, std::size_t per_blob, double spread = 1.0) {
  const std::array<std::array<double, 2>, 3> centers{{{0.0, 0.0}, {10.0 * spread, 0.0}, {5.0 * spread, 8.66 * spread}}};
  std::vector<std::array<double, 2>> pts;
  for (const auto& c : centers) {
    for (std::size_t i = 0; i < per_blob; ++i) pts.push_back({c[0] + rng.normal(0.0, spread * 0.5), c[1] + rng.normal(0.0, spread * 0.5)});
  }
  return pts;
}

// Partition as a set of member sets, for order-free comparison.
inline std::set<MemberSet> partition_of(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& ids) {
  std::map<std::size_t, MemberSet> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].insert(ids[i]);
  std::set<MemberSet> out;
  for (auto& [_, g] : groups) out.insert(g);
  return out;
}

}  // namespace inv::testing
