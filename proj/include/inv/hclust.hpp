#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "inv/error.hpp"

namespace inv {

// Symmetric n x n distance matrix, row-major.
struct DistanceMatrix {
  std::size_t n = 0;
  std::vector<double> d;

  explicit DistanceMatrix(std::size_t size = 0) : n(size), d(size * size, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return d[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return d[i * n + j]; }
};

template <typename Point>
DistanceMatrix euclidean_distances(const std::vector<Point>& pts) {
  DistanceMatrix m(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < pts[i].size(); ++k) {
        const double t = pts[i][k] - pts[j][k];
        s += t * t;
      }
      m(i, j) = m(j, i) = std::sqrt(s);
    }
  }
  return m;
}

enum class Linkage { kWard, kComplete };

// One agglomeration step. Cluster ids follow the usual convention: leaves are
// 0..n-1 and the cluster created by merge i has id n+i.
struct Merge {
  std::size_t a = 0;
  std::size_t b = 0;
  double cost = 0.0;  // ward: increase in within-cluster sum of squares; complete: linkage distance
  std::size_t size = 0;
};

using Dendrogram = std::vector<Merge>;

// Agglomerative clustering with Lance-Williams updates.
//
// Ward runs on squared Euclidean distances, for which the Lance-Williams
// recurrence tracks twice the ward merge cost exactly. Complete linkage runs
// on the given distances. At every step the lowest-cost pair is merged; ties
// go to the pair that comes first in (smaller id, larger id) order.
inline Dendrogram agglomerate(const DistanceMatrix& dist, Linkage linkage) {
  const std::size_t n = dist.n;
  Dendrogram merges;
  if (n < 2) return merges;
  DistanceMatrix d = dist;
  if (linkage == Linkage::kWard) {
    for (double& v : d.d) v = v * v;
  }
  std::vector<std::size_t> id(n), size(n, 1);
  std::vector<bool> active(n, true);
  for (std::size_t i = 0; i < n; ++i) id[i] = i;

  for (std::size_t step = 0; step + 1 < n; ++step) {
    std::size_t bi = 0, bj = 0;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_lo = 0, best_hi = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!active[j]) continue;
        const double v = d(i, j);
        const std::size_t lo = std::min(id[i], id[j]), hi = std::max(id[i], id[j]);
        if (v < best || (v == best && (lo < best_lo || (lo == best_lo && hi < best_hi)))) {
          best = v;
          bi = i;
          bj = j;
          best_lo = lo;
          best_hi = hi;
        }
      }
    }
    const double ni = static_cast<double>(size[bi]), nj = static_cast<double>(size[bj]);
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == bi || k == bj) continue;
      double v;
      if (linkage == Linkage::kWard) {
        const double nk = static_cast<double>(size[k]);
        v = ((ni + nk) * d(bi, k) + (nj + nk) * d(bj, k) - nk * d(bi, bj)) / (ni + nj + nk);
      } else {
        v = std::max(d(bi, k), d(bj, k));
      }
      d(bi, k) = d(k, bi) = v;
    }
    merges.push_back({best_lo, best_hi, linkage == Linkage::kWard ? best / 2.0 : best, size[bi] + size[bj]});
    size[bi] += size[bj];
    id[bi] = n + step;
    active[bj] = false;
  }
  return merges;
}

// Flat labels after applying the first n-k merges. Labels are numbered by
// first appearance in point order.
inline std::vector<std::size_t> cut_tree(const Dendrogram& merges, std::size_t n, std::size_t k) {
  if (n == 0) return {};
  if (k < 1 || k > n) throw ValidationError("cluster count out of range");
  std::vector<std::size_t> parent(n + merges.size());
  for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
  for (std::size_t s = 0; s < n - k; ++s) {
    parent[merges[s].a] = n + s;
    parent[merges[s].b] = n + s;
  }
  auto root = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x];
    return x;
  };
  std::vector<std::size_t> labels(n);
  std::vector<std::size_t> seen;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = root(i);
    auto it = std::find(seen.begin(), seen.end(), r);
    if (it == seen.end()) {
      labels[i] = seen.size();
      seen.push_back(r);
    } else {
      labels[i] = static_cast<std::size_t>(it - seen.begin());
    }
  }
  return labels;
}

// Mean silhouette. Points in singleton clusters score 0. Undefined (nullopt)
// unless 2 <= k <= n-1.
inline std::optional<double> silhouette_score(const DistanceMatrix& dist, std::span<const std::size_t> labels) {
  const std::size_t n = dist.n;
  if (n == 0) return std::nullopt;
  const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1;
  if (k < 2 || k > n - 1) return std::nullopt;
  std::vector<std::size_t> count(k, 0);
  for (auto l : labels) ++count[l];
  double total = 0.0;
  std::vector<double> sums(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (count[labels[i]] == 1) continue;
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sums[labels[j]] += dist(i, j);
    }
    const double a = sums[labels[i]] / static_cast<double>(count[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      if (c != labels[i] && count[c] > 0) b = std::min(b, sums[c] / static_cast<double>(count[c]));
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

struct KSelection {
  std::vector<std::size_t> labels;
  std::size_t k = 0;
  std::optional<double> silhouette;
  std::vector<std::pair<std::size_t, double>> candidates;  // (k, silhouette)
};

// Picks k in [k_lo, k_hi] with maximal silhouette; ties go to the smaller k.
inline KSelection select_k(const Dendrogram& merges, const DistanceMatrix& dist, std::size_t k_lo, std::size_t k_hi) {
  KSelection sel;
  const std::size_t n = dist.n;
  for (std::size_t k = k_lo; k <= k_hi; ++k) {
    auto labels = cut_tree(merges, n, k);
    const auto s = silhouette_score(dist, labels);
    if (!s) continue;
    sel.candidates.emplace_back(k, *s);
    if (!sel.silhouette || *s > *sel.silhouette) {
      sel.silhouette = s;
      sel.k = k;
      sel.labels = std::move(labels);
    }
  }
  return sel;
}

}  // namespace inv
