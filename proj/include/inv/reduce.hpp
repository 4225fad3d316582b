#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "inv/error.hpp"
#include "inv/random.hpp"

namespace inv {

using Point2 = std::array<double, 2>;

// Principal component scores of the rows of `rows` (n vectors of equal length),
// keeping the top `dims` components. Each component's sign is fixed so that its
// largest-magnitude score is positive.
inline std::vector<std::vector<double>> pca_scores(const std::vector<std::vector<double>>& rows, std::size_t dims) {
  const std::size_t n = rows.size();
  if (n == 0) return {};
  const std::size_t D = rows[0].size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(D));
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != D) throw ValidationError("pca rows have unequal length");
    for (std::size_t j = 0; j < D; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  X.rowwise() -= X.colwise().mean();
  dims = std::min({dims, n, D});
  Eigen::MatrixXd scores(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dims));
  if (n <= D) {
    // Gram route: X X^T = U L U^T, scores = U sqrt(L).
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X * X.transpose());
    for (std::size_t c = 0; c < dims; ++c) {
      const Eigen::Index src = static_cast<Eigen::Index>(n - 1 - c);
      const double lambda = std::max(0.0, es.eigenvalues()(src));
      scores.col(static_cast<Eigen::Index>(c)) = es.eigenvectors().col(src) * std::sqrt(lambda);
    }
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X.transpose() * X);
    for (std::size_t c = 0; c < dims; ++c) {
      const Eigen::Index src = static_cast<Eigen::Index>(D - 1 - c);
      scores.col(static_cast<Eigen::Index>(c)) = X * es.eigenvectors().col(src);
    }
  }
  std::vector<std::vector<double>> out(n, std::vector<double>(dims));
  for (std::size_t c = 0; c < dims; ++c) {
    Eigen::Index arg = 0;
    scores.col(static_cast<Eigen::Index>(c)).cwiseAbs().maxCoeff(&arg);
    const double sign = scores(arg, static_cast<Eigen::Index>(c)) < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) out[i][c] = sign * scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
  }
  return out;
}

struct TsneOptions {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  double init_stddev = 1e-4;
  std::uint64_t seed = 0;
};

namespace detail {

// Row-conditional affinities p_{j|i} matched to the target perplexity by
// bisection on the Gaussian precision.
inline std::vector<double> tsne_affinities(const std::vector<std::vector<double>>& x, double perplexity) {
  const std::size_t n = x.size();
  std::vector<double> d2(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < x[i].size(); ++k) {
        const double t = x[i][k] - x[j][k];
        s += t * t;
      }
      d2[i * n + j] = d2[j * n + i] = s;
    }
  }
  const double target = std::log(perplexity);
  std::vector<double> p(n * n, 0.0);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double beta = 1.0, lo = -1.0, hi = -1.0;
    for (int iter = 0; iter < 200; ++iter) {
      double dmin = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) dmin = std::min(dmin, d2[i * n + j]);
      }
      double sum = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = j == i ? 0.0 : std::exp(-beta * (d2[i * n + j] - dmin));
        sum += row[j];
        weighted += row[j] * (d2[i * n + j] - dmin);
      }
      // Shannon entropy of the row distribution, in nats.
      const double entropy = std::log(sum) + beta * weighted / sum;
      for (std::size_t j = 0; j < n; ++j) p[i * n + j] = row[j] / sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-10) break;
      if (diff > 0) {
        lo = beta;
        beta = hi < 0 ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = lo < 0 ? beta / 2.0 : (beta + lo) / 2.0;
      }
    }
  }
  return p;
}

}  // namespace detail

// Exact (O(n^2) per iteration) t-SNE to two dimensions.
inline std::vector<Point2> tsne(const std::vector<std::vector<double>>& x, const TsneOptions& opt) {
  const std::size_t n = x.size();
  std::vector<Point2> y(n, Point2{0.0, 0.0});
  if (n < 2) return y;
  const auto cond = detail::tsne_affinities(x, opt.perplexity);
  std::vector<double> P(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      P[i * n + j] = std::max((cond[i * n + j] + cond[j * n + i]) / (2.0 * static_cast<double>(n)), 1e-12);
    }
  }
  Rng rng(opt.seed);
  for (auto& pt : y) {
    pt[0] = rng.normal(0.0, opt.init_stddev);
    pt[1] = rng.normal(0.0, opt.init_stddev);
  }
  std::vector<Point2> update(n, Point2{0.0, 0.0}), gains(n, Point2{1.0, 1.0}), grad(n);
  std::vector<double> num(n * n);
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    const double exaggeration = it < opt.exaggeration_iterations ? opt.early_exaggeration : 1.0;
    const double momentum = it < opt.exaggeration_iterations ? 0.5 : 0.8;
    double zsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num[i * n + i] = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = num[j * n + i] = q;
        zsum += 2.0 * q;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      grad[i] = {0.0, 0.0};
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double q = std::max(num[i * n + j] / zsum, 1e-12);
        const double m = 4.0 * (exaggeration * P[i * n + j] - q) * num[i * n + j];
        grad[i][0] += m * (y[i][0] - y[j][0]);
        grad[i][1] += m * (y[i][1] - y[j][1]);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 2; ++c) {
        const bool same_sign = (grad[i][c] > 0) == (update[i][c] > 0);
        gains[i][c] = same_sign ? gains[i][c] * 0.8 : gains[i][c] + 0.2;
        gains[i][c] = std::max(gains[i][c], 0.01);
        update[i][c] = momentum * update[i][c] - opt.learning_rate * gains[i][c] * grad[i][c];
        y[i][c] += update[i][c];
      }
    }
    Point2 mean{0.0, 0.0};
    for (const auto& pt : y) {
      mean[0] += pt[0];
      mean[1] += pt[1];
    }
    for (auto& pt : y) {
      pt[0] -= mean[0] / static_cast<double>(n);
      pt[1] -= mean[1] / static_cast<double>(n);
    }
  }
  return y;
}

}  // namespace inv
