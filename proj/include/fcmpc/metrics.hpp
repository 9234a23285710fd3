#pragma once

#include "fcmpc/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace fcmpc {

struct MetricReport {
  double chamfer_l1 = 0.0;
  double emd = 0.0;
  double fscore = 0.0;
  double threshold = 0.01;
};

namespace detail {

inline void require_nonempty(const Positions& a, const Positions& b) {
  if (a.rows() == 0 || b.rows() == 0) {
    throw std::invalid_argument("metric inputs must be nonempty point sets");
  }
}

// Mean over rows of `from` of the distance to the nearest row of `to`.
template <class Dist>
double mean_nearest(const Positions& from, const Positions& to, Dist dist) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < from.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < to.rows(); ++j) {
      best = std::min(best, dist(from.row(i), to.row(j)));
    }
    total += best;
  }
  return total / static_cast<double>(from.rows());
}

// Fraction of rows of `from` with a row of `to` within Euclidean `tau`.
inline double fraction_within(const Positions& from, const Positions& to, double tau) {
  const double tau2 = tau * tau;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < from.rows(); ++i) {
    for (Eigen::Index j = 0; j < to.rows(); ++j) {
      if ((from.row(i) - to.row(j)).squaredNorm() <= tau2) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(from.rows());
}

}  // namespace detail

/// Symmetric L1 Chamfer distance:
/// 0.5 * (mean_a min_b |a - b|_1 + mean_b min_a |a - b|_1).
inline double chamfer_l1(const Positions& a, const Positions& b) {
  detail::require_nonempty(a, b);
  auto l1 = [](const auto& p, const auto& q) { return (p - q).cwiseAbs().sum(); };
  return 0.5 * (detail::mean_nearest(a, b, l1) + detail::mean_nearest(b, a, l1));
}

/// Minimum-cost perfect matching on a square cost matrix (row-major n x n).
/// Shortest augmenting paths with potentials, O(n^3). Returns the column
/// assigned to each row.
inline std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) {
    throw std::invalid_argument("assignment cost matrix must be n x n");
  }
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is a virtual start.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) {
          continue;
        }
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) {
    row_to_col[match[j] - 1] = j - 1;
  }
  return row_to_col;
}

inline constexpr std::size_t kEmdExactLimit = 512;

/// Earth Mover's Distance between equal-size sets: the minimum over
/// bijections of the mean Euclidean distance, solved exactly.
inline double emd(const Positions& a, const Positions& b, std::size_t exact_limit = kEmdExactLimit) {
  detail::require_nonempty(a, b);
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("EMD needs equal point counts (" + std::to_string(a.rows()) + " vs " +
                                std::to_string(b.rows()) + ")");
  }
  const auto n = static_cast<std::size_t>(a.rows());
  if (n > exact_limit) {
    throw std::invalid_argument("EMD exact solver limited to " + std::to_string(exact_limit) +
                                " points; subsample both clouds first (got " + std::to_string(n) + ")");
  }
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      cost[i * n + j] = (a.row(static_cast<Eigen::Index>(i)) - b.row(static_cast<Eigen::Index>(j))).norm();
    }
  }
  const auto assignment = solve_assignment(cost, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += cost[i * n + assignment[i]];
  }
  return total / static_cast<double>(n);
}

/// F-score at Euclidean threshold tau: harmonic mean of precision (A near B)
/// and recall (B near A); 0 when both are 0.
inline double fscore(const Positions& a, const Positions& b, double tau) {
  detail::require_nonempty(a, b);
  if (!(tau > 0.0)) {
    throw std::invalid_argument("F-score threshold must be positive");
  }
  const double precision = detail::fraction_within(a, b, tau);
  const double recall = detail::fraction_within(b, a, tau);
  if (precision + recall == 0.0) {
    return 0.0;
  }
  return 2.0 * precision * recall / (precision + recall);
}

/// All three metrics. EMD errors propagate (size mismatch, size limit).
inline MetricReport evaluate_metrics(const Positions& reconstruction, const Positions& reference, double tau) {
  MetricReport r;
  r.threshold = tau;
  r.chamfer_l1 = chamfer_l1(reconstruction, reference);
  r.emd = emd(reconstruction, reference);
  r.fscore = fscore(reconstruction, reference, tau);
  return r;
}

}  // namespace fcmpc
