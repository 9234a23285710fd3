#pragma once

// Diffusion-side oracles and experiment pieces shared by the unit tests and
// the acceptance binary.

#include "fcmpc/diffusion.hpp"
#include "problems.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace fcmpc::testing {

/// Unguided eta = 0 DDIM under a single Gaussian prior N(mu, s^2 I) with the
/// exact noise prediction, evaluated coordinate-wise in long double. Each
/// coordinate follows the scalar affine recursion
///   e  = sqrt(1 - a) (x - sqrt(a) mu) / (a s^2 + 1 - a)
///   x0 = (x - sqrt(1 - a) e) / sqrt(a)
///   x' = sqrt(a') x0 + sqrt(1 - a') e.
inline Vector gaussian_ddim_oracle(const Vector& x_T, const Vector& mu, double s, const NoiseSchedule& schedule) {
  Vector out(x_T.size());
  const long double s2 = static_cast<long double>(s) * s;
  for (Eigen::Index i = 0; i < x_T.size(); ++i) {
    long double x = x_T[i];
    const long double m = mu[i];
    for (int t = schedule.steps(); t >= 1; --t) {
      const long double a = schedule.alpha_bar(t);
      const long double a_prev = schedule.alpha_bar(t - 1);
      const long double e = std::sqrt(1.0L - a) * (x - std::sqrt(a) * m) / (a * s2 + 1.0L - a);
      const long double x0 = (x - std::sqrt(1.0L - a) * e) / std::sqrt(a);
      x = std::sqrt(a_prev) * x0 + std::sqrt(1.0L - a_prev) * e;
    }
    out[i] = static_cast<double>(x);
  }
  return out;
}

struct ContractionResult {
  // Max over steps of mean ||du'||^2 - mean ||du||^2.
  double worst_excess = -std::numeric_limits<double>::infinity();
  // Same, per pair instead of averaged.
  double worst_pair_excess = -std::numeric_limits<double>::infinity();
  int steps = 0;
};

/// Runs `pairs` chain pairs u, v of the guided sampler side by side under a
/// single-Gaussian prior (stddev <= 1), FCM refinement against the quadratic
/// 0.5 ||A x - y||^2 with L = 1.25 lambda_max(A^T A). Both chains of a pair
/// share every noise draw. Reports the largest per-step growth of the
/// mean squared gap.
inline ContractionResult contraction_check(TestRng& rng, int pairs, int dim, const NoiseSchedule& schedule,
                                           double eta = 0.0) {
  const Vector mu = gaussian_vector(rng, dim, 0.5);
  const double s = uniform(rng, 0.2, 1.0);
  OracleDenoiser denoiser(GaussianMixturePrior::single(mu, s), schedule);

  const Matrix a = gaussian_matrix(rng, dim, dim, 1.0 / std::sqrt(static_cast<double>(dim)));
  const Vector y = gaussian_vector(rng, dim);
  auto objective = make_objective([a, y](const Vector& x) { return 0.5 * (a * x - y).squaredNorm(); },
                                  [a, y](const Vector& x) -> Vector { return a.transpose() * (a * x - y); });
  FCMConfig fcm;
  fcm.lipschitz = 1.25 * largest_eigenvalue(a.transpose() * a);
  SamplerConfig cfg;
  cfg.eta = eta;
  cfg.guidance = fcm;

  std::vector<Vector> u(static_cast<std::size_t>(pairs)), v(static_cast<std::size_t>(pairs));
  for (int p = 0; p < pairs; ++p) {
    u[static_cast<std::size_t>(p)] = gaussian_vector(rng, dim);
    v[static_cast<std::size_t>(p)] = gaussian_vector(rng, dim);
  }
  auto mean_gap = [&] {
    double total = 0.0;
    for (int p = 0; p < pairs; ++p) total += (u[static_cast<std::size_t>(p)] - v[static_cast<std::size_t>(p)]).squaredNorm();
    return total / pairs;
  };

  ContractionResult out;
  Rng noise_u(rng()), noise_v(0);
  double before = mean_gap();
  for (int t = schedule.steps(); t >= 1; --t) {
    for (int p = 0; p < pairs; ++p) {
      noise_v = noise_u;  // shared draws
      auto& up = u[static_cast<std::size_t>(p)];
      auto& vp = v[static_cast<std::size_t>(p)];
      const double gap = (up - vp).squaredNorm();
      up = guided_ddim_step(up, t, denoiser, objective, schedule, cfg, noise_u).x_prev;
      vp = guided_ddim_step(vp, t, denoiser, objective, schedule, cfg, noise_v).x_prev;
      out.worst_pair_excess = std::max(out.worst_pair_excess, (up - vp).squaredNorm() - gap);
    }
    const double after = mean_gap();
    out.worst_excess = std::max(out.worst_excess, after - before);
    ++out.steps;
    before = after;
  }
  return out;
}

}  // namespace fcmpc::testing
