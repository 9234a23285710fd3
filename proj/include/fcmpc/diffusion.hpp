#pragma once

#include "fcmpc/core.hpp"
#include "fcmpc/fcm.hpp"
#include "fcmpc/objective.hpp"

#include <cmath>
#include <concepts>
#include <limits>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fcmpc {

using Rng = std::mt19937_64;

inline Vector standard_normal(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vector z(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    z(i) = dist(rng);
  }
  return z;
}

/// Isotropic Gaussian mixture over the flattened state; an analytic stand-in
/// for a learned prior whose diffused score is available in closed form.
class GaussianMixturePrior {
 public:
  struct Component {
    double weight = 1.0;
    Vector mean;
    double stddev = 1.0;
  };

  GaussianMixturePrior() = default;

  explicit GaussianMixturePrior(std::vector<Component> components) : components_(std::move(components)) {
    if (components_.empty()) {
      throw std::invalid_argument("mixture prior needs at least one component");
    }
    double total = 0.0;
    const Eigen::Index dim = components_.front().mean.size();
    for (const auto& c : components_) {
      if (!(c.weight >= 0.0) || !(c.stddev > 0.0)) {
        throw std::invalid_argument("mixture weights must be >= 0 and stddevs > 0");
      }
      if (c.mean.size() != dim || dim == 0) {
        throw std::invalid_argument("mixture component means must share a nonzero dimension");
      }
      if (!c.mean.allFinite()) {
        throw std::invalid_argument("mixture component mean is non-finite");
      }
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw std::invalid_argument("mixture weights sum to " + std::to_string(total) + ", expected 1");
    }
  }

  /// Builds a mixture after dividing the weights by their sum.
  static GaussianMixturePrior normalized(std::vector<Component> components) {
    double total = 0.0;
    for (const auto& c : components) {
      total += c.weight;
    }
    if (!(total > 0.0)) {
      throw std::invalid_argument("mixture weights must have a positive sum");
    }
    for (auto& c : components) {
      c.weight /= total;
    }
    return GaussianMixturePrior(std::move(components));
  }

  static GaussianMixturePrior single(Vector mean, double stddev) {
    return GaussianMixturePrior({Component{1.0, std::move(mean), stddev}});
  }

  const std::vector<Component>& components() const { return components_; }
  Eigen::Index dim() const { return components_.front().mean.size(); }

  /// Posterior component probabilities of x_t under the diffused mixture.
  std::vector<double> responsibilities(const Vector& x_t, double alpha_bar) const {
    const double root_ab = std::sqrt(alpha_bar);
    const double d = static_cast<double>(dim());
    std::vector<double> logits(components_.size());
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < components_.size(); ++j) {
      const auto& c = components_[j];
      const double var = alpha_bar * c.stddev * c.stddev + 1.0 - alpha_bar;
      logits[j] = c.weight > 0.0 ? std::log(c.weight) - 0.5 * d * std::log(var) -
                                       0.5 * (x_t - root_ab * c.mean).squaredNorm() / var
                                 : -std::numeric_limits<double>::infinity();
      best = std::max(best, logits[j]);
    }
    double z = 0.0;
    for (double& l : logits) {
      l = std::exp(l - best);
      z += l;
    }
    for (double& l : logits) {
      l /= z;
    }
    return logits;
  }

 private:
  std::vector<Component> components_;
};

/// Exact noise prediction for a mixture prior diffused to step t:
/// eps* = -sqrt(1 - abar) grad log p_t(x_t), with
/// p_t = sum_j w_j N(sqrt(abar) mu_j, (abar s_j^2 + 1 - abar) I).
inline Vector oracle_epsilon(const Vector& x_t, int t, const GaussianMixturePrior& prior,
                             const NoiseSchedule& schedule) {
  if (x_t.size() != prior.dim()) {
    throw std::invalid_argument("state dimension does not match the prior");
  }
  const double ab = schedule.alpha_bar(t);
  schedule.check_step(t);
  const double root_ab = std::sqrt(ab);
  const auto resp = prior.responsibilities(x_t, ab);
  Vector eps = Vector::Zero(x_t.size());
  for (std::size_t j = 0; j < resp.size(); ++j) {
    if (resp[j] == 0.0) {
      continue;
    }
    const auto& c = prior.components()[j];
    const double var = ab * c.stddev * c.stddev + 1.0 - ab;
    eps += (resp[j] / var) * (x_t - root_ab * c.mean);
  }
  return std::sqrt(1.0 - ab) * eps;
}

/// Anything that predicts the noise in x_t.
template <class D>
concept Denoiser = requires(D& d, const Vector& x, int t) {
  { d.epsilon(x, t) } -> std::convertible_to<Vector>;
};

class OracleDenoiser {
 public:
  OracleDenoiser(GaussianMixturePrior prior, NoiseSchedule schedule)
      : prior_(std::move(prior)), schedule_(std::move(schedule)) {}

  Vector epsilon(const Vector& x_t, int t) const { return oracle_epsilon(x_t, t, prior_, schedule_); }

  const GaussianMixturePrior& prior() const { return prior_; }
  const NoiseSchedule& schedule() const { return schedule_; }

 private:
  GaussianMixturePrior prior_;
  NoiseSchedule schedule_;
};

/// Clean-sample estimate (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
inline Vector predict_x0(const Vector& x_t, const Vector& epsilon_hat, int t, const NoiseSchedule& schedule) {
  if (x_t.size() != epsilon_hat.size()) {
    throw std::invalid_argument("noise estimate shape does not match state");
  }
  const double ab = schedule.alpha_bar(t);
  return (x_t - std::sqrt(1.0 - ab) * epsilon_hat) / std::sqrt(ab);
}

/// sigma_t(eta) = eta sqrt((1 - abar_{t-1}) / (1 - abar_t)) sqrt(1 - abar_t / abar_{t-1}).
inline double ddim_sigma(int t, const NoiseSchedule& schedule, double eta) {
  schedule.check_step(t);
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t - 1);
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
}

/// DDIM update x_t -> x_{t-1} given the noise estimate, the (possibly
/// refined) clean estimate, and standard-normal `noise` (ignored when
/// sigma_t = 0).
inline Vector ddim_step(const Vector& x_t, const Vector& epsilon_hat, const Vector& x0_hat, int t,
                        const NoiseSchedule& schedule, double eta, const Vector& noise) {
  if (!(eta >= 0.0)) {
    throw std::invalid_argument("DDIM eta must be >= 0");
  }
  const double ab_prev = schedule.alpha_bar(t - 1);
  const double sigma = ddim_sigma(t, schedule, eta);
  double dir2 = 1.0 - ab_prev - sigma * sigma;
  if (dir2 < 0.0) {
    if (dir2 < -1e-14) {
      throw std::invalid_argument("DDIM eta too large: 1 - abar_{t-1} - sigma^2 < 0");
    }
    dir2 = 0.0;
  }
  Vector out = std::sqrt(ab_prev) * x0_hat + std::sqrt(dir2) * epsilon_hat;
  if (sigma > 0.0) {
    if (noise.size() != x_t.size()) {
      throw std::invalid_argument("DDIM noise shape does not match state");
    }
    out += sigma * noise;
  }
  return out;
}

/// As above, drawing the fresh noise from `rng` only when sigma_t > 0.
inline Vector ddim_step(const Vector& x_t, const Vector& epsilon_hat, const Vector& x0_hat, int t,
                        const NoiseSchedule& schedule, double eta, Rng& rng) {
  const double sigma = ddim_sigma(t, schedule, eta);
  const Vector noise = sigma > 0.0 ? standard_normal(rng, x_t.size()) : Vector();
  return ddim_step(x_t, epsilon_hat, x0_hat, t, schedule, eta, noise);
}

/// Simplified denoising objective ||noise - eps_theta(q_sample(x0, t, noise), t)||^2
/// for one draw.
template <Denoiser D>
double denoising_loss(const Vector& x0, const Vector& noise, int t, const NoiseSchedule& schedule, D& denoiser) {
  const Vector x_t = q_sample(x0, t, noise, schedule);
  return (noise - denoiser.epsilon(x_t, t)).squaredNorm();
}

struct NoGuidance {};

struct DPSGuidance {
  double gamma = 0.05;
  int steps = 4;  // fixed-step updates per diffusion step, NFE-matched to FCM

  bool operator==(const DPSGuidance&) const = default;
};

using Guidance = std::variant<NoGuidance, FCMConfig, DPSGuidance>;

struct SamplerConfig {
  double eta = 0.0;
  std::uint64_t seed = 0;
  Guidance guidance = NoGuidance{};
  int snapshot_every = 0;  // keep the refined clean estimate every S steps; 0 = off
};

/// Per-timestep record of a guided sampling run.
struct TimestepRecord {
  int t = 0;
  double residual_before = 0.0;  // loss at the prior's clean estimate
  double residual_after = 0.0;   // loss after likelihood refinement
  std::vector<FCMStepRecord> fcm;
};

struct Snapshot {
  int t = 0;
  Vector x0;
};

struct GuidedStep {
  Vector x_prev;
  Vector x0_refined;
  TimestepRecord record;
};

/// Objective with zero loss everywhere; used for unguided sampling.
struct ZeroObjective {
  double value(const Vector&) const { return 0.0; }
  Evaluation evaluate(const Vector& x) const { return Evaluation{0.0, Vector::Zero(x.size()), true}; }
};

/// One diffusion step: (a) prior prediction, (b) likelihood refinement of
/// the clean estimate, (c) DDIM update that reuses the original noise
/// estimate.
template <Denoiser D, Objective F>
GuidedStep guided_ddim_step(const Vector& x_t, int t, D& denoiser, F& objective, const NoiseSchedule& schedule,
                            const SamplerConfig& cfg, Rng& rng) {
  GuidedStep out;
  out.record.t = t;
  const Vector eps = denoiser.epsilon(x_t, t);
  const Vector x0_hat = predict_x0(x_t, eps, t, schedule);
  out.record.residual_before = objective.value(x0_hat);

  if (const auto* fcm = std::get_if<FCMConfig>(&cfg.guidance)) {
    FCMRefineResult refined = fcm_refine(x0_hat, objective, *fcm);
    out.x0_refined = std::move(refined.x);
    out.record.fcm = std::move(refined.trace);
    out.record.residual_after = objective.value(out.x0_refined);
  } else if (const auto* dps = std::get_if<DPSGuidance>(&cfg.guidance)) {
    out.x0_refined = x0_hat;
    for (int k = 0; k < dps->steps; ++k) {
      out.x0_refined = dps_step(out.x0_refined, objective, dps->gamma);
    }
    out.record.residual_after = objective.value(out.x0_refined);
  } else {
    out.x0_refined = x0_hat;
    out.record.residual_after = out.record.residual_before;
  }

  out.x_prev = ddim_step(x_t, eps, out.x0_refined, t, schedule, cfg.eta, rng);
  if (!out.x_prev.allFinite()) {
    throw NumericalError("sampler state became non-finite at t = " + std::to_string(t));
  }
  return out;
}

struct SampleResult {
  Vector x0;
  std::vector<TimestepRecord> trace;  // ordered t = T .. 1
  std::vector<Snapshot> snapshots;
};

/// DDIM sampling with likelihood refinement of every clean estimate.
///
/// Random draws are consumed in a fixed order: the initial state x_T first,
/// then one fresh noise vector per step with sigma_t > 0. At t = 1 the
/// update uses abar_0 = 1, so the returned sample is the refined clean
/// estimate of the last step.
template <Denoiser D, Objective F>
SampleResult sample_posterior(D& denoiser, F& objective, const NoiseSchedule& schedule, Eigen::Index dim,
                              const SamplerConfig& cfg) {
  if (const auto* fcm = std::get_if<FCMConfig>(&cfg.guidance)) {
    fcm->validate();
  }
  if (const auto* dps = std::get_if<DPSGuidance>(&cfg.guidance)) {
    if (!(dps->gamma >= 0.0) || dps->steps < 0) {
      throw std::invalid_argument("DPS guidance needs gamma >= 0 and steps >= 0");
    }
  }
  Rng rng(cfg.seed);
  SampleResult out;
  Vector x = standard_normal(rng, dim);
  out.trace.reserve(static_cast<std::size_t>(schedule.steps()));
  for (int t = schedule.steps(); t >= 1; --t) {
    GuidedStep step = guided_ddim_step(x, t, denoiser, objective, schedule, cfg, rng);
    if (cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0) {
      out.snapshots.push_back({t, step.x0_refined});
    }
    out.trace.push_back(std::move(step.record));
    x = std::move(step.x_prev);
  }
  out.x0 = std::move(x);
  return out;
}

/// Unguided DDIM sampling from the prior.
template <Denoiser D>
Vector sample_prior(D& denoiser, const NoiseSchedule& schedule, Eigen::Index dim, double eta, std::uint64_t seed) {
  ZeroObjective zero;
  SamplerConfig cfg;
  cfg.eta = eta;
  cfg.seed = seed;
  return sample_posterior(denoiser, zero, schedule, dim, cfg).x0;
}

}  // namespace fcmpc
