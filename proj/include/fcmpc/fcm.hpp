#pragma once

#include "fcmpc/core.hpp"
#include "fcmpc/objective.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

namespace fcmpc {

/// Hyperparameters of the forward curvature-matching update.
struct FCMConfig {
  double delta0 = 2e-2;          // probe scale
  double eta_fcm = 1e-4;         // Armijo sufficient-decrease factor
  double lipschitz = 2.0 / 3.0;  // step cap is 1 / lipschitz
  double epsilon = 1e-12;        // denominator stabilizer
  int k_fcm = 4;                 // refinements per diffusion step
  double grad_floor = 1e-10;     // ||g|| at or below this skips the update

  void validate() const {
    if (!(delta0 > 0.0) || !(eta_fcm > 0.0) || !(lipschitz > 0.0) || !(epsilon > 0.0)) {
      throw std::invalid_argument("FCM delta0, eta_fcm, lipschitz and epsilon must be positive");
    }
    if (k_fcm < 1) {
      throw std::invalid_argument("FCM k_fcm must be >= 1");
    }
    if (!(grad_floor >= 0.0)) {
      throw std::invalid_argument("FCM grad_floor must be >= 0");
    }
  }

  /// Guaranteed per-step decrease constant min(eta / 2L, 1 / 8L).
  double descent_constant() const { return std::min(eta_fcm / (2.0 * lipschitz), 1.0 / (8.0 * lipschitz)); }

  bool operator==(const FCMConfig&) const = default;
};

struct FCMStepRecord {
  double delta_k = 0.0;
  double alpha_raw = 0.0;
  double alpha = 0.0;  // capped step before any halving
  double alpha_final = 0.0;
  bool halved = false;
  bool skipped = false;   // ||g|| <= grad_floor, iterate unchanged
  bool diverged = false;  // trial loss non-finite even after halving
  double g_norm = 0.0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  int forward_evals = 0;
  int gradient_evals = 0;
};

struct CurvatureProbe {
  double delta = 0.0;
  Vector h;  // (g - grad(x - delta g)) / delta, approximately H g
  Evaluation probe_eval;
};

/// Directional curvature along the gradient using one extra gradient
/// evaluation at x - delta_k g with delta_k = delta0 ||x|| / ||g||.
/// Returns nullopt when ||g|| <= grad_floor (stationary, nothing to probe).
/// For x = 0 the probe uses unit scale, delta_k = delta0 / ||g||.
template <Objective F>
std::optional<CurvatureProbe> curvature_probe(const Vector& x, const Vector& g, F& objective, double delta0,
                                              double grad_floor = 0.0) {
  const double g_norm = g.norm();
  if (!(g_norm > grad_floor) || g_norm == 0.0) {
    return std::nullopt;
  }
  const double x_norm = x.norm();
  if (!std::isfinite(x_norm)) {
    throw NumericalError("curvature probe at a non-finite iterate");
  }
  const double scale = x_norm > 0.0 ? x_norm : 1.0;
  CurvatureProbe out;
  out.delta = delta0 * scale / g_norm;
  const Vector probe = x - out.delta * g;
  out.probe_eval = objective.evaluate(probe);
  out.h = (g - out.probe_eval.gradient) / out.delta;
  return out;
}

struct StepSize {
  double alpha_raw = 0.0;
  double alpha = 0.0;
};

/// Capped Barzilai-Borwein step: alpha_raw = ||g||^2 / (<g, h> + eps),
/// alpha = min(alpha_raw, 1 / L). A non-positive denominator (zero or
/// negative curvature) yields alpha_raw = +inf and the cap.
inline StepSize bb_step_size(const Vector& g, const Vector& h, double epsilon, double lipschitz) {
  if (g.size() != h.size()) {
    throw std::invalid_argument("gradient and curvature vectors differ in size");
  }
  const double cap = 1.0 / lipschitz;
  const double denom = g.dot(h) + epsilon;
  StepSize s;
  if (!(denom > 0.0)) {
    s.alpha_raw = std::numeric_limits<double>::infinity();
    s.alpha = cap;
    return s;
  }
  s.alpha_raw = g.squaredNorm() / denom;
  s.alpha = std::min(s.alpha_raw, cap);
  return s;
}

struct FCMStepResult {
  Vector x;
  FCMStepRecord record;
};

/// One forward curvature-matching update with a single Armijo back-off.
///
/// Cost: two gradient evaluations (at x and at the probe) and three forward
/// passes (the two gradient passes plus the trial loss). Halving costs one
/// extra forward pass for the accepted point's loss.
template <Objective F>
FCMStepResult fcm_step(const Vector& x, F& objective, const FCMConfig& cfg) {
  cfg.validate();
  FCMStepResult out{x, {}};
  FCMStepRecord& rec = out.record;

  const Evaluation at_x = objective.evaluate(x);
  rec.forward_evals = 1;
  rec.gradient_evals = 1;
  rec.loss_before = at_x.value;
  rec.loss_after = at_x.value;
  const Vector& g = at_x.gradient;
  rec.g_norm = g.norm();
  if (!std::isfinite(rec.loss_before) || !std::isfinite(rec.g_norm)) {
    throw NumericalError("non-finite loss or gradient at the current iterate");
  }

  auto probe = at_x.converged ? std::nullopt : curvature_probe(x, g, objective, cfg.delta0, cfg.grad_floor);
  if (!probe) {
    rec.skipped = true;
    return out;
  }
  rec.forward_evals = 2;
  rec.gradient_evals = 2;
  rec.delta_k = probe->delta;

  const StepSize step = bb_step_size(g, probe->h, cfg.epsilon, cfg.lipschitz);
  rec.alpha_raw = step.alpha_raw;
  rec.alpha = step.alpha;
  rec.alpha_final = step.alpha;

  const double g2 = rec.g_norm * rec.g_norm;
  Vector trial = x - step.alpha * g;
  double trial_loss = objective.value(trial);
  rec.forward_evals = 3;

  const bool sufficient = std::isfinite(trial_loss) && trial_loss <= rec.loss_before - cfg.eta_fcm * step.alpha * g2;
  if (!sufficient) {
    rec.halved = true;
    rec.alpha_final = 0.5 * step.alpha;
    trial = x - rec.alpha_final * g;
    trial_loss = objective.value(trial);
    rec.forward_evals = 4;
    if (!std::isfinite(trial_loss)) {
      rec.diverged = true;
      return out;
    }
  }
  rec.loss_after = trial_loss;
  out.x = std::move(trial);
  return out;
}

struct FCMRefineResult {
  Vector x;
  std::vector<FCMStepRecord> trace;
};

/// Up to cfg.k_fcm sequential FCM steps; stops early on a stationary skip
/// or a diverged probe.
template <Objective F>
FCMRefineResult fcm_refine(const Vector& x0, F& objective, const FCMConfig& cfg) {
  FCMRefineResult out{x0, {}};
  out.trace.reserve(static_cast<std::size_t>(cfg.k_fcm));
  for (int k = 0; k < cfg.k_fcm; ++k) {
    FCMStepResult step = fcm_step(out.x, objective, cfg);
    out.trace.push_back(step.record);
    if (step.record.skipped || step.record.diverged) {
      break;
    }
    out.x = std::move(step.x);
  }
  return out;
}

/// Fixed-step likelihood update x - gamma * grad(x).
template <Objective F>
Vector dps_step(const Vector& x, F& objective, double gamma) {
  if (!(gamma >= 0.0)) {
    throw std::invalid_argument("DPS step size must be >= 0");
  }
  const Evaluation e = objective.evaluate(x);
  return x - gamma * e.gradient;
}

inline void write_fcm_trace_csv(std::ostream& os, std::span<const FCMStepRecord> trace) {
  os << "step,loss_before,loss_after,g_norm,delta_k,alpha_raw,alpha_final,halved,forward_evals,gradient_evals\n";
  const auto old_precision = os.precision(17);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& r = trace[i];
    os << i << ',' << r.loss_before << ',' << r.loss_after << ',' << r.g_norm << ',' << r.delta_k << ','
       << r.alpha_raw << ',' << r.alpha_final << ',' << (r.halved ? 1 : 0) << ',' << r.forward_evals << ','
       << r.gradient_evals << '\n';
  }
  os.precision(old_precision);
}

}  // namespace fcmpc
