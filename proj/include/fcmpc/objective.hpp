#pragma once

#include "fcmpc/core.hpp"

#include <concepts>
#include <cstddef>
#include <utility>

namespace fcmpc {

/// Loss value and gradient from one forward + one backward pass.
struct Evaluation {
  double value = 0.0;
  Vector gradient;
  // Set when the loss is a norm evaluated at (numerically) zero residual,
  // where it is not differentiable; gradient is then zero.
  bool converged = false;
};

/// Anything FCM/DPS can minimize: a forward-only value() and a combined
/// forward+backward evaluate().
template <class F>
concept Objective = requires(F& f, const Vector& x) {
  { f.value(x) } -> std::convertible_to<double>;
  { f.evaluate(x) } -> std::same_as<Evaluation>;
};

/// Adapts a pair of callables (loss, gradient) to the Objective interface.
template <class LossFn, class GradFn>
class FunctionObjective {
 public:
  FunctionObjective(LossFn loss, GradFn grad) : loss_(std::move(loss)), grad_(std::move(grad)) {}

  double value(const Vector& x) { return loss_(x); }
  Evaluation evaluate(const Vector& x) { return Evaluation{loss_(x), grad_(x), false}; }

 private:
  LossFn loss_;
  GradFn grad_;
};

template <class LossFn, class GradFn>
FunctionObjective<LossFn, GradFn> make_objective(LossFn loss, GradFn grad) {
  return FunctionObjective<LossFn, GradFn>(std::move(loss), std::move(grad));
}

/// Wraps an objective and counts forward (value or evaluate) and backward
/// (evaluate) passes actually issued against it.
template <Objective Inner>
class CountingObjective {
 public:
  explicit CountingObjective(Inner& inner) : inner_(&inner) {}

  double value(const Vector& x) {
    ++forward_;
    return inner_->value(x);
  }
  Evaluation evaluate(const Vector& x) {
    ++forward_;
    ++backward_;
    return inner_->evaluate(x);
  }

  std::size_t forward_passes() const { return forward_; }
  std::size_t backward_passes() const { return backward_; }
  void reset() { forward_ = backward_ = 0; }

 private:
  Inner* inner_;
  std::size_t forward_ = 0;
  std::size_t backward_ = 0;
};

}  // namespace fcmpc
