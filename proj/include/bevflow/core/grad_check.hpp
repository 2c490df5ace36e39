#pragma once

// Central finite-difference check of the analytic backward pass. Meant to
// run at 64-bit; step h in [1e-6, 1e-3].

#include <functional>

#include "bevflow/core/tensor.hpp"

namespace bevflow {

struct GradCheckResult {
  bool passed = false;
  double max_rel_error = 0.0;
  int64_t worst_index = -1;
};

// f must be scalar-valued and a pure function of x (plus captured
// constants). Relative error uses max(1, |analytic|, |numeric|) as the
// denominator, per coordinate.
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                           T h = T(1e-5), T tol = T(1e-4)) {
  Tensor<T> probe = x.detached();
  probe.set_requires_grad();
  Tensor<T> fx = f(probe);
  if (fx.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  if (!std::isfinite(static_cast<double>(fx.item())))
    throw std::invalid_argument("grad_check: f(x) is not finite");
  backward(fx);
  const auto& analytic = probe.grad();

  GradCheckResult res;
  res.passed = true;
  Tensor<T> work = x.detached();
  for (int64_t i = 0; i < work.numel(); ++i) {
    const T x0 = work[i];
    work[i] = x0 + h;
    const T fp = f(work).item();
    work[i] = x0 - h;
    const T fm = f(work).item();
    work[i] = x0;
    const T numeric = (fp - fm) / (2 * h);
    const T a = analytic[static_cast<size_t>(i)];
    const double denom = std::max({1.0, std::fabs(static_cast<double>(a)), std::fabs(static_cast<double>(numeric))});
    const double rel = std::fabs(static_cast<double>(a - numeric)) / denom;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
    }
  }
  res.passed = res.max_rel_error <= static_cast<double>(tol);
  return res;
}

// Same check against a module parameter that lives inside a model: the
// analytic side comes from backward() on the real graph, the numeric side
// from nudging the parameter in place and re-running the loss.
template <typename T>
GradCheckResult grad_check_param(const std::function<Tensor<T>()>& loss_fn, Tensor<T>& param, T h = T(1e-5),
                                 T tol = T(1e-4)) {
  param.zero_grad();
  Tensor<T> loss = loss_fn();
  if (loss.numel() != 1) throw std::invalid_argument("grad_check_param: loss must be scalar");
  backward(loss);
  std::vector<T> analytic(param.grad().begin(), param.grad().end());

  GradCheckResult res;
  res.passed = true;
  for (int64_t i = 0; i < param.numel(); ++i) {
    const T x0 = param[i];
    param[i] = x0 + h;
    const T fp = loss_fn().item();
    param[i] = x0 - h;
    const T fm = loss_fn().item();
    param[i] = x0;
    const T numeric = (fp - fm) / (2 * h);
    const T a = analytic[static_cast<size_t>(i)];
    const double denom = std::max({1.0, std::fabs(static_cast<double>(a)), std::fabs(static_cast<double>(numeric))});
    const double rel = std::fabs(static_cast<double>(a - numeric)) / denom;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
    }
  }
  res.passed = res.max_rel_error <= static_cast<double>(tol);
  return res;
}

}  // namespace bevflow
