#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "prdu/tensor.hpp"

namespace prdu {

// Central-difference gradient of a scalar function with respect to one
// parameter tensor. The function must be deterministic across calls (fixed
// seeds, dropout disabled); it is re-evaluated 2 * size times.
inline Tensor finite_difference_gradient(const std::function<double()>& f, Tensor& params,
                                         double eps) {
  if (eps <= 0.0) throw std::invalid_argument("finite_difference_gradient: eps must be > 0");
  Tensor grad = Tensor::zeros_like(params);
  double* p = params.data();
  double* g = grad.data();
  for (int i = 0; i < params.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + eps;
    const double up = f();
    p[i] = saved - eps;
    const double down = f();
    p[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("finite_difference_gradient: non-finite value at probe point");
    g[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

// Relative error with an absolute guard for near-zero coordinate pairs.
inline double gradient_max_rel_error(const Tensor& analytic, const Tensor& numeric,
                                     double zero_guard = 1e-7) {
  if (!analytic.same_shape(numeric))
    throw std::invalid_argument("gradient_max_rel_error: shape mismatch");
  const double* a = analytic.data();
  const double* n = numeric.data();
  double worst = 0.0;
  for (int i = 0; i < analytic.size(); ++i) {
    const double mag = std::max(std::abs(a[i]), std::abs(n[i]));
    if (mag < zero_guard) continue;  // both effectively zero at fd resolution
    worst = std::max(worst, std::abs(a[i] - n[i]) / mag);
  }
  return worst;
}

}  // namespace prdu
