#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "hmdrn/ops.hpp"
#include "hmdrn/tensor.hpp"

namespace hmdrn {

// Compares reverse-mode gradients against central finite differences
// (f(t+h) - f(t-h)) / 2h, element by element over every listed parameter.
// `loss_fn` must rebuild the loss from the current parameter values; it is
// called without an active tape during the difference evaluations. Relative
// error uses max(|analytic|, |numeric|, floor) as denominator. Meant for
// double precision.
template <typename T>
T grad_check(const std::function<Tensor<T>()>& loss_fn,
             std::vector<Tensor<T>> params, T h = T(1e-5),
             T denom_floor = T(1e-8)) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<T>> analytic;
  {
    GradTape<T> tape;
    Tensor<T> loss = loss_fn();
    backward(loss, tape);
  }
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad_view()
                                    : std::vector<T>(p.size(), T(0)));

  T worst = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T saved = p(i);
      p(i) = saved + h;
      const T up = loss_fn().item();
      p(i) = saved - h;
      const T dn = loss_fn().item();
      p(i) = saved;
      const T numeric = (up - dn) / (2 * h);
      const T a = analytic[pi][i];
      const T denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace hmdrn
