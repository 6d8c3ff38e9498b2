#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "depthcrf/tensor.hpp"

namespace depthcrf {

/// Compares reverse-mode gradients of a scalar-valued graph builder against
/// central finite differences taken over the elements of `x`. The builder is
/// re-run after each perturbation of x's storage. Returns the maximum
/// relative error  |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
/// Meaningful only in 64-bit verification mode.
template <typename T>
T grad_check(const std::function<Tensor<T>()>& f, Tensor<T> x) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> loss = f();
  if (loss.numel() != 1) throw ArgError("grad_check: f must be scalar-valued");
  backward(loss);
  std::vector<T> analytic = x.grad().empty() ? std::vector<T>(x.numel(), T(0)) : x.grad();

  T max_rel = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T orig = x.data()[i];
    const T h = T(1e-5) * (T(1) + std::abs(orig));
    x.data()[i] = orig + h;
    const T fp = f().item();
    x.data()[i] = orig - h;
    const T fm = f().item();
    x.data()[i] = orig;
    const T numeric = (fp - fm) / (2 * h);
    const T denom = std::max(T(1e-8), std::abs(analytic[i]) + std::abs(numeric));
    max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

/// Convenience overload for checking an op y = g(x) through a sum reduction.
template <typename T>
T grad_check(const std::function<Tensor<T>(Tensor<T>)>& g, Tensor<T> x) {
  return grad_check<T>([&]() { return sum_all(g(x)); }, x);
}

}  // namespace depthcrf
