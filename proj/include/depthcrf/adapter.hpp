#pragma once

#include <cmath>
#include <string>

#include "depthcrf/nn_ops.hpp"
#include "depthcrf/param_store.hpp"
#include "depthcrf/tensor.hpp"

namespace depthcrf {

/// Residual mean-token injection: out_i = x_i + mean_j(x_j). Token axis is
/// the second-to-last; any leading batch dims.
template <typename T>
Tensor<T> broadcast_tokens(Tensor<T> x) {
  if (x.rank() < 2) throw DimError("broadcast: tokens must be [..,N,d]");
  const int d = x.dim(-1), n = x.dim(-2);
  const std::int64_t groups = x.numel() / (std::int64_t(n) * d);
  auto xn = x.node();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn, groups, n, d](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    std::vector<T> colsum(d);
    for (std::int64_t b = 0; b < groups; ++b) {
      const T* gp = g.data() + b * n * d;
      std::fill(colsum.begin(), colsum.end(), T(0));
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) colsum[c] += gp[i * d + c];
      T* gx = xn->grad.data() + b * n * d;
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) gx[i * d + c] += gp[i * d + c] + colsum[c] / n;
    }
  });
  std::vector<T> mean(d);
  for (std::int64_t b = 0; b < groups; ++b) {
    const T* xp = x.data().data() + b * n * d;
    std::fill(mean.begin(), mean.end(), T(0));
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) mean[c] += xp[i * d + c];
    for (int c = 0; c < d; ++c) mean[c] /= n;
    T* op = out.data().data() + b * n * d;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) op[i * d + c] = xp[i * d + c] + mean[c];
  }
  return out;
}

/// Scaled variant: out_i = x_i + lambda ⊙ mean_j(x_j), lambda learnable [d].
template <typename T>
Tensor<T> broadcast_tokens_scaled(Tensor<T> x, Tensor<T> lambda) {
  if (x.rank() < 2) throw DimError("broadcast_scaled: tokens must be [..,N,d]");
  const int d = x.dim(-1), n = x.dim(-2);
  if (lambda.rank() != 1 || lambda.dim(0) != d)
    throw DimError("broadcast_scaled: lambda " + shape_str(lambda.shape()) +
                   " does not match token width " + std::to_string(d));
  const std::int64_t groups = x.numel() / (std::int64_t(n) * d);
  auto means = std::make_shared<std::vector<T>>(groups * d);
  auto xn = x.node(), ln = lambda.node();
  Tensor<T> out = make_op<T>(x.shape(), {x, lambda},
                             [xn, ln, means, groups, n, d](const std::vector<T>& g) {
    std::vector<T> colsum(d);
    for (std::int64_t b = 0; b < groups; ++b) {
      const T* gp = g.data() + b * n * d;
      std::fill(colsum.begin(), colsum.end(), T(0));
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) colsum[c] += gp[i * d + c];
      if (xn->tracked) {
        if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
        T* gx = xn->grad.data() + b * n * d;
        for (int i = 0; i < n; ++i)
          for (int c = 0; c < d; ++c)
            gx[i * d + c] += gp[i * d + c] + ln->value[c] * colsum[c] / n;
      }
      if (ln->tracked) {
        if (ln->grad.empty()) ln->grad.assign(d, T(0));
        for (int c = 0; c < d; ++c) ln->grad[c] += (*means)[b * d + c] * colsum[c];
      }
    }
  });
  for (std::int64_t b = 0; b < groups; ++b) {
    const T* xp = x.data().data() + b * n * d;
    T* mp = means->data() + b * d;
    for (int c = 0; c < d; ++c) mp[c] = T(0);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) mp[c] += xp[i * d + c];
    for (int c = 0; c < d; ++c) mp[c] /= n;
    T* op = out.data().data() + b * n * d;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) op[i * d + c] = xp[i * d + c] + ln->value[c] * mp[c];
  }
  return out;
}

/// Perception-module parameters: channel bottleneck (1x1 conv down, GELU,
/// transposed 1x1 conv up) plus the per-dimension broadcast scaling vector.
template <typename T>
struct AdapterParams {
  Tensor<T> w1, b1;  // down-projection [d, dd], [dd]
  Tensor<T> w2, b2;  // up-projection  [dd, d], [d]  (zero-init: identity adapter)
  Tensor<T> lambda;  // [d]
  int width = 0, down_width = 0;

  static AdapterParams create(ParamStore<T>& ps, const std::string& prefix, int d,
                              double ratio, double lambda_init) {
    AdapterParams p;
    p.width = d;
    p.down_width = std::max(1, static_cast<int>(std::ceil(d * ratio)));
    p.w1 = ps.normal(prefix + ".dp.w", {d, p.down_width}, T(0.02));
    p.b1 = ps.zeros(prefix + ".dp.b", {p.down_width});
    p.w2 = ps.zeros(prefix + ".up.w", {p.down_width, d});
    p.b2 = ps.zeros(prefix + ".up.b", {d});
    p.lambda = ps.constant(prefix + ".lambda", {d}, static_cast<T>(lambda_init));
    return p;
  }

  // W1/b1/W2/b2 of the bottleneck; the "negligible overhead" bound target.
  std::int64_t perception_param_count() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel();
  }
};

/// 1x1 convolution on the channel (last) axis down to ceil(d*ratio) channels.
template <typename T>
Tensor<T> down_project(Tensor<T> x, const AdapterParams<T>& p) {
  if (x.dim(-1) != p.width)
    throw DimError("down_project: channel axis is " + std::to_string(x.dim(-1)) +
                   ", adapter expects " + std::to_string(p.width));
  return linear(x, p.w1, p.b1);
}

/// GELU then transposed 1x1 convolution back to d channels.
template <typename T>
Tensor<T> up_project(Tensor<T> h, const AdapterParams<T>& p) {
  if (h.dim(-1) != p.down_width)
    throw DimError("up_project: channel axis is " + std::to_string(h.dim(-1)) +
                   ", adapter expects " + std::to_string(p.down_width));
  return linear(gelu(h), p.w2, p.b2);
}

/// Full perception module DP -> GELU -> UP; caller adds the result to the
/// block's MLP output.
template <typename T>
Tensor<T> perception(Tensor<T> x, const AdapterParams<T>& p) {
  return up_project(down_project(x, p), p);
}

}  // namespace depthcrf
