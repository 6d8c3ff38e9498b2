#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>

#include "depthcrf/tensor.hpp"

namespace depthcrf {

struct LossConfig {
  double lambda = 0.85;   // variance minimization factor
  double alpha = 10.0;    // scale constant
  double min_depth = 1e-3;
};

/// Valid-pixel mask: gt > min_depth and gt < cap, as a 0/1 tensor.
template <typename T>
Tensor<T> make_valid_mask(const Tensor<T>& gt, T min_depth, T cap) {
  Tensor<T> m = Tensor<T>::zeros(gt.shape());
  for (std::int64_t i = 0; i < gt.numel(); ++i)
    m.data()[i] = (gt.data()[i] > min_depth && gt.data()[i] < cap) ? T(1) : T(0);
  return m;
}

/// Scale-invariant log loss over the K mask-valid pixels:
///   L = alpha * sqrt( (1/K) sum dl_i^2 - (lambda/K^2) (sum dl_i)^2 ),
/// dl_i = log pred_i - log gt_i. Differentiable w.r.t. pred.
template <typename T>
Tensor<T> silog_loss(Tensor<T> pred, Tensor<T> gt, Tensor<T> mask, const LossConfig& cfg = {}) {
  check_same_shape(pred, gt, "silog_loss");
  check_same_shape(pred, mask, "silog_loss");
  T k = 0;
  for (T v : mask.data()) k += v;
  if (k < T(1)) throw EvalError("silog_loss: no valid pixels under mask");

  // keep log() finite on pixels the mask excludes
  Tensor<T> gt_safe = Tensor<T>::zeros(gt.shape());
  for (std::int64_t i = 0; i < gt.numel(); ++i)
    gt_safe.data()[i] = mask.data()[i] > T(0) ? gt.data()[i] : T(1);

  Tensor<T> dl = mul(sub(log_op(pred), log_op(gt_safe)), mask);
  // centered form: mean dl^2 - lambda*mean(dl)^2 == var(dl) + (1-lambda)*mean(dl)^2
  Tensor<T> m = mul_scalar(sum_all(dl), T(1) / k);
  Tensor<T> dev = sub(dl, scale_by(mask, m));  // zero off-mask
  Tensor<T> arg = add(mul_scalar(sum_all(mul(dev, dev)), T(1) / k),
                      mul_scalar(mul(m, m), T(1) - static_cast<T>(cfg.lambda)));
  return mul_scalar(sqrt_op(clamp_min(arg, T(0))), static_cast<T>(cfg.alpha));
}

struct MetricReport {
  double abs_rel = 0, sq_rel = 0, rmse = 0, log_rmse = 0;
  double d1 = 0, d2 = 0, d3 = 0;
  std::int64_t valid_pixel_count = 0;

  static std::string csv_header() { return "abs_rel,sq_rel,rmse,log_rmse,d1,d2,d3,k"; }

  std::string to_csv_row() const {
    std::ostringstream os;
    os.precision(9);
    os << abs_rel << ',' << sq_rel << ',' << rmse << ',' << log_rmse << ',' << d1 << ',' << d2
       << ',' << d3 << ',' << valid_pixel_count;
    return os.str();
  }

  std::string to_kv() const {
    std::ostringstream os;
    os.precision(9);
    os << "abs_rel=" << abs_rel << "\nsq_rel=" << sq_rel << "\nrmse=" << rmse
       << "\nlog_rmse=" << log_rmse << "\nd1=" << d1 << "\nd2=" << d2 << "\nd3=" << d3
       << "\nk=" << valid_pixel_count << "\n";
    return os.str();
  }
};

/// Accumulates the seven depth metrics over masked pixels; pred and gt are
/// clamped to [caps.first, caps.second] first.
template <typename T>
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::pair<T, T> caps) : caps_(caps) {}

  void add(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
      if (mask.data()[i] <= T(0)) continue;
      const double d = std::clamp<double>(pred.data()[i], caps_.first, caps_.second);
      const double ds = std::clamp<double>(gt.data()[i], caps_.first, caps_.second);
      const double diff = d - ds;
      abs_rel_ += std::abs(diff) / ds;
      sq_rel_ += diff * diff / ds;
      sq_ += diff * diff;
      const double dl = std::log(d) - std::log(ds);
      log_sq_ += dl * dl;
      const double ratio = std::max(d / ds, ds / d);
      d1_ += ratio < 1.25;
      d2_ += ratio < 1.25 * 1.25;
      d3_ += ratio < 1.25 * 1.25 * 1.25;
      ++k_;
    }
  }

  MetricReport report() const {
    if (k_ == 0) throw EvalError("eval_metrics: no valid pixels under mask");
    MetricReport r;
    const double n = static_cast<double>(k_);
    r.abs_rel = abs_rel_ / n;
    r.sq_rel = sq_rel_ / n;
    r.rmse = std::sqrt(sq_ / n);
    r.log_rmse = std::sqrt(log_sq_ / n);
    r.d1 = d1_ / n;
    r.d2 = d2_ / n;
    r.d3 = d3_ / n;
    r.valid_pixel_count = k_;
    return r;
  }

 private:
  std::pair<T, T> caps_;
  double abs_rel_ = 0, sq_rel_ = 0, sq_ = 0, log_sq_ = 0, d1_ = 0, d2_ = 0, d3_ = 0;
  std::int64_t k_ = 0;
};

template <typename T>
MetricReport eval_metrics(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask,
                          std::pair<T, T> caps) {
  check_same_shape(pred, gt, "eval_metrics");
  check_same_shape(pred, mask, "eval_metrics");
  MetricAccumulator<T> acc(caps);
  acc.add(pred, gt, mask);
  return acc.report();
}

}  // namespace depthcrf
