#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "depthcrf/grad_check.hpp"
#include "depthcrf/loss_metrics.hpp"

namespace dc = depthcrf;
using D = dc::Tensor<double>;

namespace {

D rand_depth(dc::Shape shape, unsigned seed, double lo = 0.5, double hi = 10.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  D t = D::zeros(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Naive per-pixel reference, kept independent of MetricAccumulator.
dc::MetricReport loop_metrics(const D& pred, const D& gt, const D& mask,
                              std::pair<double, double> caps) {
  double ar = 0, sr = 0, sq = 0, lsq = 0, d1 = 0, d2 = 0, d3 = 0;
  long k = 0;
  for (int i = 0; i < pred.numel(); ++i) {
    if (mask.data()[i] <= 0) continue;
    double d = std::min(std::max(pred.data()[i], caps.first), caps.second);
    double ds = std::min(std::max(gt.data()[i], caps.first), caps.second);
    ar += std::fabs(d - ds) / ds;
    sr += (d - ds) * (d - ds) / ds;
    sq += (d - ds) * (d - ds);
    lsq += (std::log(d) - std::log(ds)) * (std::log(d) - std::log(ds));
    double r = std::max(d / ds, ds / d);
    if (r < 1.25) d1++;
    if (r < 1.25 * 1.25) d2++;
    if (r < 1.25 * 1.25 * 1.25) d3++;
    ++k;
  }
  dc::MetricReport m;
  m.abs_rel = ar / k;
  m.sq_rel = sr / k;
  m.rmse = std::sqrt(sq / k);
  m.log_rmse = std::sqrt(lsq / k);
  m.d1 = d1 / k;
  m.d2 = d2 / k;
  m.d3 = d3 / k;
  m.valid_pixel_count = k;
  return m;
}

}  // namespace

TEST(Silog, PerfectPredictionIsZero) {
  D gt = rand_depth({1, 1, 4, 4}, 1);
  D mask = D::filled(gt.shape(), 1.0);
  EXPECT_DOUBLE_EQ(dc::silog_loss(gt, gt, mask).item(), 0.0);
}

TEST(Silog, UniformScaleClosedForm) {
  // pred = c*gt  ->  L = alpha * |ln c| * sqrt(1 - lambda)
  D gt = rand_depth({1, 1, 5, 5}, 2);
  D mask = D::filled(gt.shape(), 1.0);
  for (double c : {0.5, 2.0, std::exp(1.0)}) {
    D pred = dc::mul_scalar(gt, c);
    double expect = 10.0 * std::fabs(std::log(c)) * std::sqrt(0.15);
    EXPECT_NEAR(dc::silog_loss(pred, gt, mask).item(), expect, 1e-6) << "c=" << c;
  }
  // the spec's rounded display of the same closed form
  D pred2 = dc::mul_scalar(gt, 2.0);
  EXPECT_NEAR(dc::silog_loss(pred2, gt, mask).item(), 2.6846, 1e-4);
}

TEST(Silog, LambdaOneIsFullyScaleInvariant) {
  D gt = rand_depth({1, 1, 6, 6}, 3);
  D mask = D::filled(gt.shape(), 1.0);
  dc::LossConfig cfg;
  cfg.lambda = 1.0;
  // zero up to per-pixel log() rounding noise
  for (double c : {0.25, 3.0, 7.7})
    EXPECT_LE(dc::silog_loss(dc::mul_scalar(gt, c), gt, mask, cfg).item(), 1e-9);
}

TEST(Silog, PermutationInvariant) {
  D gt = rand_depth({8}, 4);
  D pred = rand_depth({8}, 5);
  D mask = D::filled({8}, 1.0);
  double base = dc::silog_loss(pred, gt, mask).item();
  std::vector<int> perm{3, 1, 7, 0, 5, 2, 6, 4};
  D gt2 = D::zeros({8}), pred2 = D::zeros({8});
  for (int i = 0; i < 8; ++i) {
    gt2.data()[i] = gt.data()[perm[i]];
    pred2.data()[i] = pred.data()[perm[i]];
  }
  EXPECT_NEAR(dc::silog_loss(pred2, gt2, mask).item(), base, 1e-12);
}

TEST(Silog, MaskedPixelsAreExcluded) {
  D gt = D::from_data({4}, {2.0, 0.0, 3.0, -1.0});  // invalid entries present
  D pred = D::from_data({4}, {2.0, 5.0, 3.0, 9.0});
  D mask = dc::make_valid_mask(gt, 1e-3, 100.0);
  EXPECT_DOUBLE_EQ(mask.data()[1], 0.0);
  EXPECT_DOUBLE_EQ(mask.data()[3], 0.0);
  EXPECT_DOUBLE_EQ(dc::silog_loss(pred, gt, mask).item(), 0.0);  // valid ones match
}

TEST(Silog, EmptyMaskThrows) {
  D gt = rand_depth({4}, 6);
  D pred = rand_depth({4}, 7);
  D mask = D::zeros({4});
  EXPECT_THROW(dc::silog_loss(pred, gt, mask), dc::EvalError);
}

TEST(Silog, GradCheck) {
  for (unsigned seed = 40; seed < 43; ++seed) {
    D gt = rand_depth({1, 1, 4, 4}, seed);
    D pred = rand_depth({1, 1, 4, 4}, seed + 10);
    D mask = D::filled(gt.shape(), 1.0);
    mask.data()[3] = 0.0;
    auto f = [&] { return dc::silog_loss(pred, gt, mask); };
    EXPECT_LE(dc::grad_check<double>(f, pred), 1e-4) << "seed " << seed;
  }
}

TEST(Metrics, PerfectPrediction) {
  D gt = rand_depth({1, 1, 4, 4}, 8);
  D mask = D::filled(gt.shape(), 1.0);
  auto m = dc::eval_metrics(gt, gt, mask, {1e-3, 80.0});
  EXPECT_DOUBLE_EQ(m.abs_rel, 0.0);
  EXPECT_DOUBLE_EQ(m.rmse, 0.0);
  EXPECT_DOUBLE_EQ(m.d1, 1.0);
  EXPECT_DOUBLE_EQ(m.d3, 1.0);
  EXPECT_EQ(m.valid_pixel_count, 16);
}

TEST(Metrics, ThresholdBoundaries) {
  D pred = D::from_data({3}, {1.0, 2.0, 4.0});
  D gt = D::from_data({3}, {1.0, 2.6, 4.0});
  D mask = D::filled({3}, 1.0);
  auto m = dc::eval_metrics(pred, gt, mask, {1e-3, 80.0});
  EXPECT_NEAR(m.d1, 2.0 / 3.0, 1e-12);  // ratio 1.3 fails 1.25
  EXPECT_DOUBLE_EQ(m.d2, 1.0);          // 1.3 < 1.5625
  EXPECT_DOUBLE_EQ(m.d3, 1.0);
}

TEST(Metrics, SinglePixelArithmetic) {
  D pred = D::from_data({1}, {2.0});
  D gt = D::from_data({1}, {1.0});
  D mask = D::filled({1}, 1.0);
  auto m = dc::eval_metrics(pred, gt, mask, {1e-3, 80.0});
  EXPECT_DOUBLE_EQ(m.abs_rel, 1.0);
  EXPECT_DOUBLE_EQ(m.sq_rel, 1.0);
  EXPECT_DOUBLE_EQ(m.rmse, 1.0);
}

TEST(Metrics, MatchesLoopOracle) {
  for (unsigned seed = 50; seed < 60; ++seed) {
    D pred = rand_depth({1, 1, 8, 8}, seed, 0.1, 90.0);
    D gt = rand_depth({1, 1, 8, 8}, seed + 100, 0.1, 90.0);
    D mask = D::zeros(gt.shape());
    std::mt19937_64 rng(seed + 200);
    for (auto& v : mask.data()) v = (rng() % 4) ? 1.0 : 0.0;
    auto a = dc::eval_metrics(pred, gt, mask, {0.5, 80.0});
    auto b = loop_metrics(pred, gt, mask, {0.5, 80.0});
    EXPECT_NEAR(a.abs_rel, b.abs_rel, 1e-7);
    EXPECT_NEAR(a.sq_rel, b.sq_rel, 1e-7);
    EXPECT_NEAR(a.rmse, b.rmse, 1e-7);
    EXPECT_NEAR(a.log_rmse, b.log_rmse, 1e-7);
    EXPECT_NEAR(a.d1, b.d1, 1e-12);
    EXPECT_NEAR(a.d2, b.d2, 1e-12);
    EXPECT_NEAR(a.d3, b.d3, 1e-12);
    EXPECT_LE(a.d1, a.d2);
    EXPECT_LE(a.d2, a.d3);
    EXPECT_LE(a.d3, 1.0);
  }
}

TEST(Metrics, EmptyMaskThrows) {
  D gt = rand_depth({4}, 61);
  EXPECT_THROW(dc::eval_metrics(gt, gt, D::zeros({4}), {1e-3, 80.0}), dc::EvalError);
}

TEST(Metrics, CsvAndKvFormats) {
  dc::MetricReport m;
  m.abs_rel = 0.5;
  m.valid_pixel_count = 7;
  EXPECT_EQ(dc::MetricReport::csv_header(), "abs_rel,sq_rel,rmse,log_rmse,d1,d2,d3,k");
  EXPECT_NE(m.to_csv_row().find("0.5"), std::string::npos);
  EXPECT_NE(m.to_kv().find("k=7"), std::string::npos);
}
