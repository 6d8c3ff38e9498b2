#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "depthcrf/grad_check.hpp"
#include "depthcrf/nn_ops.hpp"
#include "depthcrf/tensor.hpp"

namespace dc = depthcrf;
using D = dc::Tensor<double>;

namespace {

D rand_tensor(dc::Shape shape, unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return D::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  D x = rand_tensor({1, 1, 3, 3}, 1);
  D w = D::from_data({1, 1, 1, 1}, {1.0});
  D b = D::zeros({1});
  D y = dc::conv2d(x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (int i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, OnesKernelCenterSum) {
  D x = D::filled({1, 1, 3, 3}, 1.0);
  D w = D::filled({1, 1, 3, 3}, 1.0);
  D y = dc::conv2d(x, w, D{}, 1, 1);
  ASSERT_EQ(y.shape(), (dc::Shape{1, 1, 3, 3}));
  EXPECT_DOUBLE_EQ(y.data()[4], 9.0);  // center
  EXPECT_DOUBLE_EQ(y.data()[0], 4.0);  // corner
}

TEST(Conv2d, ShapeFormula) {
  D x = rand_tensor({1, 4, 8, 8}, 2);
  D w = rand_tensor({8, 4, 3, 3}, 3);
  D y = dc::conv2d(x, w, D{}, 1, 1);
  EXPECT_EQ(y.shape(), (dc::Shape{1, 8, 8, 8}));
  D y2 = dc::conv2d(x, w, D{}, 2, 1);
  EXPECT_EQ(y2.shape(), (dc::Shape{1, 8, 4, 4}));
}

TEST(Conv2d, ChannelMismatchNamesAxis) {
  D x = rand_tensor({1, 3, 4, 4}, 4);
  D w = rand_tensor({2, 4, 3, 3}, 5);
  try {
    dc::conv2d(x, w, D{}, 1, 1);
    FAIL() << "expected DimError";
  } catch (const dc::DimError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos);
  }
}

TEST(Deconv2d, IdentityKernel) {
  D x = rand_tensor({1, 1, 3, 3}, 6);
  D w = D::from_data({1, 1, 1, 1}, {1.0});
  D y = dc::deconv2d(x, w, D{}, 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (int i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Deconv2d, Stride2Expansion) {
  D x = D::filled({1, 1, 1, 1}, 3.5);
  D w = D::filled({1, 1, 2, 2}, 1.0);
  D y = dc::deconv2d(x, w, D{}, 2, 0);
  ASSERT_EQ(y.shape(), (dc::Shape{1, 1, 2, 2}));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.data()[i], 3.5);
}

TEST(Deconv2d, GradientIsConvForward) {
  // the adjoint: d/dx deconv2d(x, w) applied to upstream g equals conv2d(g, w)
  D x = rand_tensor({1, 2, 3, 3}, 7);
  x.set_requires_grad(true);
  D w = rand_tensor({2, 3, 3, 3}, 8);  // [Cin,Cout,kh,kw]
  D y = dc::deconv2d(x, w, D{}, 1, 1);
  D g = rand_tensor(y.shape(), 9);
  D loss = dc::sum_all(dc::mul(y, g));
  dc::backward(loss);
  // same weight tensor read as a conv kernel [Co=2,Ci=3,kh,kw]
  D ref = dc::conv2d(g, w, D{}, 1, 1);
  ASSERT_EQ(x.grad().size(), static_cast<std::size_t>(ref.numel()));
  for (int i = 0; i < ref.numel(); ++i) EXPECT_NEAR(x.grad()[i], ref.data()[i], 1e-12);
}

TEST(Activations, GeluSigmoidPointValues) {
  D x = D::from_data({3}, {0.0, 1.0, -1.0});
  D g = dc::gelu(x);
  EXPECT_DOUBLE_EQ(g.data()[0], 0.0);
  EXPECT_NEAR(g.data()[1], 0.8413447460685429, 1e-12);  // 1 * Phi(1)
  D s = dc::sigmoid(x);
  EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
}

TEST(Activations, SigmoidSaturatesWithoutOverflow) {
  D x = D::from_data({3}, {500.0, 1e4, -1e4});
  D s = dc::sigmoid(x);
  EXPECT_NEAR(s.data()[0], 1.0, 1e-6);
  EXPECT_NEAR(s.data()[1], 1.0, 1e-6);
  EXPECT_NEAR(s.data()[2], 0.0, 1e-6);
  EXPECT_TRUE(std::isfinite(s.data()[1]));
}

TEST(Activations, GeluGradientAtZero) {
  D x = D::zeros({1});
  x.set_requires_grad(true);
  dc::backward(dc::sum_all(dc::gelu(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.5);
}

TEST(Softmax, UniformAndSingleton) {
  D x = D::filled({2, 4}, 3.0);
  D y = dc::softmax_lastdim(x);
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(y.data()[i], 0.25, 1e-12);
  D one = D::from_data({1, 1}, {42.0});
  EXPECT_DOUBLE_EQ(dc::softmax_lastdim(one).data()[0], 1.0);
}

TEST(Softmax, ClosedForm) {
  D x = D::from_data({2}, {0.0, std::log(3.0)});
  D y = dc::softmax_lastdim(x);
  EXPECT_NEAR(y.data()[0], 0.25, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOneAtLargeMagnitude) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> dist(-1e4, 1e4);
  D x = D::zeros({8, 16});
  for (auto& v : x.data()) v = dist(rng);
  D y = dc::softmax_lastdim(x);
  for (int r = 0; r < 8; ++r) {
    double s = 0;
    for (int i = 0; i < 16; ++i) s += y.data()[r * 16 + i];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(AdaptiveAvgPool, IdentityAndMean) {
  D x = rand_tensor({1, 2, 4, 4}, 11);
  D same = dc::adaptive_avg_pool(x, 4, 4);
  for (int i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(same.data()[i], x.data()[i]);

  D q = D::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(dc::adaptive_avg_pool(q, 1, 1).data()[0], 2.5);

  D ones = D::filled({1, 1, 4, 4}, 1.0);
  D p = dc::adaptive_avg_pool(ones, 2, 2);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.data()[i], 1.0);
}

TEST(AdaptiveAvgPool, PreservesGlobalMeanOnEvenBins) {
  D x = rand_tensor({1, 3, 8, 8}, 12);
  D y = dc::adaptive_avg_pool(x, 4, 2);
  double min = 0, mout = 0;
  for (double v : x.data()) min += v;
  for (double v : y.data()) mout += v;
  EXPECT_NEAR(min / x.numel(), mout / y.numel(), 1e-6);
}

TEST(AdaptiveAvgPool, RejectsBadSizes) {
  D x = rand_tensor({1, 1, 4, 4}, 13);
  EXPECT_THROW(dc::adaptive_avg_pool(x, 0, 2), dc::ArgError);
  EXPECT_THROW(dc::adaptive_avg_pool(x, 5, 2), dc::ArgError);
}

TEST(PixelShuffle, DefinitionalLayout) {
  D x = D::from_data({1, 4, 1, 1}, {1, 2, 3, 4});  // channels a,b,c,d
  D y = dc::pixel_shuffle(x, 2);
  ASSERT_EQ(y.shape(), (dc::Shape{1, 1, 2, 2}));
  EXPECT_DOUBLE_EQ(y.data()[0], 1);
  EXPECT_DOUBLE_EQ(y.data()[1], 2);
  EXPECT_DOUBLE_EQ(y.data()[2], 3);
  EXPECT_DOUBLE_EQ(y.data()[3], 4);
}

TEST(PixelShuffle, IdentityAndRoundTrip) {
  D x = rand_tensor({2, 8, 3, 5}, 14);
  D same = dc::pixel_shuffle(x, 1);
  for (int i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(same.data()[i], x.data()[i]);
  D rt = dc::pixel_unshuffle(dc::pixel_shuffle(x, 2), 2);
  for (int i = 0; i < x.numel(); ++i)
    EXPECT_EQ(rt.data()[i], x.data()[i]);  // bit-exact
  EXPECT_THROW(dc::pixel_shuffle(rand_tensor({1, 3, 2, 2}, 15), 2), dc::ArgError);
}

TEST(Backward, SumGivesOnes) {
  D x = rand_tensor({3, 4}, 16);
  x.set_requires_grad(true);
  dc::backward(dc::sum_all(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  D x = rand_tensor({5}, 17);
  x.set_requires_grad(true);
  dc::backward(dc::sum_all(dc::mul(x, x)));
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(x.grad()[i], 2 * x.data()[i], 1e-12);
}

TEST(Backward, FanOutAccumulates) {
  D x = rand_tensor({4}, 18);
  x.set_requires_grad(true);
  D y = dc::mul_scalar(x, 1.0);
  dc::backward(dc::sum_all(dc::add(y, y)));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Backward, RejectsNonScalar) {
  D x = rand_tensor({2, 2}, 19);
  x.set_requires_grad(true);
  EXPECT_THROW(dc::backward(dc::mul(x, x)), dc::ArgError);
}

TEST(Backward, DiamondVisitedOnce) {
  // d/dx of sum((x+x) * x) = 4x; double-visits would inflate it
  D x = rand_tensor({3}, 20);
  x.set_requires_grad(true);
  D two_x = dc::add(x, x);
  dc::backward(dc::sum_all(dc::mul(two_x, x)));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(x.grad()[i], 4 * x.data()[i], 1e-12);
}

TEST(GradCheck, SumIsExact) {
  D x = rand_tensor({4, 3}, 21);
  double err = dc::grad_check<double>([&] { return dc::sum_all(x); }, x);
  EXPECT_LE(err, 1e-7);
}

// Every differentiable primitive at <= 1e-4 relative error on 3 random draws.
TEST(GradCheck, Primitives) {
  for (unsigned seed = 100; seed < 103; ++seed) {
    {
      D x = rand_tensor({2, 3, 5, 4}, seed);
      D w = rand_tensor({4, 3, 3, 3}, seed + 50, 0.5);
      D b = rand_tensor({4}, seed + 60);
      auto f = [&] { return dc::sum_all(dc::gelu(dc::conv2d(x, w, b, 2, 1))); };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "conv2d/x seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f, w), 1e-4) << "conv2d/w seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f, b), 1e-4) << "conv2d/b seed " << seed;
    }
    {
      D x = rand_tensor({1, 3, 3, 3}, seed);
      D w = rand_tensor({3, 2, 2, 2}, seed + 51, 0.5);
      D b = rand_tensor({2}, seed + 61);
      auto f = [&] { return dc::sum_all(dc::sigmoid(dc::deconv2d(x, w, b, 2, 1))); };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "deconv2d/x seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f, w), 1e-4) << "deconv2d/w seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f, b), 1e-4) << "deconv2d/b seed " << seed;
    }
    {
      D x = rand_tensor({3, 7}, seed);
      auto f = [&] {
        D sm = dc::softmax_lastdim(x);
        return dc::sum_all(dc::mul(sm, sm));  // non-uniform upstream
      };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "softmax seed " << seed;
    }
    {
      D x = rand_tensor({1, 2, 5, 7}, seed);
      auto f = [&] { return dc::sum_all(dc::mul(dc::adaptive_avg_pool(x, 3, 4), rand_tensor({1, 2, 3, 4}, 777))); };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "adaptive_avg_pool seed " << seed;
    }
    {
      D x = rand_tensor({1, 8, 2, 3}, seed);
      auto f = [&] { return dc::sum_all(dc::mul(dc::pixel_shuffle(x, 2), rand_tensor({1, 2, 4, 6}, 778))); };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "pixel_shuffle seed " << seed;
    }
    {
      D x = rand_tensor({1, 2, 3, 4}, seed);
      auto f = [&] { return dc::sum_all(dc::mul(dc::bilinear_resize(x, 7, 9), rand_tensor({1, 2, 7, 9}, 779))); };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "bilinear seed " << seed;
    }
    {
      D x = rand_tensor({4, 6}, seed);
      D gm = rand_tensor({6}, seed + 52);
      D bt = rand_tensor({6}, seed + 62);
      auto f = [&] { return dc::sum_all(dc::mul(dc::layer_norm(x, gm, bt), rand_tensor({4, 6}, 780))); };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "layer_norm/x seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f, gm), 1e-4) << "layer_norm/gamma seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f, bt), 1e-4) << "layer_norm/beta seed " << seed;
    }
    {
      D a = rand_tensor({2, 3, 4}, seed);
      D b = rand_tensor({2, 4, 5}, seed + 53);
      D bt = rand_tensor({2, 5, 4}, seed + 54);
      auto f1 = [&] { return dc::sum_all(dc::mul(dc::matmul(a, b), rand_tensor({2, 3, 5}, 781))); };
      auto f2 = [&] { return dc::sum_all(dc::mul(dc::matmul(a, bt, true), rand_tensor({2, 3, 5}, 782))); };
      EXPECT_LE(dc::grad_check<double>(f1, a), 1e-4) << "matmul/a seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f1, b), 1e-4) << "matmul/b seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f2, a), 1e-4) << "matmul_t/a seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f2, bt), 1e-4) << "matmul_t/b seed " << seed;
      D w = rand_tensor({4, 5}, seed + 55);
      auto f3 = [&] { return dc::sum_all(dc::mul(dc::matmul(a, w), rand_tensor({2, 3, 5}, 783))); };
      EXPECT_LE(dc::grad_check<double>(f3, w), 1e-4) << "matmul shared w seed " << seed;
    }
    {
      D x = rand_tensor({5, 3}, seed);
      auto f = [&] { return dc::sum_all(dc::mul(dc::l2_normalize_lastdim(x), rand_tensor({5, 3}, 784))); };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "l2norm seed " << seed;
    }
    {
      D x = rand_tensor({2, 3, 4, 5}, seed);
      auto f = [&] { return dc::sum_all(dc::mul(dc::mean_axis(x, 2), rand_tensor({2, 3, 5}, 785))); };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "mean_axis seed " << seed;
    }
    {
      D yh = rand_tensor({2, 3, 4}, seed);
      D yv = rand_tensor({2, 3, 5}, seed + 56);
      auto f = [&] { return dc::sum_all(dc::mul(dc::add_rowcol_outer(yh, yv), rand_tensor({2, 3, 4, 5}, 786))); };
      EXPECT_LE(dc::grad_check<double>(f, yh), 1e-4) << "outer/yh seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f, yv), 1e-4) << "outer/yv seed " << seed;
    }
    {
      D x = rand_tensor({1, 6, 5, 3}, seed);  // [B,H,W,C]
      auto f = [&] {
        auto wp = dc::window_partition(x, 4, 2);
        D back = dc::window_reverse(wp);
        return dc::sum_all(dc::mul(back, rand_tensor({1, 6, 5, 3}, 787)));
      };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "window seed " << seed;
    }
    {
      D t = rand_tensor({5, 3}, seed);
      auto idx = std::make_shared<std::vector<int>>(std::vector<int>{0, 2, 2, 4, 1});
      auto f = [&] { return dc::sum_all(dc::mul(dc::gather_rows(t, idx), rand_tensor({5, 3}, 788))); };
      EXPECT_LE(dc::grad_check<double>(f, t), 1e-4) << "gather seed " << seed;
    }
    {
      D x = rand_tensor({6}, seed, 0.3);
      auto f = [&] {
        D z = dc::add_scalar(dc::mul(x, x), 0.5);  // positive
        return dc::sum_all(dc::mul(dc::log_op(dc::sqrt_op(z)), rand_tensor({6}, 789)));
      };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "sqrt/log seed " << seed;
    }
    {
      D a = rand_tensor({3, 4}, seed);
      D b = rand_tensor({3, 4}, seed + 57);
      D s = rand_tensor({1}, seed + 58);
      auto f = [&] {
        D c = dc::concat<double>({a, b}, 1);
        return dc::sum_all(dc::mul(dc::scale_by(c, s), rand_tensor({3, 8}, 790)));
      };
      EXPECT_LE(dc::grad_check<double>(f, a), 1e-4) << "concat/a seed " << seed;
      EXPECT_LE(dc::grad_check<double>(f, s), 1e-4) << "scale_by seed " << seed;
    }
    {
      D x = rand_tensor({2, 3, 4, 2}, seed);
      auto f = [&] {
        return dc::sum_all(dc::mul(dc::permute(x, {0, 3, 1, 2}), rand_tensor({2, 2, 3, 4}, 791)));
      };
      EXPECT_LE(dc::grad_check<double>(f, x), 1e-4) << "permute seed " << seed;
    }
  }
}

TEST(WindowPartition, SingleWindowIsInput) {
  D x = rand_tensor({1, 4, 4, 3}, 30);
  auto wp = dc::window_partition(x, 4, 0);
  ASSERT_EQ(wp.windows.shape(), (dc::Shape{1, 16, 3}));
  for (int i = 0; i < x.numel(); ++i) EXPECT_EQ(wp.windows.data()[i], x.data()[i]);
}

TEST(WindowPartition, FourWindowsTile) {
  D x = rand_tensor({1, 8, 8, 2}, 31);
  auto wp = dc::window_partition(x, 4, 0);
  EXPECT_EQ(wp.windows.dim(0), 4);
  D back = dc::window_reverse(wp);
  for (int i = 0; i < x.numel(); ++i) EXPECT_EQ(back.data()[i], x.data()[i]);
}

TEST(WindowPartition, RoundTripBitExactWithShiftAndPad) {
  for (int h : {4, 6, 7}) {
    for (int w : {4, 5, 9}) {
      for (int s : {2, 4}) {
        for (int shift : {0, s / 2}) {
          D x = rand_tensor({2, h, w, 3}, 32 + h * 100 + w * 10 + s + shift);
          auto wp = dc::window_partition(x, s, shift);
          D back = dc::window_reverse(wp);
          ASSERT_EQ(back.shape(), x.shape());
          for (int i = 0; i < x.numel(); ++i)
            ASSERT_EQ(back.data()[i], x.data()[i])
                << "h=" << h << " w=" << w << " S=" << s << " shift=" << shift;
        }
      }
    }
  }
}

TEST(Tensor, InvariantShapeMatchesData) {
  EXPECT_THROW(D::from_data({2, 3}, {1.0, 2.0}), dc::DimError);
  D t = D::zeros({2, 3});
  EXPECT_EQ(t.numel(), 6);
}
