#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "depthcrf/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace depthcrf {

template <typename T>
Tensor<T> bias_add_channels(Tensor<T> x, Tensor<T> b);

inline void set_device_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(n > 0 ? n : 1);
#else
  (void)n;
#endif
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D convolution, NCHW. x:[B,Cin,H,W] w:[Cout,Cin,kh,kw] b:[Cout] or empty.
/// Output spatial size: (H + 2*pad - kh)/stride + 1.
template <typename T>
Tensor<T> conv2d(Tensor<T> x, Tensor<T> w, Tensor<T> b, int stride = 1, int pad = 0) {
  if (x.rank() != 4) throw DimError("conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw DimError("conv2d: weight must be [Co,Ci,kh,kw], got " + shape_str(w.shape()));
  const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Ci)
    throw DimError("conv2d: channel mismatch on axis 1: input has " + std::to_string(Ci) +
                   ", weight expects " + std::to_string(w.dim(1)));
  if (stride < 1) throw ArgError("conv2d: stride must be >= 1");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho < 1 || Wo < 1)
    throw DimError("conv2d: kernel " + shape_str(w.shape()) + " does not fit input " +
                   shape_str(x.shape()) + " on axes [2,3]");

  opcount::add_macs(std::int64_t(B) * Co * Ho * Wo * Ci * kh * kw);

  auto xn = x.node(), wn = w.node();
  Tensor<T> out = make_op<T>(
      {B, Co, Ho, Wo}, {x, w},
      [xn, wn, B, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad](const std::vector<T>& g) {
        opcount::add_macs(2 * std::int64_t(B) * Co * Ho * Wo * Ci * kh * kw);
        if (xn->tracked) {
          if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
#ifdef _OPENMP
#pragma omp parallel for collapse(2) if (std::int64_t(B) * Ci * H * W > 16384)
#endif
          for (int bi = 0; bi < B; ++bi)
            for (int ci = 0; ci < Ci; ++ci) {
              T* gx = xn->grad.data() + (std::int64_t(bi) * Ci + ci) * H * W;
              for (int ih = 0; ih < H; ++ih)
                for (int iw = 0; iw < W; ++iw) {
                  T acc = 0;
                  for (int co = 0; co < Co; ++co) {
                    const T* wp = wn->value.data() + (std::int64_t(co) * Ci + ci) * kh * kw;
                    const T* gp = g.data() + (std::int64_t(bi) * Co + co) * Ho * Wo;
                    for (int r = 0; r < kh; ++r) {
                      int num = ih + pad - r;
                      if (num < 0 || num % stride) continue;
                      int oh = num / stride;
                      if (oh >= Ho) continue;
                      for (int c = 0; c < kw; ++c) {
                        int numw = iw + pad - c;
                        if (numw < 0 || numw % stride) continue;
                        int ow = numw / stride;
                        if (ow >= Wo) continue;
                        acc += gp[oh * Wo + ow] * wp[r * kw + c];
                      }
                    }
                  }
                  gx[ih * W + iw] += acc;
                }
            }
        }
        if (wn->tracked) {
          if (wn->grad.empty()) wn->grad.assign(wn->value.size(), T(0));
#ifdef _OPENMP
#pragma omp parallel for if (std::int64_t(Co) * Ci * kh * kw > 4096)
#endif
          for (int co = 0; co < Co; ++co)
            for (int ci = 0; ci < Ci; ++ci)
              for (int r = 0; r < kh; ++r)
                for (int c = 0; c < kw; ++c) {
                  T acc = 0;
                  for (int bi = 0; bi < B; ++bi) {
                    const T* gp = g.data() + (std::int64_t(bi) * Co + co) * Ho * Wo;
                    const T* xp = xn->value.data() + (std::int64_t(bi) * Ci + ci) * H * W;
                    for (int oh = 0; oh < Ho; ++oh) {
                      int ih = oh * stride - pad + r;
                      if (ih < 0 || ih >= H) continue;
                      for (int ow = 0; ow < Wo; ++ow) {
                        int iw = ow * stride - pad + c;
                        if (iw < 0 || iw >= W) continue;
                        acc += gp[oh * Wo + ow] * xp[ih * W + iw];
                      }
                    }
                  }
                  wn->grad[((std::int64_t(co) * Ci + ci) * kh + r) * kw + c] += acc;
                }
        }
      });

#ifdef _OPENMP
#pragma omp parallel for collapse(2) if (std::int64_t(B) * Co * Ho * Wo > 16384)
#endif
  for (int bi = 0; bi < B; ++bi)
    for (int co = 0; co < Co; ++co) {
      T* op = out.data().data() + (std::int64_t(bi) * Co + co) * Ho * Wo;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          T acc = 0;
          for (int ci = 0; ci < Ci; ++ci) {
            const T* xp = x.data().data() + (std::int64_t(bi) * Ci + ci) * H * W;
            const T* wp = w.data().data() + (std::int64_t(co) * Ci + ci) * kh * kw;
            for (int r = 0; r < kh; ++r) {
              int ih = oh * stride - pad + r;
              if (ih < 0 || ih >= H) continue;
              for (int c = 0; c < kw; ++c) {
                int iw = ow * stride - pad + c;
                if (iw < 0 || iw >= W) continue;
                acc += xp[ih * W + iw] * wp[r * kw + c];
              }
            }
          }
          op[oh * Wo + ow] = acc;
        }
    }
  if (b.defined()) return bias_add_channels(out, b);
  return out;
}

/// Transposed 2-D convolution (adjoint of conv2d). x:[B,Cin,H,W]
/// w:[Cin,Cout,kh,kw]. Output spatial size: (H-1)*stride - 2*pad + kh.
template <typename T>
Tensor<T> deconv2d(Tensor<T> x, Tensor<T> w, Tensor<T> b, int stride = 1, int pad = 0) {
  if (x.rank() != 4) throw DimError("deconv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw DimError("deconv2d: weight must be [Ci,Co,kh,kw], got " + shape_str(w.shape()));
  const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != Ci)
    throw DimError("deconv2d: channel mismatch on axis 1: input has " + std::to_string(Ci) +
                   ", weight expects " + std::to_string(w.dim(0)));
  if (stride < 1) throw ArgError("deconv2d: stride must be >= 1");
  const int Ho = (H - 1) * stride - 2 * pad + kh;
  const int Wo = (W - 1) * stride - 2 * pad + kw;
  if (Ho < 1 || Wo < 1) throw DimError("deconv2d: empty output for input " + shape_str(x.shape()));

  opcount::add_macs(std::int64_t(B) * Ci * H * W * Co * kh * kw);

  auto xn = x.node(), wn = w.node();
  Tensor<T> out = make_op<T>(
      {B, Co, Ho, Wo}, {x, w},
      [xn, wn, B, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad](const std::vector<T>& g) {
        opcount::add_macs(2 * std::int64_t(B) * Ci * H * W * Co * kh * kw);
        if (xn->tracked) {
          // gx = conv2d-forward of g with the same kernel
          if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
#ifdef _OPENMP
#pragma omp parallel for collapse(2) if (std::int64_t(B) * Ci * H * W > 16384)
#endif
          for (int bi = 0; bi < B; ++bi)
            for (int ci = 0; ci < Ci; ++ci) {
              T* gx = xn->grad.data() + (std::int64_t(bi) * Ci + ci) * H * W;
              for (int ih = 0; ih < H; ++ih)
                for (int iw = 0; iw < W; ++iw) {
                  T acc = 0;
                  for (int co = 0; co < Co; ++co) {
                    const T* gp = g.data() + (std::int64_t(bi) * Co + co) * Ho * Wo;
                    const T* wp = wn->value.data() + (std::int64_t(ci) * Co + co) * kh * kw;
                    for (int r = 0; r < kh; ++r) {
                      int oh = ih * stride - pad + r;
                      if (oh < 0 || oh >= Ho) continue;
                      for (int c = 0; c < kw; ++c) {
                        int ow = iw * stride - pad + c;
                        if (ow < 0 || ow >= Wo) continue;
                        acc += gp[oh * Wo + ow] * wp[r * kw + c];
                      }
                    }
                  }
                  gx[ih * W + iw] += acc;
                }
            }
        }
        if (wn->tracked) {
          if (wn->grad.empty()) wn->grad.assign(wn->value.size(), T(0));
#ifdef _OPENMP
#pragma omp parallel for if (std::int64_t(Ci) * Co * kh * kw > 4096)
#endif
          for (int ci = 0; ci < Ci; ++ci)
            for (int co = 0; co < Co; ++co)
              for (int r = 0; r < kh; ++r)
                for (int c = 0; c < kw; ++c) {
                  T acc = 0;
                  for (int bi = 0; bi < B; ++bi) {
                    const T* xp = xn->value.data() + (std::int64_t(bi) * Ci + ci) * H * W;
                    const T* gp = g.data() + (std::int64_t(bi) * Co + co) * Ho * Wo;
                    for (int ih = 0; ih < H; ++ih) {
                      int oh = ih * stride - pad + r;
                      if (oh < 0 || oh >= Ho) continue;
                      for (int iw = 0; iw < W; ++iw) {
                        int ow = iw * stride - pad + c;
                        if (ow < 0 || ow >= Wo) continue;
                        acc += xp[ih * W + iw] * gp[oh * Wo + ow];
                      }
                    }
                  }
                  wn->grad[((std::int64_t(ci) * Co + co) * kh + r) * kw + c] += acc;
                }
        }
      });

  for (int bi = 0; bi < B; ++bi)
    for (int ci = 0; ci < Ci; ++ci) {
      const T* xp = x.data().data() + (std::int64_t(bi) * Ci + ci) * H * W;
      for (int co = 0; co < Co; ++co) {
        T* op = out.data().data() + (std::int64_t(bi) * Co + co) * Ho * Wo;
        const T* wp = w.data().data() + (std::int64_t(ci) * Co + co) * kh * kw;
        for (int ih = 0; ih < H; ++ih)
          for (int iw = 0; iw < W; ++iw) {
            const T xv = xp[ih * W + iw];
            if (xv == T(0)) continue;
            for (int r = 0; r < kh; ++r) {
              int oh = ih * stride - pad + r;
              if (oh < 0 || oh >= Ho) continue;
              for (int c = 0; c < kw; ++c) {
                int ow = iw * stride - pad + c;
                if (ow < 0 || ow >= Wo) continue;
                op[oh * Wo + ow] += xv * wp[r * kw + c];
              }
            }
          }
      }
    }
  if (b.defined()) return bias_add_channels(out, b);
  return out;
}

template <typename T>
Tensor<T> bias_add_channels(Tensor<T> x, Tensor<T> b) {
  if (x.rank() != 4) throw DimError("bias_add_channels: input must be [B,C,H,W]");
  const int B = x.dim(0), C = x.dim(1);
  const std::int64_t hw = std::int64_t(x.dim(2)) * x.dim(3);
  if (b.rank() != 1 || b.dim(0) != C)
    throw DimError("bias_add_channels: bias " + shape_str(b.shape()) +
                   " does not match channel axis 1 of " + shape_str(x.shape()));
  auto xn = x.node(), bn = b.node();
  Tensor<T> out = make_op<T>(x.shape(), {x, b}, [xn, bn, B, C, hw](const std::vector<T>& g) {
    if (xn->tracked) xn->accum_grad(g);
    if (bn->tracked) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), T(0));
      for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
          const T* gp = g.data() + (std::int64_t(bi) * C + c) * hw;
          T acc = 0;
          for (std::int64_t i = 0; i < hw; ++i) acc += gp[i];
          bn->grad[c] += acc;
        }
    }
  });
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      const T* xp = x.data().data() + (std::int64_t(bi) * C + c) * hw;
      T* op = out.data().data() + (std::int64_t(bi) * C + c) * hw;
      const T bv = b.data()[c];
      for (std::int64_t i = 0; i < hw; ++i) op[i] = xp[i] + bv;
    }
  return out;
}

template <typename T>
Tensor<T> bias_add_lastdim(Tensor<T> x, Tensor<T> b) {
  const int d = x.dim(-1);
  if (b.rank() != 1 || b.dim(0) != d)
    throw DimError("bias_add_lastdim: bias " + shape_str(b.shape()) +
                   " does not match last axis of " + shape_str(x.shape()));
  const std::int64_t rows = x.numel() / d;
  auto xn = x.node(), bn = b.node();
  Tensor<T> out = make_op<T>(x.shape(), {x, b}, [xn, bn, rows, d](const std::vector<T>& g) {
    if (xn->tracked) xn->accum_grad(g);
    if (bn->tracked) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), T(0));
      for (std::int64_t r = 0; r < rows; ++r)
        for (int i = 0; i < d; ++i) bn->grad[i] += g[r * d + i];
    }
  });
  for (std::int64_t r = 0; r < rows; ++r)
    for (int i = 0; i < d; ++i) out.data()[r * d + i] = x.data()[r * d + i] + b.data()[i];
  return out;
}

/// Token-wise affine map: x:[...,din] @ w:[din,dout] + b.
template <typename T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> b) {
  Tensor<T> y = matmul(x, w);
  if (b.defined()) y = bias_add_lastdim(y, b);
  return y;
}

/// Layer normalization over the last dimension with learnable affine.
template <typename T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta, T eps = T(1e-5)) {
  const int d = x.dim(-1);
  if (gamma.dim(0) != d || beta.dim(0) != d)
    throw DimError("layer_norm: affine params do not match last axis of " + shape_str(x.shape()));
  const std::int64_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_sigma = std::make_shared<std::vector<T>>(rows);
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  Tensor<T> out = make_op<T>(x.shape(), {x, gamma, beta},
                             [xn, gn, bn, xhat, inv_sigma, rows, d](const std::vector<T>& g) {
    if (bn->tracked) {
      if (bn->grad.empty()) bn->grad.assign(d, T(0));
      for (std::int64_t r = 0; r < rows; ++r)
        for (int i = 0; i < d; ++i) bn->grad[i] += g[r * d + i];
    }
    if (gn->tracked) {
      if (gn->grad.empty()) gn->grad.assign(d, T(0));
      for (std::int64_t r = 0; r < rows; ++r)
        for (int i = 0; i < d; ++i) gn->grad[i] += g[r * d + i] * (*xhat)[r * d + i];
    }
    if (xn->tracked) {
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
      std::vector<T> gg(d);
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* xh = xhat->data() + r * d;
        const T* gr = g.data() + r * d;
        T m1 = 0, m2 = 0;
        for (int i = 0; i < d; ++i) {
          gg[i] = gr[i] * gn->value[i];
          m1 += gg[i];
          m2 += gg[i] * xh[i];
        }
        m1 /= d;
        m2 /= d;
        const T is = (*inv_sigma)[r];
        T* gx = xn->grad.data() + r * d;
        for (int i = 0; i < d; ++i) gx[i] += is * (gg[i] - m1 - xh[i] * m2);
      }
    }
  });
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xp = x.data().data() + r * d;
    T mu = 0;
    for (int i = 0; i < d; ++i) mu += xp[i];
    mu /= d;
    T var = 0;
    for (int i = 0; i < d; ++i) var += (xp[i] - mu) * (xp[i] - mu);
    var /= d;
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    T* o = out.data().data() + r * d;
    T* xh = xhat->data() + r * d;
    for (int i = 0; i < d; ++i) {
      xh[i] = (xp[i] - mu) * is;
      o[i] = gamma.data()[i] * xh[i] + beta.data()[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

/// Adaptive average pooling; bin i spans [floor(i*H/out), ceil((i+1)*H/out)).
template <typename T>
Tensor<T> adaptive_avg_pool(Tensor<T> x, int oh, int ow) {
  if (x.rank() != 4) throw DimError("adaptive_avg_pool: input must be [B,C,H,W]");
  if (oh < 1 || ow < 1) throw ArgError("adaptive_avg_pool: output size must be positive");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (oh > H || ow > W)
    throw ArgError("adaptive_avg_pool: output " + std::to_string(oh) + "x" + std::to_string(ow) +
                   " exceeds input " + std::to_string(H) + "x" + std::to_string(W));
  auto bin = [](int i, int in, int out) {
    int lo = (i * in) / out;
    int hi = ((i + 1) * in + out - 1) / out;
    return std::pair<int, int>(lo, hi);
  };
  auto xn = x.node();
  Tensor<T> out = make_op<T>({B, C, oh, ow}, {x},
                             [xn, bin, B, C, H, W, oh, ow](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (int bc = 0; bc < B * C; ++bc) {
      T* gx = xn->grad.data() + std::int64_t(bc) * H * W;
      const T* gp = g.data() + std::int64_t(bc) * oh * ow;
      for (int i = 0; i < oh; ++i) {
        auto [h0, h1] = bin(i, H, oh);
        for (int j = 0; j < ow; ++j) {
          auto [w0, w1] = bin(j, W, ow);
          const T gv = gp[i * ow + j] / static_cast<T>((h1 - h0) * (w1 - w0));
          for (int ih = h0; ih < h1; ++ih)
            for (int iw = w0; iw < w1; ++iw) gx[ih * W + iw] += gv;
        }
      }
    }
  });
  for (int bc = 0; bc < B * C; ++bc) {
    const T* xp = x.data().data() + std::int64_t(bc) * H * W;
    T* op = out.data().data() + std::int64_t(bc) * oh * ow;
    for (int i = 0; i < oh; ++i) {
      auto [h0, h1] = bin(i, H, oh);
      for (int j = 0; j < ow; ++j) {
        auto [w0, w1] = bin(j, W, ow);
        T acc = 0;
        for (int ih = h0; ih < h1; ++ih)
          for (int iw = w0; iw < w1; ++iw) acc += xp[ih * W + iw];
        op[i * ow + j] = acc / static_cast<T>((h1 - h0) * (w1 - w0));
      }
    }
  }
  return out;
}

/// Bilinear resize (align_corners = false).
template <typename T>
Tensor<T> bilinear_resize(Tensor<T> x, int oh, int ow) {
  if (x.rank() != 4) throw DimError("bilinear_resize: input must be [B,C,H,W]");
  if (oh < 1 || ow < 1) throw ArgError("bilinear_resize: output size must be positive");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto taps = [](int out, int in) {
    std::vector<std::tuple<int, int, T>> v(out);  // (i0, i1, frac)
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) * scale - 0.5;
      src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
      int i0 = static_cast<int>(src);
      int i1 = std::min(i0 + 1, in - 1);
      v[o] = {i0, i1, static_cast<T>(src - i0)};
    }
    return v;
  };
  auto th = std::make_shared<std::vector<std::tuple<int, int, T>>>(taps(oh, H));
  auto tw = std::make_shared<std::vector<std::tuple<int, int, T>>>(taps(ow, W));
  auto xn = x.node();
  Tensor<T> out = make_op<T>({B, C, oh, ow}, {x},
                             [xn, th, tw, B, C, H, W, oh, ow](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (int bc = 0; bc < B * C; ++bc) {
      T* gx = xn->grad.data() + std::int64_t(bc) * H * W;
      const T* gp = g.data() + std::int64_t(bc) * oh * ow;
      for (int i = 0; i < oh; ++i) {
        auto [h0, h1, fh] = (*th)[i];
        for (int j = 0; j < ow; ++j) {
          auto [w0, w1, fw] = (*tw)[j];
          const T gv = gp[i * ow + j];
          gx[h0 * W + w0] += gv * (1 - fh) * (1 - fw);
          gx[h0 * W + w1] += gv * (1 - fh) * fw;
          gx[h1 * W + w0] += gv * fh * (1 - fw);
          gx[h1 * W + w1] += gv * fh * fw;
        }
      }
    }
  });
  for (int bc = 0; bc < B * C; ++bc) {
    const T* xp = x.data().data() + std::int64_t(bc) * H * W;
    T* op = out.data().data() + std::int64_t(bc) * oh * ow;
    for (int i = 0; i < oh; ++i) {
      auto [h0, h1, fh] = (*th)[i];
      for (int j = 0; j < ow; ++j) {
        auto [w0, w1, fw] = (*tw)[j];
        op[i * ow + j] = xp[h0 * W + w0] * (1 - fh) * (1 - fw) + xp[h0 * W + w1] * (1 - fh) * fw +
                         xp[h1 * W + w0] * fh * (1 - fw) + xp[h1 * W + w1] * fh * fw;
      }
    }
  }
  return out;
}

/// Channel-to-space rearrangement: [B,C*r*r,H,W] -> [B,C,rH,rW].
template <typename T>
Tensor<T> pixel_shuffle(Tensor<T> x, int r) {
  if (x.rank() != 4) throw DimError("pixel_shuffle: input must be [B,C,H,W]");
  if (r < 1) throw ArgError("pixel_shuffle: factor must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % (r * r) != 0)
    throw ArgError("pixel_shuffle: channels " + std::to_string(C) + " not divisible by r^2=" +
                   std::to_string(r * r));
  const int Co = C / (r * r), Ho = H * r, Wo = W * r;
  auto xn = x.node();
  Tensor<T> out = make_op<T>({B, Co, Ho, Wo}, {x},
                             [xn, B, C, H, W, Co, Ho, Wo, r](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (int bi = 0; bi < B; ++bi)
      for (int c = 0; c < Co; ++c)
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j) {
            int ci = c * r * r + (i % r) * r + (j % r);
            xn->grad[((std::int64_t(bi) * C + ci) * H + i / r) * W + j / r] +=
                g[((std::int64_t(bi) * Co + c) * Ho + i) * Wo + j];
          }
  });
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < Co; ++c)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          int ci = c * r * r + (i % r) * r + (j % r);
          out.data()[((std::int64_t(bi) * Co + c) * Ho + i) * Wo + j] =
              x.data()[((std::int64_t(bi) * C + ci) * H + i / r) * W + j / r];
        }
  return out;
}

/// Inverse of pixel_shuffle: [B,C,rH,rW] -> [B,C*r*r,H,W].
template <typename T>
Tensor<T> pixel_unshuffle(Tensor<T> x, int r) {
  if (x.rank() != 4) throw DimError("pixel_unshuffle: input must be [B,C,H,W]");
  if (r < 1) throw ArgError("pixel_unshuffle: factor must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % r != 0 || W % r != 0)
    throw ArgError("pixel_unshuffle: spatial dims not divisible by r=" + std::to_string(r));
  const int Co = C * r * r, Ho = H / r, Wo = W / r;
  auto xn = x.node();
  Tensor<T> out = make_op<T>({B, Co, Ho, Wo}, {x},
                             [xn, B, C, H, W, Co, Ho, Wo, r](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (int bi = 0; bi < B; ++bi)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            int co = c * r * r + (i % r) * r + (j % r);
            xn->grad[((std::int64_t(bi) * C + c) * H + i) * W + j] +=
                g[((std::int64_t(bi) * Co + co) * Ho + i / r) * Wo + j / r];
          }
  });
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          int co = c * r * r + (i % r) * r + (j % r);
          out.data()[((std::int64_t(bi) * Co + co) * Ho + i / r) * Wo + j / r] =
              x.data()[((std::int64_t(bi) * C + c) * H + i) * W + j];
        }
  return out;
}

// ---------------------------------------------------------------------------
// Window machinery
// ---------------------------------------------------------------------------

/// Result of splitting a [B,H,W,C] map into S x S windows (padded, optionally
/// cyclically shifted). window_reverse() restores the original map exactly.
template <typename T>
struct WindowPartition {
  Tensor<T> windows;  // [B*nWh*nWw, S*S, C]
  int batch = 0, height = 0, width = 0, channels = 0;
  int padded_h = 0, padded_w = 0;
  int window = 0, shift = 0;
};

/// Pads H,W up to multiples of S with zeros, cyclically shifts the padded
/// canvas by `shift`, then tiles it into S x S windows.
template <typename T>
WindowPartition<T> window_partition(Tensor<T> x, int S, int shift = 0) {
  if (x.rank() != 4) throw DimError("window_partition: input must be [B,H,W,C]");
  if (S < 1) throw ArgError("window_partition: window size must be >= 1");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int Hp = ((H + S - 1) / S) * S, Wp = ((W + S - 1) / S) * S;
  const int nWh = Hp / S, nWw = Wp / S;
  const std::int64_t out_n = std::int64_t(B) * nWh * nWw * S * S * C;

  auto map = std::make_shared<std::vector<std::int64_t>>(out_n);
  std::int64_t o = 0;
  for (int bi = 0; bi < B; ++bi)
    for (int wi = 0; wi < nWh; ++wi)
      for (int wj = 0; wj < nWw; ++wj)
        for (int pi = 0; pi < S; ++pi)
          for (int pj = 0; pj < S; ++pj) {
            int si = (wi * S + pi + shift) % Hp;
            int sj = (wj * S + pj + shift) % Wp;
            std::int64_t src = (si < H && sj < W)
                                   ? ((std::int64_t(bi) * H + si) * W + sj) * C
                                   : -1;
            for (int c = 0; c < C; ++c) (*map)[o++] = src < 0 ? -1 : src + c;
          }

  auto xn = x.node();
  Tensor<T> win = make_op<T>({B * nWh * nWw, S * S, C}, {x},
                             [xn, map](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i)
      if ((*map)[i] >= 0) xn->grad[(*map)[i]] += g[i];
  });
  for (std::int64_t i = 0; i < out_n; ++i)
    win.data()[i] = (*map)[i] >= 0 ? x.data()[(*map)[i]] : T(0);

  WindowPartition<T> wp;
  wp.windows = win;
  wp.batch = B;
  wp.height = H;
  wp.width = W;
  wp.channels = C;
  wp.padded_h = Hp;
  wp.padded_w = Wp;
  wp.window = S;
  wp.shift = shift;
  return wp;
}

/// Exact inverse of window_partition: un-tiles, un-shifts and crops padding.
template <typename T>
Tensor<T> window_reverse(const WindowPartition<T>& wp) {
  const int B = wp.batch, H = wp.height, W = wp.width, C = wp.channels;
  const int Hp = wp.padded_h, Wp = wp.padded_w, S = wp.window, s = wp.shift;
  const int nWw = Wp / S;
  auto map = std::make_shared<std::vector<std::int64_t>>(std::int64_t(B) * H * W * C);
  std::int64_t o = 0;
  for (int bi = 0; bi < B; ++bi)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        int ci = (i - s % Hp + Hp) % Hp;
        int cj = (j - s % Wp + Wp) % Wp;
        std::int64_t w = std::int64_t(bi) * (Hp / S) * nWw + (ci / S) * nWw + (cj / S);
        std::int64_t slot = (w * S * S + (ci % S) * S + (cj % S)) * C;
        for (int c = 0; c < C; ++c) (*map)[o++] = slot + c;
      }
  Tensor<T> win = wp.windows;
  auto wn = win.node();
  Tensor<T> out = make_op<T>({B, H, W, C}, {win}, [wn, map](const std::vector<T>& g) {
    if (wn->grad.empty()) wn->grad.assign(wn->value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) wn->grad[(*map)[i]] += g[i];
  });
  for (std::size_t i = 0; i < map->size(); ++i) out.data()[i] = win.data()[(*map)[i]];
  return out;
}

/// Additive attention mask for one image's windows: 0 for pairs allowed to
/// attend, -1e9 for cross-region pairs under a cyclic shift and for padded
/// key positions. Shape [nWh*nWw, S*S, S*S]; not differentiable.
template <typename T>
Tensor<T> window_attn_mask(int H, int W, int S, int shift) {
  const int Hp = ((H + S - 1) / S) * S, Wp = ((W + S - 1) / S) * S;
  const int nWh = Hp / S, nWw = Wp / S;
  const T kNeg = T(-1e9);
  // region id per canvas cell; -1 marks padding
  auto band = [&](int c, int P) {
    if (shift == 0) return 0;
    if (c < P - S) return 0;
    if (c < P - shift) return 1;
    return 2;
  };
  std::vector<int> id(Hp * Wp);
  for (int i = 0; i < Hp; ++i)
    for (int j = 0; j < Wp; ++j) {
      int si = (i + shift) % Hp, sj = (j + shift) % Wp;
      id[i * Wp + j] = (si < H && sj < W) ? band(i, Hp) * 3 + band(j, Wp) : -1;
    }
  Tensor<T> mask = Tensor<T>::zeros({nWh * nWw, S * S, S * S});
  for (int wi = 0; wi < nWh; ++wi)
    for (int wj = 0; wj < nWw; ++wj) {
      T* mp = mask.data().data() + (std::int64_t(wi) * nWw + wj) * S * S * S * S;
      for (int q = 0; q < S * S; ++q) {
        int qi = id[(wi * S + q / S) * Wp + wj * S + q % S];
        for (int k = 0; k < S * S; ++k) {
          int ki = id[(wi * S + k / S) * Wp + wj * S + k % S];
          mp[q * S * S + k] = (qi == ki) ? T(0) : kNeg;
        }
      }
    }
  return mask;
}

/// logits:[nW,h,T,T] += mask[(w % nW_img),q,k]; the mask is a constant.
template <typename T>
Tensor<T> add_window_mask(Tensor<T> logits, Tensor<T> mask) {
  const int nW = logits.dim(0), h = logits.dim(1), Tq = logits.dim(2), Tk = logits.dim(3);
  const int nWi = mask.dim(0);
  if (mask.dim(1) != Tq || mask.dim(2) != Tk || nW % nWi != 0)
    throw DimError("add_window_mask: mask " + shape_str(mask.shape()) +
                   " incompatible with logits " + shape_str(logits.shape()));
  auto ln = logits.node();
  Tensor<T> out = make_op<T>(logits.shape(), {logits},
                             [ln](const std::vector<T>& g) { ln->accum_grad(g); });
  const std::int64_t tt = std::int64_t(Tq) * Tk;
  for (int w = 0; w < nW; ++w) {
    const T* mp = mask.data().data() + std::int64_t(w % nWi) * tt;
    for (int hd = 0; hd < h; ++hd) {
      const T* lp = logits.data().data() + (std::int64_t(w) * h + hd) * tt;
      T* op = out.data().data() + (std::int64_t(w) * h + hd) * tt;
      for (std::int64_t i = 0; i < tt; ++i) op[i] = lp[i] + mp[i];
    }
  }
  return out;
}

/// logits:[nW,h,T,T] += bias[h,T,T] broadcast over windows.
template <typename T>
Tensor<T> add_window_bias(Tensor<T> logits, Tensor<T> bias) {
  const int nW = logits.dim(0), h = logits.dim(1), Tq = logits.dim(2), Tk = logits.dim(3);
  if (bias.dim(0) != h || bias.dim(1) != Tq || bias.dim(2) != Tk)
    throw DimError("add_window_bias: bias " + shape_str(bias.shape()) +
                   " incompatible with logits " + shape_str(logits.shape()));
  auto ln = logits.node(), bn = bias.node();
  const std::int64_t per_w = std::int64_t(h) * Tq * Tk;
  Tensor<T> out = make_op<T>(logits.shape(), {logits, bias},
                             [ln, bn, nW, per_w](const std::vector<T>& g) {
    if (ln->tracked) ln->accum_grad(g);
    if (bn->tracked) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), T(0));
      for (int w = 0; w < nW; ++w)
        for (std::int64_t i = 0; i < per_w; ++i) bn->grad[i] += g[w * per_w + i];
    }
  });
  for (int w = 0; w < nW; ++w)
    for (std::int64_t i = 0; i < per_w; ++i)
      out.data()[w * per_w + i] = logits.data()[w * per_w + i] + bias.data()[i];
  return out;
}

/// Row gather from a table: out[i,:] = table[idx[i],:]. Used for relative
/// position bias lookups; backward scatter-adds into the table.
template <typename T>
Tensor<T> gather_rows(Tensor<T> table, std::shared_ptr<std::vector<int>> idx) {
  if (table.rank() != 2) throw DimError("gather_rows: table must be rank 2");
  const int R = table.dim(0), C = table.dim(1);
  for (int i : *idx)
    if (i < 0 || i >= R) throw ArgError("gather_rows: index out of range");
  const int L = static_cast<int>(idx->size());
  auto tn = table.node();
  Tensor<T> out = make_op<T>({L, C}, {table}, [tn, idx, C](const std::vector<T>& g) {
    if (tn->grad.empty()) tn->grad.assign(tn->value.size(), T(0));
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (int c = 0; c < C; ++c) tn->grad[std::int64_t((*idx)[i]) * C + c] += g[i * C + c];
  });
  for (int i = 0; i < L; ++i)
    for (int c = 0; c < C; ++c)
      out.data()[std::int64_t(i) * C + c] = table.data()[std::int64_t((*idx)[i]) * C + c];
  return out;
}

/// L2-normalizes the last dimension; the norm denominator is clamped at eps.
template <typename T>
Tensor<T> l2_normalize_lastdim(Tensor<T> x, T eps = T(1e-8)) {
  const int d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  auto norms = std::make_shared<std::vector<T>>(rows);
  auto yv = std::make_shared<std::vector<T>>();
  auto xn = x.node();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn, norms, yv, rows, d, eps](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T n = (*norms)[r];
      const T* y = yv->data() + r * d;
      const T* gr = g.data() + r * d;
      T* gx = xn->grad.data() + r * d;
      if (n > eps) {
        T dot = 0;
        for (int i = 0; i < d; ++i) dot += gr[i] * y[i];
        for (int i = 0; i < d; ++i) gx[i] += (gr[i] - y[i] * dot) / n;
      } else {
        for (int i = 0; i < d; ++i) gx[i] += gr[i] / eps;
      }
    }
  });
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xp = x.data().data() + r * d;
    T ss = 0;
    for (int i = 0; i < d; ++i) ss += xp[i] * xp[i];
    T n = std::sqrt(ss);
    (*norms)[r] = n;
    const T inv = T(1) / std::max(n, eps);
    T* o = out.data().data() + r * d;
    for (int i = 0; i < d; ++i) o[i] = xp[i] * inv;
  }
  *yv = out.data();
  return out;
}

/// Outer sum of row means and column means: out[b,c,i,j] = yh[b,c,i] + yv[b,c,j].
template <typename T>
Tensor<T> add_rowcol_outer(Tensor<T> yh, Tensor<T> yv) {
  if (yh.rank() != 3 || yv.rank() != 3)
    throw DimError("add_rowcol_outer: inputs must be [B,C,H] and [B,C,W]");
  const int B = yh.dim(0), C = yh.dim(1), H = yh.dim(2), W = yv.dim(2);
  if (yv.dim(0) != B || yv.dim(1) != C)
    throw DimError("add_rowcol_outer: mismatch on axes [0,1]: " + shape_str(yh.shape()) +
                   " vs " + shape_str(yv.shape()));
  auto hn = yh.node(), vn = yv.node();
  Tensor<T> out = make_op<T>({B, C, H, W}, {yh, yv}, [hn, vn, B, C, H, W](const std::vector<T>& g) {
    if (hn->tracked) {
      if (hn->grad.empty()) hn->grad.assign(hn->value.size(), T(0));
      for (int bc = 0; bc < B * C; ++bc)
        for (int i = 0; i < H; ++i) {
          T acc = 0;
          const T* gp = g.data() + (std::int64_t(bc) * H + i) * W;
          for (int j = 0; j < W; ++j) acc += gp[j];
          hn->grad[std::int64_t(bc) * H + i] += acc;
        }
    }
    if (vn->tracked) {
      if (vn->grad.empty()) vn->grad.assign(vn->value.size(), T(0));
      for (int bc = 0; bc < B * C; ++bc)
        for (int i = 0; i < H; ++i) {
          const T* gp = g.data() + (std::int64_t(bc) * H + i) * W;
          for (int j = 0; j < W; ++j) vn->grad[std::int64_t(bc) * W + j] += gp[j];
        }
    }
  });
  for (int bc = 0; bc < B * C; ++bc)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        out.data()[(std::int64_t(bc) * H + i) * W + j] =
            yh.data()[std::int64_t(bc) * H + i] + yv.data()[std::int64_t(bc) * W + j];
  return out;
}

}  // namespace depthcrf
