#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "depthcrf/errors.hpp"
#include "depthcrf/opcount.hpp"

namespace depthcrf {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
  bool tracked = false;  // true iff a requires_grad leaf is reachable below
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Consumes this node's grad, accumulates into tracked parents' grads.
  std::function<void(const std::vector<T>&)> backward_fn;
  std::uint64_t visit_epoch = 0;

  void accum_grad(const std::vector<T>& g) {
    if (grad.empty()) grad.assign(value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

/// Handle to a node of the autodiff graph. Copies share storage; the value
/// buffer is written only at creation (and by the optimizer, for leaves).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T v) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(shape_numel(t.node_->shape), v);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw DimError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  template <typename Rng>
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t = zeros(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng)) * stddev;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const {
    int r = static_cast<int>(node_->shape.size());
    return node_->shape[(i < 0) ? r + i : i];
  }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }

  T item() const {
    if (numel() != 1) throw ArgError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    node_->tracked = b || node_->tracked;
    return *this;
  }
  bool requires_grad() const { return node_->requires_grad; }
  bool tracked() const { return node_->tracked; }

  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Creates the output node of a primitive op. `backward` sees the output
/// gradient; it must accumulate into the tracked inputs only.
template <typename T>
Tensor<T> make_op(Shape out_shape, std::vector<Tensor<T>> inputs,
                  std::function<void(const std::vector<T>&)> backward) {
  Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || in.tracked();
  if (tracked) {
    out.node()->tracked = true;
    for (const auto& in : inputs) out.node()->parents.push_back(in.node());
    out.node()->backward_fn = std::move(backward);
  }
  return out;
}

/// Ordered record of the graph below a root; replayed in reverse by
/// backward() so each node is visited exactly once.
template <typename T>
struct GradTape {
  std::vector<TensorNode<T>*> order;  // parents before children

  static GradTape build(TensorNode<T>* root) {
    static thread_local std::uint64_t epoch = 0;
    ++epoch;
    GradTape tape;
    // Iterative postorder DFS over tracked nodes.
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
    if (root->tracked) stack.emplace_back(root, 0);
    root->visit_epoch = epoch;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode<T>* p = node->parents[next++].get();
        if (p->tracked && p->visit_epoch != epoch) {
          p->visit_epoch = epoch;
          stack.emplace_back(p, 0);
        }
      } else {
        tape.order.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }
};

/// Reverse-mode accumulation from a scalar loss. Gradients of fan-out nodes
/// are summed. Returns the number of nodes visited.
template <typename T>
std::size_t backward(Tensor<T> loss) {
  if (loss.numel() != 1)
    throw ArgError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.tracked()) return 0;
  GradTape<T> tape = GradTape<T>::build(loss.node().get());
  loss.node()->grad.assign(1, T(1));
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(node->grad);
  }
  return tape.order.size();
}

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return;
  std::string axes;
  int r = std::max(a.rank(), b.rank());
  for (int i = 0; i < r; ++i) {
    bool bad = i >= a.rank() || i >= b.rank() || a.shape()[i] != b.shape()[i];
    if (bad) axes += (axes.empty() ? "" : ",") + std::to_string(i);
  }
  throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()) + " on axes [" + axes + "]");
}

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  Tensor<T> out = make_op<T>(a.shape(), {a, b}, [an, bn](const std::vector<T>& g) {
    if (an->tracked) an->accum_grad(g);
    if (bn->tracked) bn->accum_grad(g);
  });
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  Tensor<T> out = make_op<T>(a.shape(), {a, b}, [an, bn](const std::vector<T>& g) {
    if (an->tracked) an->accum_grad(g);
    if (bn->tracked) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
    }
  });
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  Tensor<T> out = make_op<T>(a.shape(), {a, b}, [an, bn](const std::vector<T>& g) {
    if (an->tracked) {
      if (an->grad.empty()) an->grad.assign(an->value.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->value[i];
    }
    if (bn->tracked) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->value[i];
    }
  });
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

template <typename T>
Tensor<T> mul_scalar(Tensor<T> x, T c) {
  auto xn = x.node();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn, c](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i] * c;
  });
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * c;
  return out;
}

template <typename T>
Tensor<T> add_scalar(Tensor<T> x, T c) {
  auto xn = x.node();
  Tensor<T> out = make_op<T>(x.shape(), {x},
                             [xn](const std::vector<T>& g) { xn->accum_grad(g); });
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] + c;
  return out;
}

/// Multiplies every element by a [1]-shaped tensor (learnable scalar).
template <typename T>
Tensor<T> scale_by(Tensor<T> x, Tensor<T> s) {
  if (s.numel() != 1) throw DimError("scale_by: scale must have a single element");
  auto xn = x.node(), sn = s.node();
  Tensor<T> out = make_op<T>(x.shape(), {x, s}, [xn, sn](const std::vector<T>& g) {
    if (xn->tracked) {
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i] * sn->value[0];
    }
    if (sn->tracked) {
      if (sn->grad.empty()) sn->grad.assign(1, T(0));
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xn->value[i];
      sn->grad[0] += acc;
    }
  });
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * s.data()[0];
  return out;
}

template <typename T>
Tensor<T> reciprocal(Tensor<T> x) {
  auto xn = x.node();
  auto on = std::make_shared<std::vector<T>>();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn, on](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] -= g[i] * (*on)[i] * (*on)[i];
  });
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = T(1) / x.data()[i];
  *on = out.data();
  return out;
}

template <typename T>
Tensor<T> clamp_min(Tensor<T> x, T lo) {
  auto xn = x.node();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn, lo](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn->value[i] >= lo) xn->grad[i] += g[i];
  });
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::max(x.data()[i], lo);
  return out;
}

template <typename T>
Tensor<T> sqrt_op(Tensor<T> x) {
  auto xn = x.node();
  auto on = std::make_shared<std::vector<T>>();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn, on](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i] / (T(2) * (*on)[i]);
  });
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::sqrt(x.data()[i]);
  *on = out.data();
  return out;
}

template <typename T>
Tensor<T> log_op(Tensor<T> x) {
  auto xn = x.node();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i] / xn->value[i];
  });
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::log(x.data()[i]);
  return out;
}

/// Exact erf-based GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(Tensor<T> x) {
  auto xn = x.node();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    const T inv_sqrt2 = T(0.7071067811865475244);
    const T inv_sqrt2pi = T(0.3989422804014326779);
    for (std::size_t i = 0; i < g.size(); ++i) {
      T v = xn->value[i];
      T phi = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      xn->grad[i] += g[i] * (phi + v * pdf);
    }
  });
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    T v = x.data()[i];
    out.data()[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> x) {
  auto xn = x.node();
  auto on = std::make_shared<std::vector<T>>();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn, on](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) {
      T y = (*on)[i];
      xn->grad[i] += g[i] * y * (T(1) - y);
    }
  });
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    T v = x.data()[i];
    // branch keeps exp() argument negative on both sides
    out.data()[i] = (v >= 0) ? T(1) / (T(1) + std::exp(-v))
                             : std::exp(v) / (T(1) + std::exp(v));
  }
  *on = out.data();
  return out;
}

/// Softmax over the last dimension, max-subtracted for stability.
template <typename T>
Tensor<T> softmax_lastdim(Tensor<T> x) {
  if (x.rank() < 1 || x.dim(-1) < 1)
    throw ArgError("softmax_lastdim: last dimension must be >= 1");
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  auto xn = x.node();
  auto on = std::make_shared<std::vector<T>>();
  Tensor<T> out = make_op<T>(x.shape(), {x}, [xn, on, rows, n](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = on->data() + r * n;
      const T* gr = g.data() + r * n;
      T dot = 0;
      for (std::int64_t i = 0; i < n; ++i) dot += gr[i] * y[i];
      T* gx = xn->grad.data() + r * n;
      for (std::int64_t i = 0; i < n; ++i) gx[i] += y[i] * (gr[i] - dot);
    }
  });
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * n;
    T* o = out.data().data() + r * n;
    T mx = in[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    T sum = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      o[i] = std::exp(in[i] - mx);
      sum += o[i];
    }
    for (std::int64_t i = 0; i < n; ++i) o[i] /= sum;
  }
  *on = out.data();
  return out;
}

template <typename T>
Tensor<T> sum_all(Tensor<T> x) {
  auto xn = x.node();
  Tensor<T> out = make_op<T>({1}, {x}, [xn](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (auto& gv : xn->grad) gv += g[0];
  });
  T acc = 0;
  for (T v : x.data()) acc += v;
  out.data()[0] = acc;
  return out;
}

template <typename T>
Tensor<T> mean_all(Tensor<T> x) {
  return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean over one axis (removed from the output shape).
template <typename T>
Tensor<T> mean_axis(Tensor<T> x, int axis) {
  int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ArgError("mean_axis: axis out of range");
  Shape out_shape;
  for (int i = 0; i < r; ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  const std::int64_t n = x.shape()[axis];
  auto xn = x.node();
  Tensor<T> out =
      make_op<T>(out_shape, {x}, [xn, outer, inner, n](const std::vector<T>& g) {
        if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
        const T inv = T(1) / static_cast<T>(n);
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t k = 0; k < n; ++k)
            for (std::int64_t i = 0; i < inner; ++i)
              xn->grad[(o * n + k) * inner + i] += g[o * inner + i] * inv;
      });
  const T inv = T(1) / static_cast<T>(n);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      T acc = 0;
      for (std::int64_t k = 0; k < n; ++k) acc += x.data()[(o * n + k) * inner + i];
      out.data()[o * inner + i] = acc * inv;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tensor<T> x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto xn = x.node();
  Tensor<T> out = make_op<T>(shape, {x},
                             [xn](const std::vector<T>& g) { xn->accum_grad(g); });
  out.data() = x.data();
  return out;
}

template <typename T>
Tensor<T> permute(Tensor<T> x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ArgError("permute: rank mismatch");
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = x.shape()[perm[i]];

  std::vector<std::int64_t> in_strides(r, 1), out_strides(r, 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
  for (int i = r - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];

  // src index of each output element
  auto map = std::make_shared<std::vector<std::int64_t>>(x.numel());
  std::vector<std::int64_t> idx(r, 0);
  for (std::int64_t o = 0; o < x.numel(); ++o) {
    std::int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      std::int64_t c = rem / out_strides[i];
      rem %= out_strides[i];
      src += c * in_strides[perm[i]];
    }
    (*map)[o] = src;
  }
  auto xn = x.node();
  Tensor<T> out = make_op<T>(out_shape, {x}, [xn, map](const std::vector<T>& g) {
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
    for (std::size_t o = 0; o < g.size(); ++o) xn->grad[(*map)[o]] += g[o];
  });
  for (std::int64_t o = 0; o < x.numel(); ++o) out.data()[o] = x.data()[(*map)[o]];
  return out;
}

template <typename T>
Tensor<T> concat(std::vector<Tensor<T>> xs, int axis) {
  if (xs.empty()) throw ArgError("concat: no inputs");
  const int r = xs[0].rank();
  if (axis < 0) axis += r;
  Shape out_shape = xs[0].shape();
  std::int64_t axis_total = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw DimError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && x.shape()[i] != out_shape[i])
        throw DimError("concat: shape mismatch on axis " + std::to_string(i));
    axis_total += x.shape()[axis];
  }
  out_shape[axis] = static_cast<int>(axis_total);
  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];

  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  std::vector<std::int64_t> widths;  // per-input axis extent * inner
  for (auto& x : xs) {
    nodes.push_back(x.node());
    widths.push_back(x.shape()[axis] * inner);
  }
  const std::int64_t out_width = axis_total * inner;
  Tensor<T> out = make_op<T>(out_shape, xs,
                             [nodes, widths, outer, out_width](const std::vector<T>& g) {
    std::int64_t off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      auto& n = nodes[k];
      if (n->tracked) {
        if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < widths[k]; ++i)
            n->grad[o * widths[k] + i] += g[o * out_width + off + i];
      }
      off += widths[k];
    }
  });
  std::int64_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < widths[k]; ++i)
        out.data()[o * out_width + off + i] = xs[k].data()[o * widths[k] + i];
    off += widths[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n, std::int64_t k,
          bool trans_b, bool accumulate) {
  // c[m,n] (+)= a[m,k] * (trans_b ? b[n,k]^T : b[k,n])
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate)
      for (std::int64_t j = 0; j < n; ++j) crow[j] = T(0);
    if (trans_b) {
      const T* arow = a + i * k;
      for (std::int64_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = 0;
        for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    } else {
      const T* arow = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace detail

/// Batched matrix multiply. `a` has shape [..., M, K]; `b` is either rank-2
/// (shared across the batch) or has the same leading dims as `a`.
/// With trans_b the last two dims of `b` are [N, K] instead of [K, N].
template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b, bool trans_b = false) {
  if (a.rank() < 2 || b.rank() < 2) throw DimError("matmul: inputs must have rank >= 2");
  const std::int64_t m = a.dim(-2), k = a.dim(-1);
  const std::int64_t bk = trans_b ? b.dim(-1) : b.dim(-2);
  const std::int64_t n = trans_b ? b.dim(-2) : b.dim(-1);
  if (bk != k)
    throw DimError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()) + " on axis " + std::to_string(a.rank() - 1));
  const bool shared_b = (b.rank() == 2 && a.rank() > 2);
  std::int64_t batch = 1;
  for (int i = 0; i + 2 < a.rank(); ++i) batch *= a.shape()[i];
  if (!shared_b && b.rank() != a.rank())
    throw DimError("matmul: rank mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  if (!shared_b)
    for (int i = 0; i + 2 < a.rank(); ++i)
      if (b.shape()[i] != a.shape()[i])
        throw DimError("matmul: batch dimension mismatch on axis " + std::to_string(i));

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(static_cast<int>(n));

  opcount::add_macs(batch * m * n * k);

  auto an = a.node(), bn = b.node();
  Tensor<T> out = make_op<T>(out_shape, {a, b},
                             [an, bn, batch, m, n, k, trans_b, shared_b](const std::vector<T>& g) {
    opcount::add_macs(2 * batch * m * n * k);
    const std::int64_t a_sz = m * k, b_sz = trans_b ? n * k : k * n, g_sz = m * n;
    if (an->tracked) {
      if (an->grad.empty()) an->grad.assign(an->value.size(), T(0));
      for (std::int64_t bi = 0; bi < batch; ++bi) {
        const T* gp = g.data() + bi * g_sz;
        const T* bp = bn->value.data() + (shared_b ? 0 : bi * b_sz);
        T* gap = an->grad.data() + bi * a_sz;
        // ga += g * b^T  (or g * b when b was transposed in forward)
        detail::gemm(gp, bp, gap, m, k, n, /*trans_b=*/!trans_b, /*accumulate=*/true);
      }
    }
    if (bn->tracked) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), T(0));
      for (std::int64_t bi = 0; bi < batch; ++bi) {
        const T* gp = g.data() + bi * g_sz;
        const T* ap = an->value.data() + bi * a_sz;
        T* gbp = bn->grad.data() + (shared_b ? 0 : bi * b_sz);
        if (!trans_b) {
          // gb[k,n] += a^T[k,m] * g[m,n]
          for (std::int64_t p = 0; p < k; ++p)
            for (std::int64_t i = 0; i < m; ++i) {
              const T av = ap[i * k + p];
              const T* grow = gp + i * n;
              T* brow = gbp + p * n;
              for (std::int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
        } else {
          // gb[n,k] += g^T[n,m] * a[m,k]
          for (std::int64_t j = 0; j < n; ++j)
            for (std::int64_t i = 0; i < m; ++i) {
              const T gv = gp[i * n + j];
              const T* arow = ap + i * k;
              T* brow = gbp + j * k;
              for (std::int64_t p = 0; p < k; ++p) brow[p] += gv * arow[p];
            }
        }
      }
    }
  });
  const std::int64_t a_sz = m * k, b_sz = trans_b ? n * k : k * n, o_sz = m * n;
  for (std::int64_t bi = 0; bi < batch; ++bi)
    detail::gemm(a.data().data() + bi * a_sz,
                 b.data().data() + (shared_b ? 0 : bi * b_sz),
                 out.data().data() + bi * o_sz, m, n, k, trans_b, false);
  return out;
}

}  // namespace depthcrf
