#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "prompthash/graph.hpp"
#include "prompthash/tensor.hpp"

// Differentiable primitives over the tape in graph.hpp. Every op validates
// shapes, computes its forward value eagerly, and registers a closure that
// accumulates gradients into its parents. Matrix products go through Eigen
// maps over the row-major storage.

namespace prompthash {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<EMat<T>> emap(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return Eigen::Map<EMat<T>>(t.data(), static_cast<Eigen::Index>(rows),
                             static_cast<Eigen::Index>(cols));
}

template <typename T>
Eigen::Map<const EMat<T>> emap(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const EMat<T>>(t.data(), static_cast<Eigen::Index>(rows),
                                   static_cast<Eigen::Index>(cols));
}

namespace detail {

// All leading dims collapsed into rows; last dim is the feature dim.
template <typename T>
std::size_t lead_rows(const Tensor<T>& t) {
  if (t.rank() == 0) throw ShapeError("expected rank >= 1");
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < t.rank(); ++i) rows *= t.dim(i);
  return rows;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Graph<T>& g, Var<T> a, Var<T> b) {
  require_same_shape(g.value(a), g.value(b), "add");
  Tensor<T> y = g.value(a);
  const Tensor<T>& vb = g.value(b);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += vb[i];
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, b](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      if (gr.requires_grad(a)) {
        Tensor<T>& ga = gr.grad(a);
        for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
      }
      if (gr.requires_grad(b)) {
        Tensor<T>& gb = gr.grad(b);
        for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> sub(Graph<T>& g, Var<T> a, Var<T> b) {
  require_same_shape(g.value(a), g.value(b), "sub");
  Tensor<T> y = g.value(a);
  const Tensor<T>& vb = g.value(b);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= vb[i];
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, b](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      if (gr.requires_grad(a)) {
        Tensor<T>& ga = gr.grad(a);
        for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
      }
      if (gr.requires_grad(b)) {
        Tensor<T>& gb = gr.grad(b);
        for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] -= gy[i];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> mul(Graph<T>& g, Var<T> a, Var<T> b) {
  require_same_shape(g.value(a), g.value(b), "mul");
  Tensor<T> y = g.value(a);
  const Tensor<T>& vb = g.value(b);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= vb[i];
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, b](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      const Tensor<T>& va = gr.value(a);
      const Tensor<T>& vb2 = gr.value(b);
      if (gr.requires_grad(a)) {
        Tensor<T>& ga = gr.grad(a);
        for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * vb2[i];
      }
      if (gr.requires_grad(b)) {
        Tensor<T>& gb = gr.grad(b);
        for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i] * va[i];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> scale(Graph<T>& g, Var<T> a, T c) {
  Tensor<T> y = g.value(a);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= c;
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, c](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += c * gy[i];
    });
  }
  return out;
}

template <typename T>
Var<T> add_scalar(Graph<T>& g, Var<T> a, T c) {
  Tensor<T> y = g.value(a);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += c;
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
    });
  }
  return out;
}

template <typename T>
Var<T> neg(Graph<T>& g, Var<T> a) {
  return scale(g, a, T(-1));
}

// Generic unary op: y = f(x), dx += g * dfun(x, y).
template <typename T, typename FwdF, typename BwdF>
Var<T> unary_op(Graph<T>& g, Var<T> a, FwdF fwd, BwdF dfun) {
  const Tensor<T>& x = g.value(a);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = fwd(x[i]);
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, dfun](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      const Tensor<T>& x2 = gr.value(a);
      const Tensor<T>& y2 = gr.value(out);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * dfun(x2[i], y2[i]);
    });
  }
  return out;
}

template <typename T>
Var<T> tanh_op(Graph<T>& g, Var<T> a) {
  return unary_op(
      g, a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid_op(Graph<T>& g, Var<T> a) {
  return unary_op(
      g, a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
T softplus_scalar(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
Var<T> softplus_op(Graph<T>& g, Var<T> a) {
  return unary_op(
      g, a, [](T x) { return softplus_scalar(x); },
      [](T x, T) { return sigmoid_scalar(x); });
}

template <typename T>
Var<T> silu_op(Graph<T>& g, Var<T> a) {
  return unary_op(
      g, a, [](T x) { return x * sigmoid_scalar(x); },
      [](T x, T) {
        const T s = sigmoid_scalar(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> gelu_op(Graph<T>& g, Var<T> a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_op(
      g, a,
      [](T x) {
        return T(0.5) * x * (T(1) + T(std::erf(double(x) * kInvSqrt2)));
      },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + T(std::erf(double(x) * kInvSqrt2)));
        const T pdf = T(kInvSqrt2Pi * std::exp(-0.5 * double(x) * double(x)));
        return cdf + x * pdf;
      });
}

template <typename T>
Var<T> exp_op(Graph<T>& g, Var<T> a) {
  return unary_op(
      g, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

// y = a (m×k) · b (k×n)
template <typename T>
Var<T> matmul(Graph<T>& g, Var<T> a, Var<T> b) {
  const Tensor<T>& va = g.value(a);
  const Tensor<T>& vb = g.value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
    throw ShapeError("matmul: incompatible shapes");
  }
  const std::size_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor<T> y({m, n});
  emap(y, m, n).noalias() = emap(va, m, k) * emap(vb, k, n);
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, b, m, k, n](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      if (gr.requires_grad(a)) {
        emap(gr.grad(a), m, k).noalias() +=
            emap(gy, m, n) * emap(gr.value(b), k, n).transpose();
      }
      if (gr.requires_grad(b)) {
        emap(gr.grad(b), k, n).noalias() +=
            emap(gr.value(a), m, k).transpose() * emap(gy, m, n);
      }
    });
  }
  return out;
}

// y = a (m×k) · b (n×k)^T
template <typename T>
Var<T> matmul_nt(Graph<T>& g, Var<T> a, Var<T> b) {
  const Tensor<T>& va = g.value(a);
  const Tensor<T>& vb = g.value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1)) {
    throw ShapeError("matmul_nt: incompatible shapes");
  }
  const std::size_t m = va.dim(0), k = va.dim(1), n = vb.dim(0);
  Tensor<T> y({m, n});
  emap(y, m, n).noalias() = emap(va, m, k) * emap(vb, n, k).transpose();
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, b, m, k, n](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      if (gr.requires_grad(a)) {
        emap(gr.grad(a), m, k).noalias() += emap(gy, m, n) * emap(gr.value(b), n, k);
      }
      if (gr.requires_grad(b)) {
        emap(gr.grad(b), n, k).noalias() +=
            emap(gy, m, n).transpose() * emap(gr.value(a), m, k);
      }
    });
  }
  return out;
}

// y[..., :] = x[..., :] · w, with w of shape in×out.
template <typename T>
Var<T> matmul_lastdim(Graph<T>& g, Var<T> x, Var<T> w) {
  const Tensor<T>& vx = g.value(x);
  const Tensor<T>& vw = g.value(w);
  if (vw.rank() != 2 || vx.dim(vx.rank() - 1) != vw.dim(0)) {
    throw ShapeError("matmul_lastdim: incompatible shapes");
  }
  const std::size_t rows = detail::lead_rows(vx);
  const std::size_t din = vw.dim(0), dout = vw.dim(1);
  std::vector<std::size_t> out_shape(vx.shape());
  out_shape.back() = dout;
  Tensor<T> y(out_shape);
  emap(y, rows, dout).noalias() = emap(vx, rows, din) * emap(vw, din, dout);
  const bool rg = g.requires_grad(x) || g.requires_grad(w);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, x, w, rows, din, dout](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      if (gr.requires_grad(x)) {
        emap(gr.grad(x), rows, din).noalias() +=
            emap(gy, rows, dout) * emap(gr.value(w), din, dout).transpose();
      }
      if (gr.requires_grad(w)) {
        emap(gr.grad(w), din, dout).noalias() +=
            emap(gr.value(x), rows, din).transpose() * emap(gy, rows, dout);
      }
    });
  }
  return out;
}

// y[..., o] = sum_i x[..., i] * w[o, i] + b[o]; w is out×in, bias optional.
template <typename T>
Var<T> linear(Graph<T>& g, Var<T> x, Var<T> w, Var<T> b) {
  const Tensor<T>& vx = g.value(x);
  const Tensor<T>& vw = g.value(w);
  if (vw.rank() != 2 || vx.dim(vx.rank() - 1) != vw.dim(1)) {
    throw ShapeError("linear: incompatible shapes");
  }
  const std::size_t rows = detail::lead_rows(vx);
  const std::size_t din = vw.dim(1), dout = vw.dim(0);
  const bool has_bias = b.valid();
  if (has_bias && (g.value(b).rank() != 1 || g.value(b).dim(0) != dout)) {
    throw ShapeError("linear: bias shape mismatch");
  }
  std::vector<std::size_t> out_shape(vx.shape());
  out_shape.back() = dout;
  Tensor<T> y(out_shape);
  emap(y, rows, dout).noalias() = emap(vx, rows, din) * emap(vw, dout, din).transpose();
  if (has_bias) {
    const Tensor<T>& vb = g.value(b);
    for (std::size_t r = 0; r < rows; ++r) {
      T* yr = y.data() + r * dout;
      for (std::size_t o = 0; o < dout; ++o) yr[o] += vb[o];
    }
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(w) || (has_bias && g.requires_grad(b));
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, x, w, b, has_bias, rows, din, dout](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      if (gr.requires_grad(x)) {
        emap(gr.grad(x), rows, din).noalias() +=
            emap(gy, rows, dout) * emap(gr.value(w), dout, din);
      }
      if (gr.requires_grad(w)) {
        emap(gr.grad(w), dout, din).noalias() +=
            emap(gy, rows, dout).transpose() * emap(gr.value(x), rows, din);
      }
      if (has_bias && gr.requires_grad(b)) {
        Tensor<T>& gb = gr.grad(b);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr_row = gy.data() + r * dout;
          for (std::size_t o = 0; o < dout; ++o) gb[o] += gr_row[o];
        }
      }
    });
  }
  return out;
}

// Batched products over leading dim B. nt=true computes a · b^T per batch.
template <typename T>
Var<T> bmm(Graph<T>& g, Var<T> a, Var<T> b, bool nt = false) {
  const Tensor<T>& va = g.value(a);
  const Tensor<T>& vb = g.value(b);
  if (va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0)) {
    throw ShapeError("bmm: expected 3-D tensors with equal batch");
  }
  const std::size_t bt = va.dim(0), m = va.dim(1), k = va.dim(2);
  const std::size_t n = nt ? vb.dim(1) : vb.dim(2);
  if ((nt && vb.dim(2) != k) || (!nt && vb.dim(1) != k)) {
    throw ShapeError("bmm: inner dimension mismatch");
  }
  Tensor<T> y({bt, m, n});
  for (std::size_t i = 0; i < bt; ++i) {
    Eigen::Map<const EMat<T>> ma(va.data() + i * m * k, m, k);
    Eigen::Map<EMat<T>> my(y.data() + i * m * n, m, n);
    if (nt) {
      Eigen::Map<const EMat<T>> mb(vb.data() + i * n * k, n, k);
      my.noalias() = ma * mb.transpose();
    } else {
      Eigen::Map<const EMat<T>> mb(vb.data() + i * k * n, k, n);
      my.noalias() = ma * mb;
    }
  }
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, b, nt, bt, m, k, n](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      const Tensor<T>& va2 = gr.value(a);
      const Tensor<T>& vb2 = gr.value(b);
      const bool need_a = gr.requires_grad(a);
      const bool need_b = gr.requires_grad(b);
      Tensor<T>* ga = need_a ? &gr.grad(a) : nullptr;
      Tensor<T>* gb = need_b ? &gr.grad(b) : nullptr;
      for (std::size_t i = 0; i < bt; ++i) {
        Eigen::Map<const EMat<T>> mg(gy.data() + i * m * n, m, n);
        Eigen::Map<const EMat<T>> ma(va2.data() + i * m * k, m, k);
        if (nt) {
          Eigen::Map<const EMat<T>> mb(vb2.data() + i * n * k, n, k);
          if (need_a) {
            Eigen::Map<EMat<T>> mga(ga->data() + i * m * k, m, k);
            mga.noalias() += mg * mb;
          }
          if (need_b) {
            Eigen::Map<EMat<T>> mgb(gb->data() + i * n * k, n, k);
            mgb.noalias() += mg.transpose() * ma;
          }
        } else {
          Eigen::Map<const EMat<T>> mb(vb2.data() + i * k * n, k, n);
          if (need_a) {
            Eigen::Map<EMat<T>> mga(ga->data() + i * m * k, m, k);
            mga.noalias() += mg * mb.transpose();
          }
          if (need_b) {
            Eigen::Map<EMat<T>> mgb(gb->data() + i * k * n, k, n);
            mgb.noalias() += ma.transpose() * mg;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Graph<T>& g, Var<T> a, std::vector<std::size_t> shape) {
  const Tensor<T>& va = g.value(a);
  Tensor<T> y(std::move(shape), va.raw());
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
    });
  }
  return out;
}

// Concatenate two M×L×D tensors along the sequence axis.
template <typename T>
Var<T> concat_seq(Graph<T>& g, Var<T> a, Var<T> b) {
  const Tensor<T>& va = g.value(a);
  const Tensor<T>& vb = g.value(b);
  if (va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2)) {
    throw ShapeError("concat_seq: incompatible shapes");
  }
  const std::size_t m = va.dim(0), la = va.dim(1), lb = vb.dim(1), d = va.dim(2);
  Tensor<T> y({m, la + lb, d});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(va.data() + i * la * d, va.data() + (i + 1) * la * d,
              y.data() + i * (la + lb) * d);
    std::copy(vb.data() + i * lb * d, vb.data() + (i + 1) * lb * d,
              y.data() + i * (la + lb) * d + la * d);
  }
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, b, m, la, lb, d](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      if (gr.requires_grad(a)) {
        Tensor<T>& ga = gr.grad(a);
        for (std::size_t i = 0; i < m; ++i) {
          const T* src = gy.data() + i * (la + lb) * d;
          T* dst = ga.data() + i * la * d;
          for (std::size_t j = 0; j < la * d; ++j) dst[j] += src[j];
        }
      }
      if (gr.requires_grad(b)) {
        Tensor<T>& gb = gr.grad(b);
        for (std::size_t i = 0; i < m; ++i) {
          const T* src = gy.data() + i * (la + lb) * d + la * d;
          T* dst = gb.data() + i * lb * d;
          for (std::size_t j = 0; j < lb * d; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

// Slice [from, from+len) along the sequence axis of an M×L×D tensor.
template <typename T>
Var<T> slice_seq(Graph<T>& g, Var<T> a, std::size_t from, std::size_t len) {
  const Tensor<T>& va = g.value(a);
  if (va.rank() != 3 || from + len > va.dim(1)) {
    throw ShapeError("slice_seq: out of range");
  }
  const std::size_t m = va.dim(0), l = va.dim(1), d = va.dim(2);
  Tensor<T> y({m, len, d});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(va.data() + (i * l + from) * d, va.data() + (i * l + from + len) * d,
              y.data() + i * len * d);
  }
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, from, len, m, l, d](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < m; ++i) {
        const T* src = gy.data() + i * len * d;
        T* dst = ga.data() + (i * l + from) * d;
        for (std::size_t j = 0; j < len * d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

enum class FlipAxis { Seq, Feat, Both };

namespace detail {

template <typename T>
Tensor<T> flip_tensor(const Tensor<T>& x, FlipAxis axis) {
  if (x.rank() != 3) throw ShapeError("flip: expected M×L×D");
  const std::size_t m = x.dim(0), l = x.dim(1), d = x.dim(2);
  const bool fs = axis == FlipAxis::Seq || axis == FlipAxis::Both;
  const bool ff = axis == FlipAxis::Feat || axis == FlipAxis::Both;
  Tensor<T> y({m, l, d});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < l; ++j) {
      const std::size_t sj = fs ? l - 1 - j : j;
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t sk = ff ? d - 1 - k : k;
        y.at3(i, j, k) = x.at3(i, sj, sk);
      }
    }
  }
  return y;
}

}  // namespace detail

// Reverses the sequence axis, the feature axis, or both. The batch axis is
// never flipped; the op is its own inverse.
template <typename T>
Var<T> flip(Graph<T>& g, Var<T> a, FlipAxis axis) {
  Tensor<T> y = detail::flip_tensor(g.value(a), axis);
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, axis](Graph<T>& gr) {
      Tensor<T> gflip = detail::flip_tensor(gr.grad(out), axis);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < gflip.numel(); ++i) ga[i] += gflip[i];
    });
  }
  return out;
}

// M×L×(H·dh) -> (M·H)×L×dh
template <typename T>
Var<T> split_heads(Graph<T>& g, Var<T> a, std::size_t heads) {
  const Tensor<T>& va = g.value(a);
  if (va.rank() != 3 || va.dim(2) % heads != 0) {
    throw ConfigError("split_heads: head count must divide feature dim");
  }
  const std::size_t m = va.dim(0), l = va.dim(1), d = va.dim(2), dh = d / heads;
  Tensor<T> y({m * heads, l, dh});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < l; ++j)
        std::copy(va.data() + (i * l + j) * d + h * dh,
                  va.data() + (i * l + j) * d + (h + 1) * dh,
                  y.data() + ((i * heads + h) * l + j) * dh);
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, m, l, d, dh, heads](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < l; ++j) {
            const T* src = gy.data() + ((i * heads + h) * l + j) * dh;
            T* dst = ga.data() + (i * l + j) * d + h * dh;
            for (std::size_t k = 0; k < dh; ++k) dst[k] += src[k];
          }
    });
  }
  return out;
}

// (M·H)×L×dh -> M×L×(H·dh)
template <typename T>
Var<T> merge_heads(Graph<T>& g, Var<T> a, std::size_t heads) {
  const Tensor<T>& va = g.value(a);
  if (va.rank() != 3 || va.dim(0) % heads != 0) {
    throw ShapeError("merge_heads: batch not divisible by heads");
  }
  const std::size_t m = va.dim(0) / heads, l = va.dim(1), dh = va.dim(2), d = dh * heads;
  Tensor<T> y({m, l, d});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < l; ++j)
        std::copy(va.data() + ((i * heads + h) * l + j) * dh,
                  va.data() + ((i * heads + h) * l + j + 1) * dh,
                  y.data() + (i * l + j) * d + h * dh);
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, m, l, d, dh, heads](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < l; ++j) {
            const T* src = gy.data() + (i * l + j) * d + h * dh;
            T* dst = ga.data() + ((i * heads + h) * l + j) * dh;
            for (std::size_t k = 0; k < dh; ++k) dst[k] += src[k];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions and broadcasts
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Graph<T>& g, Var<T> a) {
  const Tensor<T>& va = g.value(a);
  T s = 0;
  for (std::size_t i = 0; i < va.numel(); ++i) s += va[i];
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(Tensor<T>::scalar(s), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a](Graph<T>& gr) {
      const T gy = gr.grad(out)[0];
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gy;
    });
  }
  return out;
}

template <typename T>
Var<T> mean_all(Graph<T>& g, Var<T> a) {
  const std::size_t n = g.value(a).numel();
  return scale(g, sum_all(g, a), T(1) / T(n));
}

// Mean over the sequence axis: M×L×D -> M×D.
template <typename T>
Var<T> mean_seq(Graph<T>& g, Var<T> a) {
  const Tensor<T>& va = g.value(a);
  if (va.rank() != 3) throw ShapeError("mean_seq: expected M×L×D");
  const std::size_t m = va.dim(0), l = va.dim(1), d = va.dim(2);
  Tensor<T> y({m, d});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < l; ++j)
      for (std::size_t k = 0; k < d; ++k) y.at2(i, k) += va.at3(i, j, k);
  const T inv = T(1) / T(l);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= inv;
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, m, l, d, inv](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < l; ++j)
          for (std::size_t k = 0; k < d; ++k) ga.at3(i, j, k) += gy.at2(i, k) * inv;
    });
  }
  return out;
}

// x: M×L×D plus a shared context c: L×D broadcast over the batch.
template <typename T>
Var<T> add_ctx(Graph<T>& g, Var<T> x, Var<T> c) {
  const Tensor<T>& vx = g.value(x);
  const Tensor<T>& vc = g.value(c);
  if (vx.rank() != 3 || vc.rank() != 2 || vx.dim(1) != vc.dim(0) || vx.dim(2) != vc.dim(1)) {
    throw ShapeError("add_ctx: incompatible shapes");
  }
  const std::size_t m = vx.dim(0), ld = vc.numel();
  Tensor<T> y = vx;
  for (std::size_t i = 0; i < m; ++i) {
    T* yr = y.data() + i * ld;
    for (std::size_t j = 0; j < ld; ++j) yr[j] += vc[j];
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(c);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, x, c, m, ld](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      if (gr.requires_grad(x)) {
        Tensor<T>& gx = gr.grad(x);
        for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
      }
      if (gr.requires_grad(c)) {
        Tensor<T>& gc = gr.grad(c);
        for (std::size_t i = 0; i < m; ++i) {
          const T* src = gy.data() + i * ld;
          for (std::size_t j = 0; j < ld; ++j) gc[j] += src[j];
        }
      }
    });
  }
  return out;
}

// x: M×L×D scaled per (sample, feature) by s: M×D.
template <typename T>
Var<T> mul_bcast_seq(Graph<T>& g, Var<T> x, Var<T> s) {
  const Tensor<T>& vx = g.value(x);
  const Tensor<T>& vs = g.value(s);
  if (vx.rank() != 3 || vs.rank() != 2 || vx.dim(0) != vs.dim(0) || vx.dim(2) != vs.dim(1)) {
    throw ShapeError("mul_bcast_seq: incompatible shapes");
  }
  const std::size_t m = vx.dim(0), l = vx.dim(1), d = vx.dim(2);
  Tensor<T> y({m, l, d});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < l; ++j)
      for (std::size_t k = 0; k < d; ++k) y.at3(i, j, k) = vx.at3(i, j, k) * vs.at2(i, k);
  const bool rg = g.requires_grad(x) || g.requires_grad(s);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, x, s, m, l, d](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      const Tensor<T>& vx2 = gr.value(x);
      const Tensor<T>& vs2 = gr.value(s);
      if (gr.requires_grad(x)) {
        Tensor<T>& gx = gr.grad(x);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < l; ++j)
            for (std::size_t k = 0; k < d; ++k)
              gx.at3(i, j, k) += gy.at3(i, j, k) * vs2.at2(i, k);
      }
      if (gr.requires_grad(s)) {
        Tensor<T>& gs = gr.grad(s);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < l; ++j)
            for (std::size_t k = 0; k < d; ++k)
              gs.at2(i, k) += gy.at3(i, j, k) * vx2.at3(i, j, k);
      }
    });
  }
  return out;
}

// Per-channel scale. v has one element (applied everywhere) or D elements
// (broadcast over the last dim).
template <typename T>
Var<T> mul_channels(Graph<T>& g, Var<T> x, Var<T> v) {
  const Tensor<T>& vx = g.value(x);
  const Tensor<T>& vv = g.value(v);
  const std::size_t d = vx.rank() == 0 ? 1 : vx.dim(vx.rank() - 1);
  const bool scalar = vv.numel() == 1;
  if (!scalar && vv.numel() != d) {
    throw ShapeError("mul_channels: scale must be scalar or match last dim");
  }
  const std::size_t rows = vx.numel() / (scalar ? vx.numel() : d);
  Tensor<T> y(vx.shape());
  if (scalar) {
    const T c = vv[0];
    for (std::size_t i = 0; i < vx.numel(); ++i) y[i] = vx[i] * c;
  } else {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < d; ++k) y[r * d + k] = vx[r * d + k] * vv[k];
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(v);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, x, v, scalar, rows, d](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      const Tensor<T>& vx2 = gr.value(x);
      const Tensor<T>& vv2 = gr.value(v);
      if (gr.requires_grad(x)) {
        Tensor<T>& gx = gr.grad(x);
        if (scalar) {
          const T c = vv2[0];
          for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * c;
        } else {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < d; ++k) gx[r * d + k] += gy[r * d + k] * vv2[k];
        }
      }
      if (gr.requires_grad(v)) {
        Tensor<T>& gv = gr.grad(v);
        if (scalar) {
          T s = 0;
          for (std::size_t i = 0; i < gy.numel(); ++i) s += gy[i] * vx2[i];
          gv[0] += s;
        } else {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < d; ++k) gv[k] += gy[r * d + k] * vx2[r * d + k];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalizations and softmax
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax_lastdim(Graph<T>& g, Var<T> a) {
  const Tensor<T>& va = g.value(a);
  const std::size_t rows = detail::lead_rows(va);
  const std::size_t d = va.dim(va.rank() - 1);
  Tensor<T> y(va.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = va.data() + r * d;
    T* yr = y.data() + r * d;
    T mx = xr[0];
    for (std::size_t k = 1; k < d; ++k) mx = std::max(mx, xr[k]);
    T s = 0;
    for (std::size_t k = 0; k < d; ++k) {
      yr[k] = std::exp(xr[k] - mx);
      s += yr[k];
    }
    const T inv = T(1) / s;
    for (std::size_t k = 0; k < d; ++k) yr[k] *= inv;
  }
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a, rows, d](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      const Tensor<T>& y2 = gr.value(out);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gyr = gy.data() + r * d;
        const T* yr = y2.data() + r * d;
        T dot = 0;
        for (std::size_t k = 0; k < d; ++k) dot += gyr[k] * yr[k];
        T* gar = ga.data() + r * d;
        for (std::size_t k = 0; k < d; ++k) gar[k] += yr[k] * (gyr[k] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Var<T> layer_norm(Graph<T>& g, Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const Tensor<T>& vx = g.value(x);
  const std::size_t rows = detail::lead_rows(vx);
  const std::size_t d = vx.dim(vx.rank() - 1);
  const Tensor<T>& vg = g.value(gamma);
  const Tensor<T>& vb = g.value(beta);
  if (vg.numel() != d || vb.numel() != d) throw ShapeError("layer_norm: param shape mismatch");
  Tensor<T> y(vx.shape());
  Tensor<T> xhat(vx.shape());
  Tensor<T> inv_std({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = vx.data() + r * d;
    T mean = 0;
    for (std::size_t k = 0; k < d; ++k) mean += xr[k];
    mean /= T(d);
    T var = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const T c = xr[k] - mean;
      var += c * c;
    }
    var /= T(d);
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[r] = istd;
    T* hr = xhat.data() + r * d;
    T* yr = y.data() + r * d;
    for (std::size_t k = 0; k < d; ++k) {
      hr[k] = (xr[k] - mean) * istd;
      yr[k] = vg[k] * hr[k] + vb[k];
    }
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(gamma) || g.requires_grad(beta);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, x, gamma, beta, rows, d, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      const Tensor<T>& vg2 = gr.value(gamma);
      const bool need_x = gr.requires_grad(x);
      const bool need_g = gr.requires_grad(gamma);
      const bool need_b = gr.requires_grad(beta);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gyr = gy.data() + r * d;
        const T* hr = xhat.data() + r * d;
        if (need_g) {
          Tensor<T>& gg = gr.grad(gamma);
          for (std::size_t k = 0; k < d; ++k) gg[k] += gyr[k] * hr[k];
        }
        if (need_b) {
          Tensor<T>& gb = gr.grad(beta);
          for (std::size_t k = 0; k < d; ++k) gb[k] += gyr[k];
        }
        if (need_x) {
          Tensor<T>& gx = gr.grad(x);
          T* gxr = gx.data() + r * d;
          T sum_dh = 0, sum_dh_h = 0;
          for (std::size_t k = 0; k < d; ++k) {
            const T dh = gyr[k] * vg2[k];
            sum_dh += dh;
            sum_dh_h += dh * hr[k];
          }
          const T istd = inv_std[r];
          for (std::size_t k = 0; k < d; ++k) {
            const T dh = gyr[k] * vg2[k];
            gxr[k] += istd * (dh - sum_dh / T(d) - hr[k] * sum_dh_h / T(d));
          }
        }
      }
    });
  }
  return out;
}

// Row-wise L2 normalization of an M×D matrix. Rows with norm below eps are
// scaled by 1/eps instead.
template <typename T>
Var<T> l2_normalize_rows(Graph<T>& g, Var<T> x, T eps = T(1e-12)) {
  const Tensor<T>& vx = g.value(x);
  if (vx.rank() != 2) throw ShapeError("l2_normalize_rows: expected M×D");
  const std::size_t m = vx.dim(0), d = vx.dim(1);
  Tensor<T> y({m, d});
  Tensor<T> norms({m});
  for (std::size_t i = 0; i < m; ++i) {
    const T* xr = vx.data() + i * d;
    T s = 0;
    for (std::size_t k = 0; k < d; ++k) s += xr[k] * xr[k];
    T n = std::sqrt(s);
    if (n < eps) n = eps;
    norms[i] = n;
    T* yr = y.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) yr[k] = xr[k] / n;
  }
  const bool rg = g.requires_grad(x);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, x, m, d, norms = std::move(norms)](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      const Tensor<T>& vx2 = gr.value(x);
      Tensor<T>& gx = gr.grad(x);
      for (std::size_t i = 0; i < m; ++i) {
        const T* gyr = gy.data() + i * d;
        const T* xr = vx2.data() + i * d;
        const T n = norms[i];
        T dot = 0;
        for (std::size_t k = 0; k < d; ++k) dot += gyr[k] * xr[k];
        const T inv = T(1) / n;
        const T inv3 = inv * inv * inv;
        for (std::size_t k = 0; k < d; ++k) gx[i * d + k] += gyr[k] * inv - xr[k] * dot * inv3;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

template <typename T>
Var<T> embedding(Graph<T>& g, Var<T> table, const std::vector<std::int32_t>& ids,
                 std::size_t m, std::size_t l) {
  const Tensor<T>& vt = g.value(table);
  if (vt.rank() != 2) throw ShapeError("embedding: table must be V×D");
  if (ids.size() != m * l) throw ShapeError("embedding: id count mismatch");
  const std::size_t v = vt.dim(0), d = vt.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw ContractError("embedding: token id out of range");
    }
  }
  Tensor<T> y({m, l, d});
  for (std::size_t i = 0; i < m * l; ++i) {
    std::copy(vt.data() + static_cast<std::size_t>(ids[i]) * d,
              vt.data() + (static_cast<std::size_t>(ids[i]) + 1) * d, y.data() + i * d);
  }
  const bool rg = g.requires_grad(table);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, table, ids, m, l, d](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      Tensor<T>& gt = gr.grad(table);
      for (std::size_t i = 0; i < m * l; ++i) {
        const T* src = gy.data() + i * d;
        T* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
        for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// fused losses
// ---------------------------------------------------------------------------

// Mean over rows of (logsumexp(row) - diagonal): softmax cross-entropy with
// the matched pair on the diagonal.
template <typename T>
Var<T> cross_entropy_diag(Graph<T>& g, Var<T> logits) {
  const Tensor<T>& vl = g.value(logits);
  if (vl.rank() != 2 || vl.dim(0) != vl.dim(1)) {
    throw ShapeError("cross_entropy_diag: expected square logits");
  }
  const std::size_t m = vl.dim(0);
  Tensor<T> probs({m, m});
  T loss = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = vl.data() + i * m;
    T mx = row[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (std::size_t j = 0; j < m; ++j) {
      probs.at2(i, j) = std::exp(row[j] - mx);
      s += probs.at2(i, j);
    }
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < m; ++j) probs.at2(i, j) *= inv;
    loss += std::log(s) + mx - row[i];
  }
  loss /= T(m);
  const bool rg = g.requires_grad(logits);
  Var<T> out = g.make(Tensor<T>::scalar(loss), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, logits, m, probs = std::move(probs)](Graph<T>& gr) {
      const T gy = gr.grad(out)[0];
      Tensor<T>& gl = gr.grad(logits);
      const T inv_m = T(1) / T(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          T p = probs.at2(i, j);
          if (i == j) p -= T(1);
          gl[i * m + j] += gy * p * inv_m;
        }
      }
    });
  }
  return out;
}

// sum_ij (S_ij * Q_ij - log(1 + e^{Q_ij})), the pairwise logistic
// log-likelihood. The caller applies sign and normalization.
template <typename T>
Var<T> affinity_loglik_sum(Graph<T>& g, Var<T> q, const Tensor<T>& s) {
  const Tensor<T>& vq = g.value(q);
  require_same_shape(vq, s, "affinity_loglik_sum");
  T acc = 0;
  for (std::size_t i = 0; i < vq.numel(); ++i) {
    acc += s[i] * vq[i] - softplus_scalar(vq[i]);
  }
  const bool rg = g.requires_grad(q);
  Var<T> out = g.make(Tensor<T>::scalar(acc), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, q, s](Graph<T>& gr) {
      const T gy = gr.grad(out)[0];
      const Tensor<T>& vq2 = gr.value(q);
      Tensor<T>& gq = gr.grad(q);
      for (std::size_t i = 0; i < vq2.numel(); ++i) {
        gq[i] += gy * (s[i] - sigmoid_scalar(vq2[i]));
      }
    });
  }
  return out;
}

// Sum of squares of all elements.
template <typename T>
Var<T> sum_squares(Graph<T>& g, Var<T> a) {
  const Tensor<T>& va = g.value(a);
  T s = 0;
  for (std::size_t i = 0; i < va.numel(); ++i) s += va[i] * va[i];
  const bool rg = g.requires_grad(a);
  Var<T> out = g.make(Tensor<T>::scalar(s), rg, nullptr);
  if (rg) {
    g.set_backward(out, [out, a](Graph<T>& gr) {
      const T gy = gr.grad(out)[0];
      const Tensor<T>& va2 = gr.value(a);
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < va2.numel(); ++i) ga[i] += T(2) * gy * va2[i];
    });
  }
  return out;
}

}  // namespace prompthash
