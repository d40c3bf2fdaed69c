#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "prompthash/graph.hpp"
#include "prompthash/ops.hpp"
#include "prompthash/rng.hpp"
#include "prompthash/tensor.hpp"

// Parameter containers plus the composite layers built from the primitives in
// ops.hpp. Storage lives in the *Params structs; bind() registers the tensors
// on a graph for one forward pass and returns the resulting vars.

namespace prompthash {

namespace init {

template <typename T>
Tensor<T> zeros(std::vector<std::size_t> shape) {
  return Tensor<T>(std::move(shape));
}

template <typename T>
Tensor<T> ones(std::vector<std::size_t> shape) {
  return Tensor<T>::full(std::move(shape), T(1));
}

template <typename T>
Tensor<T> normal(std::vector<std::size_t> shape, double stddev, RngStream& rng) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = T(rng.normal() * stddev);
  return t;
}

template <typename T>
Tensor<T> xavier(std::size_t out, std::size_t in, RngStream& rng) {
  const double bound = std::sqrt(6.0 / double(in + out));
  Tensor<T> t({out, in});
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t[i] = T((rng.uniform() * 2.0 - 1.0) * bound);
  }
  return t;
}

template <typename T>
Tensor<T> eye(std::size_t n) {
  Tensor<T> t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at2(i, i) = T(1);
  return t;
}

template <typename T>
Tensor<T> uniform_range(std::vector<std::size_t> shape, double lo, double hi, RngStream& rng) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = T(lo + rng.uniform() * (hi - lo));
  return t;
}

// Inverse of softplus: returns b with log(1+e^b) = y.
inline double softplus_inverse(double y) { return std::log(std::expm1(y)); }

}  // namespace init

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

template <typename T>
struct BoundLinear {
  Var<T> w;
  Var<T> b;
};

template <typename T>
struct LinearParams {
  Tensor<T> w;  // out×in
  Tensor<T> b;  // out; empty when the layer has no bias

  static LinearParams make_xavier(std::size_t out, std::size_t in, RngStream& rng,
                                  bool bias = true) {
    LinearParams p;
    p.w = init::xavier<T>(out, in, rng);
    if (bias) p.b = init::zeros<T>({out});
    return p;
  }
  static LinearParams make_zero(std::size_t out, std::size_t in, bool bias = true) {
    LinearParams p;
    p.w = init::zeros<T>({out, in});
    if (bias) p.b = init::zeros<T>({out});
    return p;
  }
  static LinearParams make_identity(std::size_t n, bool bias = true) {
    LinearParams p;
    p.w = init::eye<T>(n);
    if (bias) p.b = init::zeros<T>({n});
    return p;
  }

  BoundLinear<T> bind(Graph<T>& g, const std::string& prefix, ParamGroup group) {
    BoundLinear<T> v;
    v.w = g.param(w, prefix + ".w", group);
    if (!b.empty()) v.b = g.param(b, prefix + ".b", group);
    return v;
  }

  template <typename U>
  LinearParams<U> cast() const {
    LinearParams<U> p;
    p.w = w.template cast<U>();
    if (!b.empty()) p.b = b.template cast<U>();
    return p;
  }
};

template <typename T>
Var<T> apply_linear(Graph<T>& g, const BoundLinear<T>& l, Var<T> x) {
  return linear(g, x, l.w, l.b);
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

template <typename T>
struct BoundLayerNorm {
  Var<T> gamma;
  Var<T> beta;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNormParams make(std::size_t d) {
    LayerNormParams p;
    p.gamma = init::ones<T>({d});
    p.beta = init::zeros<T>({d});
    return p;
  }

  BoundLayerNorm<T> bind(Graph<T>& g, const std::string& prefix, ParamGroup group) {
    return {g.param(gamma, prefix + ".gamma", group), g.param(beta, prefix + ".beta", group)};
  }

  template <typename U>
  LayerNormParams<U> cast() const {
    return {gamma.template cast<U>(), beta.template cast<U>()};
  }
};

template <typename T>
Var<T> apply_layer_norm(Graph<T>& g, const BoundLayerNorm<T>& ln, Var<T> x) {
  return layer_norm(g, x, ln.gamma, ln.beta);
}

// ---------------------------------------------------------------------------
// transformer encoder layer (pre-norm, MHA + GELU MLP, residual)
// ---------------------------------------------------------------------------

template <typename T>
struct BoundTransformerLayer {
  BoundLayerNorm<T> ln1, ln2;
  BoundLinear<T> wq, wk, wv, wo, fc1, fc2;
  std::size_t heads = 0;
};

template <typename T>
struct TransformerLayerParams {
  LayerNormParams<T> ln1, ln2;
  LinearParams<T> wq, wk, wv, wo, fc1, fc2;
  std::size_t heads = 4;

  // Output projections (wo, fc2) start at zero so the layer begins as the
  // identity map through its residual connections.
  static TransformerLayerParams make(std::size_t d, std::size_t heads, RngStream& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("transformer: head count must divide feature dim");
    }
    TransformerLayerParams p;
    p.heads = heads;
    p.ln1 = LayerNormParams<T>::make(d);
    p.ln2 = LayerNormParams<T>::make(d);
    p.wq = LinearParams<T>::make_xavier(d, d, rng);
    p.wk = LinearParams<T>::make_xavier(d, d, rng);
    p.wv = LinearParams<T>::make_xavier(d, d, rng);
    p.wo = LinearParams<T>::make_zero(d, d);
    p.fc1 = LinearParams<T>::make_xavier(4 * d, d, rng);
    p.fc2 = LinearParams<T>::make_zero(d, 4 * d);
    return p;
  }

  BoundTransformerLayer<T> bind(Graph<T>& g, const std::string& prefix, ParamGroup group) {
    BoundTransformerLayer<T> v;
    v.ln1 = ln1.bind(g, prefix + ".ln1", group);
    v.ln2 = ln2.bind(g, prefix + ".ln2", group);
    v.wq = wq.bind(g, prefix + ".wq", group);
    v.wk = wk.bind(g, prefix + ".wk", group);
    v.wv = wv.bind(g, prefix + ".wv", group);
    v.wo = wo.bind(g, prefix + ".wo", group);
    v.fc1 = fc1.bind(g, prefix + ".fc1", group);
    v.fc2 = fc2.bind(g, prefix + ".fc2", group);
    v.heads = heads;
    return v;
  }

  template <typename U>
  TransformerLayerParams<U> cast() const {
    TransformerLayerParams<U> p;
    p.ln1 = ln1.template cast<U>();
    p.ln2 = ln2.template cast<U>();
    p.wq = wq.template cast<U>();
    p.wk = wk.template cast<U>();
    p.wv = wv.template cast<U>();
    p.wo = wo.template cast<U>();
    p.fc1 = fc1.template cast<U>();
    p.fc2 = fc2.template cast<U>();
    p.heads = heads;
    return p;
  }
};

template <typename T>
Var<T> multi_head_attention(Graph<T>& g, const BoundTransformerLayer<T>& p, Var<T> x) {
  const std::size_t d = g.value(x).dim(2);
  const std::size_t dh = d / p.heads;
  Var<T> q = split_heads(g, apply_linear(g, p.wq, x), p.heads);
  Var<T> k = split_heads(g, apply_linear(g, p.wk, x), p.heads);
  Var<T> v = split_heads(g, apply_linear(g, p.wv, x), p.heads);
  Var<T> scores = scale(g, bmm(g, q, k, /*nt=*/true), T(1) / T(std::sqrt(double(dh))));
  Var<T> attn = softmax_lastdim(g, scores);
  Var<T> ctx = merge_heads(g, bmm(g, attn, v), p.heads);
  return apply_linear(g, p.wo, ctx);
}

template <typename T>
Var<T> transformer_encoder_layer(Graph<T>& g, const BoundTransformerLayer<T>& p, Var<T> x) {
  Var<T> h = add(g, x, multi_head_attention(g, p, apply_layer_norm(g, p.ln1, x)));
  Var<T> m = apply_linear(g, p.fc1, apply_layer_norm(g, p.ln2, h));
  m = apply_linear(g, p.fc2, gelu_op(g, m));
  return add(g, h, m);
}

// ---------------------------------------------------------------------------
// global response normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BoundGrn {
  Var<T> lambda;
  Var<T> kappa;
};

template <typename T>
struct GrnParams {
  Tensor<T> lambda;
  Tensor<T> kappa;

  static GrnParams make(std::size_t d) {
    return {init::zeros<T>({d}), init::zeros<T>({d})};
  }

  BoundGrn<T> bind(Graph<T>& g, const std::string& prefix, ParamGroup group) {
    return {g.param(lambda, prefix + ".lambda", group), g.param(kappa, prefix + ".kappa", group)};
  }

  template <typename U>
  GrnParams<U> cast() const {
    return {lambda.template cast<U>(), kappa.template cast<U>()};
  }
};

// Per token j of each sample: G_j = ‖x_j‖₂ over features, N_j = G_j divided by
// the sample's mean token norm (+ε), y = λ⊙(x·N_j) + κ + x. A zero-norm token
// contributes a zero subgradient through G.
template <typename T>
Var<T> grn(Graph<T>& g, Var<T> x, const BoundGrn<T>& p, T eps = T(1e-6)) {
  const Tensor<T>& vx = g.value(x);
  if (vx.rank() != 3) throw ShapeError("grn: expected M×L×D");
  const std::size_t m = vx.dim(0), l = vx.dim(1), d = vx.dim(2);
  const Tensor<T>& vl = g.value(p.lambda);
  const Tensor<T>& vk = g.value(p.kappa);
  if (vl.numel() != d || vk.numel() != d) throw ShapeError("grn: param shape mismatch");

  Tensor<T> norms({m, l});
  Tensor<T> nfac({m, l});
  Tensor<T> y({m, l, d});
  for (std::size_t i = 0; i < m; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < l; ++j) {
      const T* xr = vx.data() + (i * l + j) * d;
      T s = 0;
      for (std::size_t k = 0; k < d; ++k) s += xr[k] * xr[k];
      norms.at2(i, j) = std::sqrt(s);
      mean += norms.at2(i, j);
    }
    mean /= T(l);
    const T denom = mean + eps;
    for (std::size_t j = 0; j < l; ++j) {
      nfac.at2(i, j) = norms.at2(i, j) / denom;
      const T* xr = vx.data() + (i * l + j) * d;
      T* yr = y.data() + (i * l + j) * d;
      const T n = nfac.at2(i, j);
      for (std::size_t k = 0; k < d; ++k) yr[k] = vl[k] * xr[k] * n + vk[k] + xr[k];
    }
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(p.lambda) || g.requires_grad(p.kappa);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (rg) {
    Var<T> lam = p.lambda, kap = p.kappa;
    g.set_backward(out, [out, x, lam, kap, m, l, d, eps, norms = std::move(norms),
                         nfac = std::move(nfac)](Graph<T>& gr) {
      const Tensor<T>& gy = gr.grad(out);
      const Tensor<T>& vx2 = gr.value(x);
      const Tensor<T>& vl2 = gr.value(lam);
      const bool need_x = gr.requires_grad(x);
      const bool need_l = gr.requires_grad(lam);
      const bool need_k = gr.requires_grad(kap);
      for (std::size_t i = 0; i < m; ++i) {
        T mean = 0;
        for (std::size_t j = 0; j < l; ++j) mean += norms.at2(i, j);
        mean /= T(l);
        const T denom = mean + eps;

        // dN_j = Σ_k gy·λ·x; backward through N = G/denom couples all tokens
        // of the sample via the mean.
        std::vector<T> dn(l, T(0));
        for (std::size_t j = 0; j < l; ++j) {
          const T* gyr = gy.data() + (i * l + j) * d;
          const T* xr = vx2.data() + (i * l + j) * d;
          const T n = nfac.at2(i, j);
          T acc = 0;
          for (std::size_t k = 0; k < d; ++k) {
            const T pk = gyr[k] * vl2[k];
            acc += pk * xr[k];
            if (need_l) gr.grad(lam)[k] += gyr[k] * xr[k] * n;
            if (need_k) gr.grad(kap)[k] += gyr[k];
          }
          dn[j] = acc;
        }
        if (!need_x) continue;
        T dmean = 0;
        for (std::size_t j = 0; j < l; ++j) dmean -= dn[j] * norms.at2(i, j) / (denom * denom);
        Tensor<T>& gx = gr.grad(x);
        for (std::size_t j = 0; j < l; ++j) {
          const T dg = dn[j] / denom + dmean / T(l);
          const T gnorm = norms.at2(i, j);
          const T* gyr = gy.data() + (i * l + j) * d;
          const T* xr = vx2.data() + (i * l + j) * d;
          T* gxr = gx.data() + (i * l + j) * d;
          const T n = nfac.at2(i, j);
          for (std::size_t k = 0; k < d; ++k) {
            T acc = gyr[k] * (vl2[k] * n + T(1));
            if (gnorm > T(0)) acc += dg * xr[k] / gnorm;
            gxr[k] += acc;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// diagonal selective SSM scan
// ---------------------------------------------------------------------------

template <typename T>
struct BoundSsm {
  BoundLinear<T> wd;  // Δ projection, D→D with bias
  Var<T> wb;          // B projection, N_s×D
  Var<T> wc;          // C projection, N_s×D
  Var<T> a_log;       // D×N_s
  Var<T> skip;        // D
};

template <typename T>
struct SsmParams {
  std::size_t n_state = 16;
  LinearParams<T> wd;
  Tensor<T> wb;
  Tensor<T> wc;
  Tensor<T> a_log;
  Tensor<T> skip;

  static SsmParams make(std::size_t d, std::size_t n_state, RngStream& rng) {
    SsmParams p;
    p.n_state = n_state;
    p.wd = LinearParams<T>::make_xavier(d, d, rng);
    const T bias0 = T(init::softplus_inverse(0.1));
    for (std::size_t i = 0; i < d; ++i) p.wd.b[i] = bias0;
    p.wb = init::xavier<T>(n_state, d, rng);
    p.wc = init::xavier<T>(n_state, d, rng);
    p.a_log = init::uniform_range<T>({d, n_state}, std::log(0.5), std::log(1.5), rng);
    p.skip = init::ones<T>({d});
    return p;
  }

  BoundSsm<T> bind(Graph<T>& g, const std::string& prefix, ParamGroup group) {
    BoundSsm<T> v;
    v.wd = wd.bind(g, prefix + ".wd", group);
    v.wb = g.param(wb, prefix + ".wb", group);
    v.wc = g.param(wc, prefix + ".wc", group);
    v.a_log = g.param(a_log, prefix + ".a_log", group);
    v.skip = g.param(skip, prefix + ".skip", group);
    return v;
  }

  template <typename U>
  SsmParams<U> cast() const {
    SsmParams<U> p;
    p.n_state = n_state;
    p.wd = wd.template cast<U>();
    p.wb = wb.template cast<U>();
    p.wc = wc.template cast<U>();
    p.a_log = a_log.template cast<U>();
    p.skip = skip.template cast<U>();
    return p;
  }
};

// Diagonal selective scan. Per sample and feature channel d with state size N:
//   Δ_t = softplus(W_d x_t + b_d)          (per channel)
//   B_t = W_b x_t,  C_t = W_c x_t          (shared across channels)
//   Ā_t[d,n] = exp(Δ_t[d]·A[d,n]),  A = −exp(A_log)
//   h_t[d,:] = Ā_t[d,:]⊙h_{t−1}[d,:] + Δ_t[d]·x_t[d]·B_t
//   y_t[d]   = C_t·h_t[d,:] + skip[d]·x_t[d]
// Backward runs the recurrence in reverse (stored states), then pushes the
// per-step projection gradients through W_d, W_b, W_c in bulk.
template <typename T>
Var<T> selective_ssm_scan(Graph<T>& g, Var<T> x, const BoundSsm<T>& p) {
  const Tensor<T>& vx = g.value(x);
  if (vx.rank() != 3) throw ShapeError("ssm_scan: expected M×L×D");
  const std::size_t m = vx.dim(0), l = vx.dim(1), d = vx.dim(2);
  const Tensor<T>& vwd = g.value(p.wd.w);
  const Tensor<T>& vwb = g.value(p.wb);
  const Tensor<T>& vwc = g.value(p.wc);
  const Tensor<T>& va_log = g.value(p.a_log);
  const Tensor<T>& vskip = g.value(p.skip);
  if (vwd.rank() != 2 || vwd.dim(0) != d || vwd.dim(1) != d) {
    throw ShapeError("ssm_scan: Δ projection must be D×D");
  }
  const std::size_t ns = vwb.dim(0);
  if (vwb.dim(1) != d || vwc.dim(0) != ns || vwc.dim(1) != d) {
    throw ShapeError("ssm_scan: B/C projections must be N_s×D");
  }
  if (va_log.dim(0) != d || va_log.dim(1) != ns || vskip.numel() != d) {
    throw ShapeError("ssm_scan: A_log must be D×N_s, skip must be D");
  }

  const std::size_t rows = m * l;
  Tensor<T> delta({m, l, d});
  Tensor<T> sig({m, l, d});
  Tensor<T> bmat({m, l, ns});
  Tensor<T> cmat({m, l, ns});

  emap(delta, rows, d).noalias() = emap(vx, rows, d) * emap(vwd, d, d).transpose();
  const Tensor<T>& vbd = g.value(p.wd.b);
  for (std::size_t r = 0; r < rows; ++r) {
    T* dr = delta.data() + r * d;
    T* sr = sig.data() + r * d;
    for (std::size_t k = 0; k < d; ++k) {
      const T pre = dr[k] + vbd[k];
      dr[k] = softplus_scalar(pre);
      sr[k] = sigmoid_scalar(pre);
    }
  }
  emap(bmat, rows, ns).noalias() = emap(vx, rows, d) * emap(vwb, ns, d).transpose();
  emap(cmat, rows, ns).noalias() = emap(vx, rows, d) * emap(vwc, ns, d).transpose();

  Tensor<T> a({d, ns});
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = -std::exp(va_log[i]);

  Tensor<T> hs({m, l, d, ns});
  Tensor<T> y({m, l, d});
  {
    EMat<T> h(d, ns);
    EMat<T> abar(d, ns);
    Eigen::Map<const EMat<T>> am(a.data(), d, ns);
    for (std::size_t i = 0; i < m; ++i) {
      h.setZero();
      for (std::size_t t = 0; t < l; ++t) {
        const std::size_t r = i * l + t;
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> dt(delta.data() + r * d, d);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xt(vx.data() + r * d, d);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bt(bmat.data() + r * ns, ns);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> ct(cmat.data() + r * ns, ns);
        abar = (am.array().colwise() * dt.array()).exp().matrix();
        h = abar.cwiseProduct(h) + (dt.cwiseProduct(xt)) * bt.transpose();
        std::copy(h.data(), h.data() + d * ns, hs.data() + r * d * ns);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> yt(y.data() + r * d, d);
        yt = h * ct;
        for (std::size_t k = 0; k < d; ++k) yt[k] += vskip[k] * xt[k];
      }
    }
  }

  const bool rg = g.requires_grad(x) || g.requires_grad(p.wd.w) || g.requires_grad(p.wd.b) ||
                  g.requires_grad(p.wb) || g.requires_grad(p.wc) || g.requires_grad(p.a_log) ||
                  g.requires_grad(p.skip);
  Var<T> out = g.make(std::move(y), rg, nullptr);
  if (!rg) return out;

  BoundSsm<T> pc = p;
  g.set_backward(out, [out, x, pc, m, l, d, ns, rows, delta = std::move(delta),
                       sig = std::move(sig), bmat = std::move(bmat), cmat = std::move(cmat),
                       a = std::move(a), hs = std::move(hs)](Graph<T>& gr) {
    const Tensor<T>& gy = gr.grad(out);
    const Tensor<T>& vx2 = gr.value(x);
    const Tensor<T>& vskip2 = gr.value(pc.skip);

    Tensor<T> dpre({m, l, d});
    Tensor<T> db({m, l, ns});
    Tensor<T> dc({m, l, ns});
    Tensor<T> dx_local({m, l, d});
    Tensor<T> da_log({d, ns});
    Tensor<T> dskip({d});

    Eigen::Map<const EMat<T>> am(a.data(), d, ns);
    Eigen::Map<EMat<T>> dalog(da_log.data(), d, ns);
    EMat<T> dh(d, ns);
    EMat<T> abar(d, ns);
    EMat<T> dabar_scaled(d, ns);
    for (std::size_t i = 0; i < m; ++i) {
      dh.setZero();
      for (std::size_t t = l; t-- > 0;) {
        const std::size_t r = i * l + t;
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> gyt(gy.data() + r * d, d);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> dt(delta.data() + r * d, d);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> st(sig.data() + r * d, d);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xt(vx2.data() + r * d, d);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bt(bmat.data() + r * ns, ns);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> ct(cmat.data() + r * ns, ns);
        Eigen::Map<const EMat<T>> ht(hs.data() + r * d * ns, d, ns);

        // y_t = h_t·C_t + skip⊙x_t
        dh.noalias() += gyt * ct.transpose();
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dct(dc.data() + r * ns, ns);
        dct.noalias() = ht.transpose() * gyt;
        for (std::size_t k = 0; k < d; ++k) {
          dskip[k] += gyt[k] * xt[k];
          dx_local.at3(i, t, k) += gyt[k] * vskip2[k];
        }

        // h_t = Ā⊙h_{t−1} + (Δ⊙x)·B_tᵀ
        abar = (am.array().colwise() * dt.array()).exp().matrix();
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbt(db.data() + r * ns, ns);
        Eigen::Matrix<T, Eigen::Dynamic, 1> u = dt.cwiseProduct(xt);
        dbt.noalias() = dh.transpose() * u;
        Eigen::Matrix<T, Eigen::Dynamic, 1> du = dh * bt;

        // dĀ = dh⊙h_{t−1}; Ā = exp(Δ·A) feeds both Δ and A_log (dA_log = dA·A).
        if (t > 0) {
          Eigen::Map<const EMat<T>> hprev(hs.data() + (r - 1) * d * ns, d, ns);
          dabar_scaled = dh.cwiseProduct(hprev).cwiseProduct(abar);
          dalog.array() +=
              (dabar_scaled.array().colwise() * dt.array()) * am.array();
        } else {
          dabar_scaled.setZero();
        }
        for (std::size_t k = 0; k < d; ++k) {
          T ddelta = du[k] * xt[k];
          for (std::size_t n = 0; n < ns; ++n) ddelta += dabar_scaled(k, n) * a.at2(k, n);
          dpre.at3(i, t, k) = ddelta * st[k];
          dx_local.at3(i, t, k) += du[k] * dt[k];
        }

        dh = dh.cwiseProduct(abar);
      }
    }

    if (gr.requires_grad(pc.a_log)) {
      Eigen::Map<EMat<T>>(gr.grad(pc.a_log).data(), d, ns).array() += dalog.array();
    }
    if (gr.requires_grad(pc.skip)) {
      Tensor<T>& gs = gr.grad(pc.skip);
      for (std::size_t k = 0; k < d; ++k) gs[k] += dskip[k];
    }
    const Tensor<T>& vwd2 = gr.value(pc.wd.w);
    const Tensor<T>& vwb2 = gr.value(pc.wb);
    const Tensor<T>& vwc2 = gr.value(pc.wc);
    if (gr.requires_grad(pc.wd.w)) {
      emap(gr.grad(pc.wd.w), d, d).noalias() +=
          emap(dpre, rows, d).transpose() * emap(vx2, rows, d);
    }
    if (pc.wd.b.valid() && gr.requires_grad(pc.wd.b)) {
      Tensor<T>& gb = gr.grad(pc.wd.b);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < d; ++k) gb[k] += dpre[r * d + k];
    }
    if (gr.requires_grad(pc.wb)) {
      emap(gr.grad(pc.wb), ns, d).noalias() +=
          emap(db, rows, ns).transpose() * emap(vx2, rows, d);
    }
    if (gr.requires_grad(pc.wc)) {
      emap(gr.grad(pc.wc), ns, d).noalias() +=
          emap(dc, rows, ns).transpose() * emap(vx2, rows, d);
    }
    if (gr.requires_grad(x)) {
      auto gx = emap(gr.grad(x), rows, d);
      gx.noalias() += emap(dx_local, rows, d);
      gx.noalias() += emap(dpre, rows, d) * emap(vwd2, d, d);
      gx.noalias() += emap(db, rows, ns) * emap(vwb2, ns, d);
      gx.noalias() += emap(dc, rows, ns) * emap(vwc2, ns, d);
    }
  });
  return out;
}

}  // namespace prompthash
