#pragma once

#include <cmath>

#include "prompthash/ops.hpp"

// Prompt-alignment contrastive learning: symmetric InfoNCE between feature
// sets at a fixed or divergence-modulated temperature, plus pairwise logistic
// affinity losses over continuous hash codes.

namespace prompthash {

struct PaclConfig {
  double tau = 0.07;   // base temperature, modulated into tau2
  double tau1 = 0.07;  // global alignment temperature
};

// Symmetric InfoNCE: mean over samples and over the two matching directions
// of the matched-pair softmax cross-entropy. Rows of a and b are expected to
// be L2-normalized by the caller.
template <typename T>
Var<T> info_nce(Graph<T>& g, Var<T> a, Var<T> b, T tau) {
  if (!(tau > T(0))) throw ConfigError("info_nce: temperature must be positive");
  const Tensor<T>& va = g.value(a);
  const Tensor<T>& vb = g.value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(0) != vb.dim(0) || va.dim(1) != vb.dim(1)) {
    throw ShapeError("info_nce: expected matching M×D feature sets");
  }
  const T inv = T(1) / tau;
  Var<T> l_ab = cross_entropy_diag(g, scale(g, matmul_nt(g, a, b), inv));
  Var<T> l_ba = cross_entropy_diag(g, scale(g, matmul_nt(g, b, a), inv));
  return scale(g, add(g, l_ab, l_ba), T(0.5));
}

template <typename T>
Var<T> global_prompt_alignment_loss(Graph<T>& g, Var<T> fv, Var<T> fpt, T tau1) {
  return info_nce(g, fv, fpt, tau1);
}

template <typename T>
Var<T> local_prompt_alignment_loss(Graph<T>& g, Var<T> fv, Var<T> fp, T tau2) {
  return info_nce(g, fv, fp, tau2);
}

namespace detail {

template <typename T>
std::vector<T> softmax_vec(const std::vector<T>& x) {
  T mx = x[0];
  for (T v : x) mx = std::max(mx, v);
  std::vector<T> p(x.size());
  T s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = std::exp(x[i] - mx);
    s += p[i];
  }
  for (T& v : p) v /= s;
  return p;
}

}  // namespace detail

// Jensen-Shannon divergence between two probability vectors, natural log,
// even mixture. eps only guards the logs; zero entries contribute zero.
template <typename T>
T js_divergence(const std::vector<T>& p, const std::vector<T>& q, T eps = T(1e-12)) {
  if (p.size() != q.size() || p.empty()) throw ShapeError("js_divergence: size mismatch");
  T kl_p = 0, kl_q = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T m = (p[i] + q[i]) / T(2);
    if (p[i] > T(0)) kl_p += p[i] * std::log((p[i] + eps) / (m + eps));
    if (q[i] > T(0)) kl_q += q[i] * std::log((q[i] + eps) / (m + eps));
  }
  return (kl_p + kl_q) / T(2);
}

// tau2 = tau / (1 + JS(softmax(mean F^v), softmax(mean F^p))). Computed on
// plain values: the temperature is treated as a constant by the loss, no
// gradient flows through it.
template <typename T>
T dynamic_temperature(const Tensor<T>& fv, const Tensor<T>& fp, T tau) {
  if (!(tau > T(0))) throw ConfigError("dynamic_temperature: tau must be positive");
  if (fv.rank() != 2 || fp.rank() != 2 || fv.dim(1) != fp.dim(1)) {
    throw ShapeError("dynamic_temperature: expected M×D feature sets with equal D");
  }
  const std::size_t d = fv.dim(1);
  auto mean_rows = [d](const Tensor<T>& f) {
    std::vector<T> m(d, T(0));
    const std::size_t rows = f.dim(0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t k = 0; k < d; ++k) m[k] += f.at2(i, k);
    }
    for (T& v : m) v /= T(rows);
    return m;
  };
  const std::vector<T> pv = detail::softmax_vec(mean_rows(fv));
  const std::vector<T> pp = detail::softmax_vec(mean_rows(fp));
  return tau / (T(1) + js_divergence(pv, pp));
}

// L_inter over Theta = (1/2)H^p(H^v)^T against S and Phi = (1/2)H^v(H^p)^T
// against S^T: -(1/(MN)) * sum of both pairwise logistic log-likelihoods.
// For the square training case with symmetric S this is exactly the summed
// two-direction form; the transpose is what makes rectangular candidate sets
// well-defined.
template <typename T>
Var<T> inter_class_affinity_loss(Graph<T>& g, Var<T> hp, Var<T> hv, const Tensor<T>& s) {
  const Tensor<T>& vp = g.value(hp);
  const Tensor<T>& vv = g.value(hv);
  if (vp.rank() != 2 || vv.rank() != 2 || vp.dim(1) != vv.dim(1)) {
    throw ShapeError("inter_class_affinity_loss: hash shape mismatch");
  }
  const std::size_t m = vp.dim(0), n = vv.dim(0);
  if (s.rank() != 2 || s.dim(0) != m || s.dim(1) != n) {
    throw ShapeError("inter_class_affinity_loss: similarity shape mismatch");
  }
  Tensor<T> st({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) st.at2(j, i) = s.at2(i, j);
  }
  Var<T> theta = scale(g, matmul_nt(g, hp, hv), T(0.5));
  Var<T> phi = scale(g, matmul_nt(g, hv, hp), T(0.5));
  Var<T> ll = add(g, affinity_loglik_sum(g, theta, s), affinity_loglik_sum(g, phi, st));
  return scale(g, ll, -T(1) / T(m * n));
}

// L_intra over Omega = (1/2)H^p(H^p)^T against square S.
template <typename T>
Var<T> intra_class_affinity_loss(Graph<T>& g, Var<T> hp, const Tensor<T>& s) {
  const Tensor<T>& vp = g.value(hp);
  if (vp.rank() != 2) throw ShapeError("intra_class_affinity_loss: expected M×K");
  const std::size_t m = vp.dim(0);
  if (s.rank() != 2 || s.dim(0) != m || s.dim(1) != m) {
    throw ShapeError("intra_class_affinity_loss: similarity shape mismatch");
  }
  Var<T> omega = scale(g, matmul_nt(g, hp, hp), T(0.5));
  return scale(g, affinity_loglik_sum(g, omega, s), -T(1) / T(m * m));
}

}  // namespace prompthash
