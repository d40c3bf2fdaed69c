#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prompthash/nn.hpp"

// Hash heads, binarization, the quantization/reconstruction objectives, the
// weighted total loss, and packed code serialization.

namespace prompthash {

template <typename T>
struct BoundHashHead {
  BoundLinear<T> proj;
};

template <typename T>
struct HashHeadParams {
  LinearParams<T> proj;  // K×D

  static HashHeadParams make(std::size_t d, std::size_t k, RngStream& rng) {
    // Head inputs are unit-norm rows, so the per-element weight std is the
    // logit std. 1.5 puts logits in tanh's saturating range: codes are
    // decisive from the start instead of hugging the sign boundary.
    HashHeadParams p;
    p.proj.w = init::normal<T>({k, d}, 1.5, rng);
    p.proj.b = init::zeros<T>({k});
    return p;
  }

  BoundHashHead<T> bind(Graph<T>& g, const std::string& prefix, ParamGroup group) {
    return {proj.bind(g, prefix + ".proj", group)};
  }

  template <typename U>
  HashHeadParams<U> cast() const {
    return {proj.template cast<U>()};
  }
};

template <typename T>
struct HashOut {
  Var<T> logits;  // f^(K), M×K
  Var<T> h;       // tanh(f^(K)), entries in (-1,1)
};

template <typename T>
HashOut<T> hash_head(Graph<T>& g, const BoundHashHead<T>& p, Var<T> f) {
  Var<T> logits = apply_linear(g, p.proj, f);
  return {logits, tanh_op(g, logits)};
}

// b = sign(h) with sign(0) = +1, taken as a constant: no gradient flows back.
template <typename T>
Tensor<T> binarize(const Tensor<T>& h) {
  Tensor<T> b(h.shape());
  for (std::size_t i = 0; i < h.numel(); ++i) b[i] = h[i] < T(0) ? T(-1) : T(1);
  return b;
}

template <typename T>
void require_codes(const Tensor<T>& b, const char* where) {
  for (std::size_t i = 0; i < b.numel(); ++i) {
    if (b[i] != T(-1) && b[i] != T(1)) throw ContractError(std::string(where) + ": codes must be +-1");
  }
}

// (1/(NM)) * sum_i ||b_i - (h_i + f_i)/2||^2 over both modalities, N the
// candidate count (equal to the batch in training).
template <typename T>
Var<T> quantization_loss(Graph<T>& g, const Tensor<T>& bv, const HashOut<T>& v,
                         const Tensor<T>& bpt, const HashOut<T>& pt, std::size_t n = 0) {
  require_codes(bv, "quantization_loss");
  require_codes(bpt, "quantization_loss");
  require_same_shape(g.value(v.h), bv, "quantization_loss");
  require_same_shape(g.value(pt.h), bpt, "quantization_loss");
  const std::size_t m = bv.dim(0);
  if (n == 0) n = m;
  auto term = [&](const Tensor<T>& b, const HashOut<T>& o) {
    Var<T> mid = scale(g, add(g, o.h, o.logits), T(0.5));
    return sum_squares(g, sub(g, g.constant(b), mid));
  };
  return scale(g, add(g, term(bv, v), term(bpt, pt)), T(1) / T(n * m));
}

// (1/M) * sum_i (||h_i^v - b_i^v||^2 + ||h_i^pt - b_i^pt||^2), b constant.
template <typename T>
Var<T> reconstruction_loss(Graph<T>& g, Var<T> hv, const Tensor<T>& bv, Var<T> hpt,
                           const Tensor<T>& bpt) {
  require_codes(bv, "reconstruction_loss");
  require_codes(bpt, "reconstruction_loss");
  require_same_shape(g.value(hv), bv, "reconstruction_loss");
  require_same_shape(g.value(hpt), bpt, "reconstruction_loss");
  const std::size_t m = bv.dim(0);
  Var<T> sv = sum_squares(g, sub(g, hv, g.constant(bv)));
  Var<T> st = sum_squares(g, sub(g, hpt, g.constant(bpt)));
  return scale(g, add(g, sv, st), T(1) / T(m));
}

struct LossWeights {
  double alpha = 5.0;   // global prompt alignment
  double beta = 5.0;    // local prompt alignment
  double gamma = 0.005; // inter-class affinity
  double mu = 5.0;      // intra-class affinity
  double sigma = 0.1;   // quantization
  double zeta = 0.001;  // reconstruction

  static LossWeights coco() { return {5.0, 5.0, 0.005, 20.0, 1.0, 0.001}; }

  void validate() const {
    for (double w : {alpha, beta, gamma, mu, sigma, zeta}) {
      if (w < 0.0) throw ConfigError("loss weights must be nonnegative");
    }
  }
};

template <typename T>
struct LossParts {
  Var<T> gpa;
  Var<T> lpa;
  Var<T> inter;
  Var<T> intra;
  Var<T> quan;
  Var<T> recon;
};

template <typename T>
Var<T> total_loss(Graph<T>& g, const LossParts<T>& parts, const LossWeights& w) {
  w.validate();
  Var<T> out = scale(g, parts.gpa, T(w.alpha));
  out = add(g, out, scale(g, parts.lpa, T(w.beta)));
  out = add(g, out, scale(g, parts.inter, T(w.gamma)));
  out = add(g, out, scale(g, parts.intra, T(w.mu)));
  out = add(g, out, scale(g, parts.quan, T(w.sigma)));
  out = add(g, out, scale(g, parts.recon, T(w.zeta)));
  return out;
}

// Rows of +-1 codes kept as int8, row-major.
struct CodeMatrix {
  std::size_t k = 0;
  std::vector<std::int8_t> rows;

  std::size_t count() const { return k == 0 ? 0 : rows.size() / k; }
};

template <typename T>
CodeMatrix to_codes(const Tensor<T>& b) {
  if (b.rank() != 2) throw ShapeError("to_codes: expected M×K");
  CodeMatrix c;
  c.k = b.dim(1);
  c.rows.resize(b.numel());
  for (std::size_t i = 0; i < b.numel(); ++i) {
    if (b[i] != T(-1) && b[i] != T(1)) throw ContractError("to_codes: codes must be +-1");
    c.rows[i] = b[i] < T(0) ? std::int8_t(-1) : std::int8_t(1);
  }
  return c;
}

// MSB-first, +1 -> 1. K must be a multiple of 8.
std::vector<std::uint8_t> pack_codes(const CodeMatrix& codes);
CodeMatrix unpack_codes(const std::vector<std::uint8_t>& bytes, std::size_t k, std::size_t count);

// "PHSH", version byte 1, K as uint16 LE, row count as uint64 LE, packed rows.
void save_codes(const std::string& path, const CodeMatrix& codes);
CodeMatrix load_codes(const std::string& path);

std::size_t hamming_packed(const std::uint8_t* a, const std::uint8_t* b, std::size_t nbytes);

}  // namespace prompthash
