#pragma once

#include <string>
#include <utility>

#include "prompthash/nn.hpp"

// Adaptive gated state-space fusion. Each modality stream is response-
// normalized and gated, the streams are concatenated along the sequence axis,
// three flip-augmented scans with shared parameters sweep the fused sequence,
// a learnable mix recombines them with the unscanned fusion, and a refinement
// stage splits the result back into per-modality pooled features.

namespace prompthash {

template <typename T>
struct BoundAgsf {
  BoundGrn<T> grn_v;
  BoundGrn<T> grn_t;
  BoundLinear<T> gate_v;
  BoundLinear<T> gate_t;
  BoundSsm<T> ssm;
  Var<T> theta_raw;
  Var<T> tau_raw;
  BoundLinear<T> refine_in;
  BoundTransformerLayer<T> refine;
};

template <typename T>
struct AgsfParams {
  GrnParams<T> grn_v;
  GrnParams<T> grn_t;
  LinearParams<T> gate_v;  // identity init: branch starts as SiLU(x)
  LinearParams<T> gate_t;
  SsmParams<T> ssm;      // shared by all three flip passes
  Tensor<T> theta_raw;   // mix gate, sigmoid space; one element, or D per-feature
  Tensor<T> tau_raw;     // temperature, softplus space; softplus(init) = 1
  LinearParams<T> refine_in;  // identity init
  TransformerLayerParams<T> refine;

  static AgsfParams make(std::size_t d, std::size_t heads, std::size_t n_state, RngStream& rng,
                         bool per_feature_mix = false) {
    AgsfParams p;
    p.grn_v = GrnParams<T>::make(d);
    p.grn_t = GrnParams<T>::make(d);
    p.gate_v = LinearParams<T>::make_identity(d);
    p.gate_t = LinearParams<T>::make_identity(d);
    p.ssm = SsmParams<T>::make(d, n_state, rng);
    p.theta_raw = init::zeros<T>({per_feature_mix ? d : 1});
    p.tau_raw = init::zeros<T>({1});
    p.tau_raw[0] = T(init::softplus_inverse(1.0));
    p.refine_in = LinearParams<T>::make_identity(d);
    p.refine = TransformerLayerParams<T>::make(d, heads, rng);
    return p;
  }

  BoundAgsf<T> bind(Graph<T>& g, const std::string& prefix, ParamGroup group) {
    BoundAgsf<T> v;
    v.grn_v = grn_v.bind(g, prefix + ".grn_v", group);
    v.grn_t = grn_t.bind(g, prefix + ".grn_t", group);
    v.gate_v = gate_v.bind(g, prefix + ".gate_v", group);
    v.gate_t = gate_t.bind(g, prefix + ".gate_t", group);
    v.ssm = ssm.bind(g, prefix + ".ssm", group);
    v.theta_raw = g.param(theta_raw, prefix + ".theta_raw", group);
    v.tau_raw = g.param(tau_raw, prefix + ".tau_raw", group);
    v.refine_in = refine_in.bind(g, prefix + ".refine_in", group);
    v.refine = refine.bind(g, prefix + ".refine", group);
    return v;
  }

  template <typename U>
  AgsfParams<U> cast() const {
    AgsfParams<U> p;
    p.grn_v = grn_v.template cast<U>();
    p.grn_t = grn_t.template cast<U>();
    p.gate_v = gate_v.template cast<U>();
    p.gate_t = gate_t.template cast<U>();
    p.ssm = ssm.template cast<U>();
    p.theta_raw = theta_raw.template cast<U>();
    p.tau_raw = tau_raw.template cast<U>();
    p.refine_in = refine_in.template cast<U>();
    p.refine = refine.template cast<U>();
    return p;
  }
};

// Fused sequence plus the concat boundary needed to invert it later.
template <typename T>
struct FusedSeq {
  Var<T> seq;
  std::size_t lv = 0;
  std::size_t lpt = 0;
};

template <typename T>
struct MultiAxisOut {
  Var<T> seq;
  Var<T> feat;
  Var<T> both;
};

// One modality branch: SiLU(gate(GRN(x))). Identity-initialized gate and
// zero-initialized GRN leave this as SiLU(x) at the start.
template <typename T>
Var<T> agsf_branch(Graph<T>& g, Var<T> x, const BoundGrn<T>& gp, const BoundLinear<T>& lp) {
  return silu_op(g, apply_linear(g, lp, grn(g, x, gp)));
}

template <typename T>
FusedSeq<T> gate_and_fuse(Graph<T>& g, const BoundAgsf<T>& p, Var<T> fv, Var<T> fpt_seq) {
  if (g.value(fv).dim(2) != g.value(fpt_seq).dim(2)) {
    throw ShapeError("agsf: feature dimension mismatch across modalities");
  }
  FusedSeq<T> f;
  f.lv = g.value(fv).dim(1);
  f.lpt = g.value(fpt_seq).dim(1);
  f.seq = concat_seq(g, agsf_branch(g, fv, p.grn_v, p.gate_v),
                     agsf_branch(g, fpt_seq, p.grn_t, p.gate_t));
  return f;
}

// Three passes over the fused sequence: flip, scan, flip back. The flips are
// self-inverse and the scan parameters are shared.
template <typename T>
MultiAxisOut<T> multi_axis_ssm(Graph<T>& g, const BoundAgsf<T>& p, Var<T> fusion) {
  auto pass = [&](FlipAxis ax) {
    return flip(g, selective_ssm_scan(g, flip(g, fusion, ax), p.ssm), ax);
  };
  return {pass(FlipAxis::Seq), pass(FlipAxis::Feat), pass(FlipAxis::Both)};
}

// f^fit = θ·τ·(sum of flipped branches) + (1−θ)·f^fusion with θ = sigmoid
// and τ = softplus of their raw parameters.
template <typename T>
FusedSeq<T> adaptive_combine(Graph<T>& g, const BoundAgsf<T>& p, const MultiAxisOut<T>& flips,
                             const FusedSeq<T>& fusion) {
  Var<T> total = add(g, add(g, flips.seq, flips.feat), flips.both);
  Var<T> theta = sigmoid_op(g, p.theta_raw);
  Var<T> tau = softplus_op(g, p.tau_raw);
  Var<T> scanned = mul_channels(g, mul_channels(g, total, tau), theta);
  Var<T> kept = mul_channels(g, fusion.seq, add_scalar(g, neg(g, theta), T(1)));
  return {add(g, scanned, kept), fusion.lv, fusion.lpt};
}

// Refinement then inversion of the concat: MLP, transformer layer, split at
// the recorded boundary, mean-pool each segment, L2-normalize.
template <typename T>
std::pair<Var<T>, Var<T>> refine_split(Graph<T>& g, const BoundAgsf<T>& p, const FusedSeq<T>& fit) {
  if (fit.lv == 0 || fit.lpt == 0 || fit.lv + fit.lpt != g.value(fit.seq).dim(1)) {
    throw ContractError("refine_split: segment boundary metadata missing or stale");
  }
  Var<T> h = apply_linear(g, p.refine_in, fit.seq);
  h = transformer_encoder_layer(g, p.refine, h);
  Var<T> pooled_v = l2_normalize_rows(g, mean_seq(g, slice_seq(g, h, 0, fit.lv)));
  Var<T> pooled_t = l2_normalize_rows(g, mean_seq(g, slice_seq(g, h, fit.lv, fit.lpt)));
  return {pooled_v, pooled_t};
}

template <typename T>
struct AgsfOut {
  Var<T> fv;   // M×D, unit rows
  Var<T> fpt;  // M×D, unit rows
};

template <typename T>
AgsfOut<T> agsf_forward(Graph<T>& g, const BoundAgsf<T>& p, Var<T> fv_seq, Var<T> fpt_seq) {
  FusedSeq<T> fused = gate_and_fuse(g, p, fv_seq, fpt_seq);
  MultiAxisOut<T> flips = multi_axis_ssm(g, p, fused.seq);
  FusedSeq<T> fit = adaptive_combine(g, p, flips, fused);
  auto [v, t] = refine_split(g, p, fit);
  return {v, t};
}

}  // namespace prompthash
