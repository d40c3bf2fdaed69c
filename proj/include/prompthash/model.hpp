#pragma once

#include <string>
#include <utility>
#include <vector>

#include "prompthash/agsf.hpp"
#include "prompthash/hashing.hpp"
#include "prompthash/pacl.hpp"
#include "prompthash/taap.hpp"

// Full pipeline assembly: surrogate features -> prompt learning -> gated
// state-space fusion -> hash heads, with the ablation variants wired as
// present/bypassed modules. Bypassed modules contribute no parameters.

namespace prompthash {

enum class Variant { Baseline, WoPaclAgsf, WoTaapPacl, WoAgsf, WoPacl, Full };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = {Variant::Baseline, Variant::WoPaclAgsf,
                                         Variant::WoTaapPacl, Variant::WoAgsf, Variant::WoPacl,
                                         Variant::Full};
  return v;
}

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::WoPaclAgsf: return "wo_pacl_agsf";
    case Variant::WoTaapPacl: return "wo_taap_pacl";
    case Variant::WoAgsf: return "wo_agsf";
    case Variant::WoPacl: return "wo_pacl";
    case Variant::Full: return "full";
  }
  throw ConfigError("variant_name: unknown variant");
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : all_variants()) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown variant: " + s);
}

// Which modules each variant instantiates. The alignment InfoNCE stays active
// everywhere (pure code losses give the heads nothing to align across
// modalities); the prompt-side losses exist only when prompting is wired.
struct VariantWiring {
  bool taap = false;
  bool agsf = false;
  bool pacl = false;
};

inline VariantWiring wiring_for(Variant v) {
  switch (v) {
    case Variant::Baseline: return {false, false, false};
    case Variant::WoPaclAgsf: return {true, false, false};
    case Variant::WoTaapPacl: return {false, true, false};
    case Variant::WoAgsf: return {true, false, true};
    case Variant::WoPacl: return {true, true, false};
    case Variant::Full: return {true, true, true};
  }
  throw ConfigError("wiring_for: unknown variant");
}

// Per-variant weight table: every weight is either active or forced to zero.
inline LossWeights effective_weights(const LossWeights& w, Variant v) {
  w.validate();
  LossWeights e = w;
  if (!wiring_for(v).pacl) {
    e.beta = 0.0;
    e.gamma = 0.0;
    e.mu = 0.0;
  }
  return e;
}

struct ModelDims {
  std::size_t vocab = 0;
  std::size_t prompt_len = 16;
  std::size_t d = 32;
  std::size_t heads = 4;
  std::size_t taap_depth = 1;
  std::size_t n_state = 16;
  std::size_t k = 16;
  bool per_feature_mix = false;
};

template <typename T>
struct BoundModel {
  VariantWiring wiring;
  BoundTaap<T> taap;
  BoundAgsf<T> agsf;
  BoundHashHead<T> head_v;
  BoundHashHead<T> head_t;
};

template <typename T>
struct ModelParams {
  Variant variant = Variant::Full;
  ModelDims dims;
  TaapParams<T> taap;
  AgsfParams<T> agsf;
  HashHeadParams<T> head_v;
  HashHeadParams<T> head_t;

  static ModelParams make(const ModelDims& dims, Variant variant, RngStream& rng) {
    ModelParams p;
    p.variant = variant;
    p.dims = dims;
    const VariantWiring w = wiring_for(variant);
    if (w.taap) {
      p.taap = TaapParams<T>::make(dims.vocab, dims.prompt_len, dims.d, dims.heads,
                                   dims.taap_depth, rng);
    }
    if (w.agsf) {
      p.agsf = AgsfParams<T>::make(dims.d, dims.heads, dims.n_state, rng, dims.per_feature_mix);
    }
    // Both modality heads start from one draw so aligned features binarize
    // identically at birth; the heads hold separate parameters and specialize
    // per modality from the first update on.
    p.head_v = HashHeadParams<T>::make(dims.d, dims.k, rng);
    p.head_t = p.head_v;
    return p;
  }

  BoundModel<T> bind(Graph<T>& g) {
    BoundModel<T> b;
    b.wiring = wiring_for(variant);
    if (b.wiring.taap) b.taap = taap.bind(g, "taap", ParamGroup::Modules);
    if (b.wiring.agsf) b.agsf = agsf.bind(g, "agsf", ParamGroup::Modules);
    b.head_v = head_v.bind(g, "head_v", ParamGroup::Heads);
    b.head_t = head_t.bind(g, "head_t", ParamGroup::Heads);
    return b;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> p;
    p.variant = variant;
    p.dims = dims;
    p.taap = taap.template cast<U>();
    p.agsf = agsf.template cast<U>();
    p.head_v = head_v.template cast<U>();
    p.head_t = head_t.template cast<U>();
    return p;
  }
};

template <typename T>
struct Batch {
  Tensor<T> fv;                      // M × L^v × D
  Tensor<T> ft;                      // M × L^t × D
  std::vector<std::int32_t> prompt;  // M * L^p token ids
  std::size_t m = 0;
};

template <typename T>
struct ModelOut {
  Var<T> feat_v;  // M × D, unit rows
  Var<T> feat_t;  // M × D, unit rows
  Var<T> feat_p;  // M × D, unit rows; only meaningful when has_prompt
  HashOut<T> hash_v;
  HashOut<T> hash_t;
  HashOut<T> hash_p;  // only when has_prompt
  bool has_prompt = false;
};

template <typename T>
ModelOut<T> model_forward(Graph<T>& g, const BoundModel<T>& b, const Batch<T>& batch) {
  ModelOut<T> out;
  Var<T> fv_seq = g.constant(batch.fv);
  Var<T> ft_seq = g.constant(batch.ft);

  Var<T> fp_enc;  // encoded prompt sequence, M × L^p × D
  if (b.wiring.taap) {
    Var<T> fp = build_prompt_features(g, b.taap, batch.prompt, batch.m);
    fp_enc = taap_encode(g, b.taap, fp);
    if (b.wiring.pacl) out.feat_p = l2_normalize_rows(g, mean_seq(g, fp_enc));
  }

  if (b.wiring.agsf) {
    // token-level text input: prompt-gated sequence when prompting is on,
    // raw text tokens otherwise
    Var<T> text_seq =
        b.wiring.taap ? fuse_prompt_text_seq(g, b.taap, fp_enc, ft_seq) : ft_seq;
    AgsfOut<T> fused = agsf_forward(g, b.agsf, fv_seq, text_seq);
    out.feat_v = fused.fv;
    out.feat_t = fused.fpt;
  } else {
    out.feat_v = l2_normalize_rows(g, mean_seq(g, fv_seq));
    out.feat_t = b.wiring.taap
                     ? l2_normalize_rows(g, fuse_prompt_text(g, b.taap, fp_enc, ft_seq))
                     : l2_normalize_rows(g, mean_seq(g, ft_seq));
  }

  out.hash_v = hash_head(g, b.head_v, out.feat_v);
  out.hash_t = hash_head(g, b.head_t, out.feat_t);
  if (b.wiring.pacl) {
    // Prompt codes share the text hashing function: two hash functions total,
    // one per modality. Routing prompt features through the text head lets the
    // affinity structure learned on prompts carry over to the text codes.
    out.hash_p = hash_head(g, b.head_t, out.feat_p);
    out.has_prompt = true;
  }
  return out;
}

template <typename T>
struct LossBundle {
  LossParts<T> parts;
  double tau2 = 0;  // modulated temperature actually used (0 when prompt losses are off)
};

// Assembles the six components for one batch. Components of bypassed modules
// are zero constants; their weights are forced to zero as well, so they never
// contribute to the objective or its gradient.
template <typename T>
LossBundle<T> model_losses(Graph<T>& g, const ModelOut<T>& out, const Tensor<T>& s,
                           const PaclConfig& pc) {
  LossBundle<T> lb;
  const Tensor<T> bv = binarize(g.value(out.hash_v.h));
  const Tensor<T> bt = binarize(g.value(out.hash_t.h));

  lb.parts.gpa = global_prompt_alignment_loss(g, out.feat_v, out.feat_t, T(pc.tau1));
  if (out.has_prompt) {
    const T tau2 = dynamic_temperature(g.value(out.feat_v), g.value(out.feat_p), T(pc.tau));
    lb.tau2 = double(tau2);
    lb.parts.lpa = local_prompt_alignment_loss(g, out.feat_v, out.feat_p, tau2);
    lb.parts.inter = inter_class_affinity_loss(g, out.hash_p.h, out.hash_v.h, s);
    lb.parts.intra = intra_class_affinity_loss(g, out.hash_p.h, s);
  } else {
    lb.parts.lpa = g.constant_scalar(T(0));
    lb.parts.inter = g.constant_scalar(T(0));
    lb.parts.intra = g.constant_scalar(T(0));
  }
  lb.parts.quan = quantization_loss(g, bv, out.hash_v, bt, out.hash_t);
  lb.parts.recon = reconstruction_loss(g, out.hash_v.h, bv, out.hash_t.h, bt);
  return lb;
}

}  // namespace prompthash
