#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prompthash/nn.hpp"

// Text affinity-aware prompting: label-derived prompt tokens are embedded,
// shifted by a learnable context, encoded, pooled into a gate, and fused
// multiplicatively with the text features.

namespace prompthash {

template <typename T>
struct BoundTaap {
  Var<T> embed;
  Var<T> ctx;
  std::vector<BoundTransformerLayer<T>> encoder;
  Var<T> eta;
};

template <typename T>
struct TaapParams {
  Tensor<T> embed;  // vocab × D
  Tensor<T> ctx;    // L^p × D
  std::vector<TransformerLayerParams<T>> encoder;
  Tensor<T> eta;  // D × D, identity init so fusion starts as a plain gate

  static TaapParams make(std::size_t vocab, std::size_t prompt_len, std::size_t d,
                         std::size_t heads, std::size_t depth, RngStream& rng) {
    if (depth == 0) throw ConfigError("taap: encoder depth must be >= 1");
    TaapParams p;
    p.embed = init::normal<T>({vocab, d}, 0.02, rng);
    p.ctx = init::normal<T>({prompt_len, d}, 0.02, rng);
    for (std::size_t i = 0; i < depth; ++i) {
      p.encoder.push_back(TransformerLayerParams<T>::make(d, heads, rng));
    }
    p.eta = init::eye<T>(d);
    return p;
  }

  BoundTaap<T> bind(Graph<T>& g, const std::string& prefix, ParamGroup group) {
    BoundTaap<T> v;
    v.embed = g.param(embed, prefix + ".embed", group);
    v.ctx = g.param(ctx, prefix + ".ctx", group);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      v.encoder.push_back(encoder[i].bind(g, prefix + ".enc" + std::to_string(i), group));
    }
    v.eta = g.param(eta, prefix + ".eta", group);
    return v;
  }

  template <typename U>
  TaapParams<U> cast() const {
    TaapParams<U> p;
    p.embed = embed.template cast<U>();
    p.ctx = ctx.template cast<U>();
    for (const auto& layer : encoder) p.encoder.push_back(layer.template cast<U>());
    p.eta = eta.template cast<U>();
    return p;
  }
};

// f^p = embed(tokens) + C_ctx, context broadcast over the batch.
template <typename T>
Var<T> build_prompt_features(Graph<T>& g, const BoundTaap<T>& p,
                             const std::vector<std::int32_t>& tokens, std::size_t m) {
  const std::size_t lp = g.value(p.ctx).dim(0);
  Var<T> emb = embedding(g, p.embed, tokens, m, lp);
  return add_ctx(g, emb, p.ctx);
}

template <typename T>
Var<T> taap_encode(Graph<T>& g, const BoundTaap<T>& p, Var<T> fp) {
  Var<T> h = fp;
  for (const auto& layer : p.encoder) h = transformer_encoder_layer(g, layer, h);
  return h;
}

// Pooled fusion: w = mean over the prompt sequence, gate = w ⊙ mean over the
// text sequence, f^pt = gate·η.
template <typename T>
Var<T> fuse_prompt_text(Graph<T>& g, const BoundTaap<T>& p, Var<T> fp_enc, Var<T> ft) {
  if (g.value(fp_enc).dim(2) != g.value(ft).dim(2)) {
    throw ShapeError("taap fuse: feature dimension mismatch");
  }
  Var<T> w = mean_seq(g, fp_enc);
  Var<T> gate = mul(g, w, mean_seq(g, ft));
  return matmul(g, gate, p.eta);
}

// Token-level variant used by the fusion stage downstream: the same gate w is
// applied to every text token, then projected by η, keeping a full sequence.
template <typename T>
Var<T> fuse_prompt_text_seq(Graph<T>& g, const BoundTaap<T>& p, Var<T> fp_enc, Var<T> ft) {
  if (g.value(fp_enc).dim(2) != g.value(ft).dim(2)) {
    throw ShapeError("taap fuse: feature dimension mismatch");
  }
  Var<T> w = mean_seq(g, fp_enc);
  Var<T> gated = mul_bcast_seq(g, ft, w);
  return matmul_lastdim(g, gated, p.eta);
}

}  // namespace prompthash
