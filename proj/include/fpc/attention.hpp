// Attention over backbone feature maps.
//
// Feature maps become token sequences by row-major spatial flattening
// (token i*W + j = pixel (i, j)); attention runs per batch item and its
// output is added back onto the input (residual attachment), so variant
// "none" and freshly initialized variants coincide with the plain
// pipeline.
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fpc/ops.hpp"
#include "fpc/params.hpp"

namespace fpc {

enum class AttentionVariant { none, sda, mha, ssa };

inline const char* attention_name(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::none: return "none";
    case AttentionVariant::sda: return "sda";
    case AttentionVariant::mha: return "mha";
    case AttentionVariant::ssa: return "ssa";
  }
  return "none";
}

inline AttentionVariant attention_from_name(const std::string& s) {
  if (s == "none") return AttentionVariant::none;
  if (s == "sda") return AttentionVariant::sda;
  if (s == "mha") return AttentionVariant::mha;
  if (s == "ssa") return AttentionVariant::ssa;
  throw usage_error("unknown attention variant '" + s + "' (expected none|sda|mha|ssa)");
}

namespace ops {

// Softmax(Q K^T / sqrt(d_k)) V on one sequence; Q,K: [L,d_k], V: [L,d_v].
// Also exposes the row-stochastic weight matrix for tests.
template <class T>
struct AttentionOut {
  Node<T>* out;
  Node<T>* weights;  // [L_q, L_k]
};

template <class T>
AttentionOut<T> scalar_dot_attention_full(Graph<T>& g, Node<T>* q, Node<T>* k,
                                          Node<T>* v) {
  if (q->value.rank() != 2 || k->value.rank() != 2 || v->value.rank() != 2)
    throw shape_error("attention expects rank-2 Q, K, V");
  if (q->value.dim(1) != k->value.dim(1))
    throw shape_error("attention: Q and K must share d_k");
  if (k->value.dim(0) != v->value.dim(0))
    throw shape_error("attention: K and V must share sequence length");
  const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q->value.dim(1))));
  Node<T>* scores = ops::matmul(g, q, ops::transpose2d(g, k));
  Node<T>* weights = ops::softmax(g, ops::scale(g, scores, inv_sqrt_dk), 1);
  return {ops::matmul(g, weights, v), weights};
}

template <class T>
Node<T>* scalar_dot_attention(Graph<T>& g, Node<T>* q, Node<T>* k, Node<T>* v) {
  return scalar_dot_attention_full(g, q, k, v).out;
}

// Softmax(X W_Q (X W_K)^T / sqrt(d_k)) X W_V on one sequence X: [L,d].
template <class T>
Node<T>* seq_self_attention(Graph<T>& g, Node<T>* x, Node<T>* wq, Node<T>* wk,
                            Node<T>* wv) {
  return scalar_dot_attention(g, ops::matmul(g, x, wq), ops::matmul(g, x, wk),
                              ops::matmul(g, x, wv));
}

// Concat(head_1 ... head_h) W_O with each head a scalar-dot attention over
// its own projections of X.
template <class T>
Node<T>* multi_head_attention(Graph<T>& g, Node<T>* x,
                              const std::vector<std::array<Node<T>*, 3>>& head_proj,
                              Node<T>* wo) {
  std::vector<Node<T>*> heads;
  heads.reserve(head_proj.size());
  for (const auto& hp : head_proj)
    heads.push_back(scalar_dot_attention(g, ops::matmul(g, x, hp[0]),
                                         ops::matmul(g, x, hp[1]),
                                         ops::matmul(g, x, hp[2])));
  return ops::matmul(g, ops::concat_cols(g, heads), wo);
}

}  // namespace ops

// Learned parameters for the in-pipeline variants. SDA attends with
// Q = K = V = X and owns nothing. W_V (and W_O for MHA) start at zero so a
// fresh attention block is exactly the identity under the residual
// attachment.
template <class T>
struct AttentionModule {
  AttentionVariant variant = AttentionVariant::none;
  int dim = 0;
  int heads = 1;
  Param<T> wq, wk, wv;  // ssa
  struct Head {
    Param<T> wq, wk, wv;
  };
  std::vector<Head> mha_heads;
  Param<T> wo;  // mha

  void build(AttentionVariant v, int d, int h, InitCtx& init) {
    variant = v;
    dim = d;
    heads = h;
    if (v == AttentionVariant::ssa) {
      wq = {"attn.wq", Tensor<T>({d, d}), true};
      wk = {"attn.wk", Tensor<T>({d, d}), true};
      wv = {"attn.wv", Tensor<T>({d, d}), true};
      init_dense(wq.value, init);
      init_dense(wk.value, init);
      // wv stays zero: residual dominance at init.
    } else if (v == AttentionVariant::mha) {
      if (h < 1 || d % h != 0)
        throw usage_error("mha_heads must divide the feature width " + std::to_string(d));
      const int dk = d / h;
      mha_heads.resize(static_cast<std::size_t>(h));
      for (int i = 0; i < h; ++i) {
        const std::string p = "attn.h" + std::to_string(i);
        auto& head = mha_heads[static_cast<std::size_t>(i)];
        head.wq = {p + ".wq", Tensor<T>({d, dk}), true};
        head.wk = {p + ".wk", Tensor<T>({d, dk}), true};
        head.wv = {p + ".wv", Tensor<T>({d, dk}), true};
        init_dense(head.wq.value, init);
        init_dense(head.wk.value, init);
        init_dense(head.wv.value, init);
      }
      wo = {"attn.wo", Tensor<T>({d, d}), true};
      // wo stays zero: residual dominance at init.
    }
  }

  // x: [L, d] for one batch item.
  Node<T>* forward_item(BindCtx<T>& ctx, Node<T>* x) {
    Graph<T>& g = ctx.g;
    switch (variant) {
      case AttentionVariant::none:
        return nullptr;
      case AttentionVariant::sda:
        return ops::scalar_dot_attention(g, x, x, x);
      case AttentionVariant::ssa:
        return ops::seq_self_attention(g, x, ctx.bind(wq), ctx.bind(wk), ctx.bind(wv));
      case AttentionVariant::mha: {
        std::vector<std::array<Node<T>*, 3>> proj;
        proj.reserve(mha_heads.size());
        for (auto& h : mha_heads)
          proj.push_back({ctx.bind(h.wq), ctx.bind(h.wk), ctx.bind(h.wv)});
        return ops::multi_head_attention(g, x, proj, ctx.bind(wo));
      }
    }
    return nullptr;
  }

  void collect(std::vector<Param<T>*>& params) {
    if (variant == AttentionVariant::ssa) {
      params.push_back(&wq);
      params.push_back(&wk);
      params.push_back(&wv);
    } else if (variant == AttentionVariant::mha) {
      for (auto& h : mha_heads) {
        params.push_back(&h.wq);
        params.push_back(&h.wk);
        params.push_back(&h.wv);
      }
      params.push_back(&wo);
    }
  }

  std::int64_t trainable_count() {
    std::vector<Param<T>*> params;
    collect(params);
    std::int64_t n = 0;
    for (auto* p : params)
      if (p->trainable) n += p->numel();
    return n;
  }
};

namespace ops {

// featmap [B,C,H,W] -> featmap + Attn(featmap), token-wise, per batch item.
template <class T>
Node<T>* attach_attention(BindCtx<T>& ctx, Node<T>* featmap, AttentionModule<T>& attn) {
  if (attn.variant == AttentionVariant::none) return featmap;
  Graph<T>& g = ctx.g;
  const int b = featmap->value.dim(0), h = featmap->value.dim(2), w = featmap->value.dim(3);
  Node<T>* seq = ops::bchw_to_blc(g, featmap);
  std::vector<Node<T>*> items;
  items.reserve(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    Node<T>* x = ops::slice_item(g, seq, i);
    items.push_back(ops::add(g, x, attn.forward_item(ctx, x)));
  }
  return ops::blc_to_bchw(g, ops::stack_items(g, items), h, w);
}

}  // namespace ops
}  // namespace fpc
