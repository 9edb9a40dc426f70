// Full classifier: backbone -> optional attention -> global average pool ->
// 3-layer MLP head -> softmax.
#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "fpc/attention.hpp"
#include "fpc/backbone.hpp"
#include "fpc/ops.hpp"
#include "fpc/params.hpp"

namespace fpc {

struct ModelConfig {
  std::string backbone = "micro";  // builtin name or path to a backbone file
  AttentionVariant attention = AttentionVariant::none;
  int mha_heads = 4;
  int mlp_h1 = 256;
  int mlp_h2 = 128;
  int num_classes = 6;
  double dropout_p = 0.1;
  // 2 = dropout after both hidden activations; 1 = after the second only.
  int dropout_layers = 2;
  // 0 trains everything; 1 freezes the stem; 1+k freezes the stem and the
  // first k stages.
  int freeze_prefix = 0;

  void validate() const {
    if (num_classes < 2) throw usage_error("num_classes must be >= 2");
    if (dropout_p < 0 || dropout_p >= 1) throw usage_error("dropout_p must be in [0,1)");
    if (mlp_h1 < 1 || mlp_h2 < 1) throw usage_error("mlp_hidden widths must be >= 1");
    if (dropout_layers != 1 && dropout_layers != 2)
      throw usage_error("dropout_layers must be 1 or 2");
    if (mha_heads < 1) throw usage_error("mha_heads must be >= 1");
    if (freeze_prefix < 0) throw usage_error("freeze_prefix must be >= 0");
  }
};

template <class T>
struct ParamCounts {
  std::int64_t backbone = 0;
  std::int64_t attention = 0;
  std::int64_t head = 0;

  std::int64_t total() const { return backbone + attention + head; }
  // The accounting used by published parameter tables for this family:
  // feature extractor plus classifier head, attention excluded.
  std::int64_t backbone_plus_head() const { return backbone + head; }
};

template <class T>
struct ModelOutputs {
  Node<T>* featmap = nullptr;      // final conv feature map, pre-attention
  Node<T>* featmap_att = nullptr;  // after attention attachment
  Node<T>* pooled = nullptr;
  Node<T>* embedding = nullptr;    // second hidden activation, pre-dropout
  Node<T>* logits = nullptr;
  Node<T>* probs = nullptr;
};

template <class T>
struct Model {
  ModelConfig config;
  BackboneConfig backbone_config;
  Backbone<T> backbone;
  AttentionModule<T> attention;
  Param<T> w1, b1, w2, b2, w3, b3;

  int input_resolution() const { return backbone_config.input_resolution; }
  int input_channels() const { return backbone_config.in_channels; }

  ModelOutputs<T> forward_nodes(Graph<T>& g, const Tensor<T>& images, Mode mode,
                                RngStream dropout_rng,
                                std::vector<std::pair<Param<T>*, Node<T>*>>* bindings =
                                    nullptr) {
    if (images.rank() != 4) throw shape_error("model forward expects [B,C,H,W]");
    if (images.dim(1) != backbone_config.in_channels ||
        images.dim(2) != backbone_config.input_resolution ||
        images.dim(3) != backbone_config.input_resolution)
      throw shape_error("model forward: input " + shape_str(images.shape()) +
                        " does not match configured resolution " +
                        std::to_string(backbone_config.input_resolution) + " x" +
                        std::to_string(backbone_config.in_channels) + "ch");
    BindCtx<T> ctx{g, bindings};
    ModelOutputs<T> out;
    Node<T>* x = g.constant(images);
    out.featmap = backbone.forward(ctx, x, mode);
    out.featmap_att = ops::attach_attention(ctx, out.featmap, attention);
    out.pooled = ops::global_avg_pool(g, out.featmap_att);

    Node<T>* h = ops::silu(g, ops::affine(g, out.pooled, ctx.bind(w1), ctx.bind(b1)));
    if (config.dropout_layers == 2)
      h = ops::dropout(g, h, config.dropout_p, mode, dropout_rng.fork(0));
    out.embedding = ops::silu(g, ops::affine(g, h, ctx.bind(w2), ctx.bind(b2)));
    h = ops::dropout(g, out.embedding, config.dropout_p, mode, dropout_rng.fork(1));
    out.logits = ops::affine(g, h, ctx.bind(w3), ctx.bind(b3));
    out.probs = ops::softmax(g, out.logits, 1);
    return out;
  }

  // Eval-mode probabilities, no tape kept.
  Tensor<T> forward(const Tensor<T>& images) {
    Graph<T> g(false);
    return forward_nodes(g, images, Mode::eval, RngStream()).probs->value;
  }

  // Classes with their probabilities, descending; ties broken by ascending
  // class index.
  std::vector<std::vector<std::pair<int, T>>> predict_topk(const Tensor<T>& images, int k) {
    if (k < 1 || k > config.num_classes)
      throw usage_error("predict_topk: k must be in [1, num_classes]");
    Tensor<T> probs = forward(images);
    return topk_from_probs(probs, k);
  }

  std::vector<std::vector<std::pair<int, T>>> topk_from_probs(const Tensor<T>& probs,
                                                              int k) const {
    const int b = probs.dim(0), kk = probs.dim(1);
    std::vector<std::vector<std::pair<int, T>>> result(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
      std::vector<std::pair<int, T>> row(static_cast<std::size_t>(kk));
      for (int j = 0; j < kk; ++j) row[static_cast<std::size_t>(j)] = {j, probs.at({i, j})};
      std::sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
      });
      row.resize(static_cast<std::size_t>(k));
      result[static_cast<std::size_t>(i)] = std::move(row);
    }
    return result;
  }

  // Second hidden activation, eval mode: [B, mlp_h2].
  Tensor<T> extract_embedding(const Tensor<T>& images) {
    Graph<T> g(false);
    return forward_nodes(g, images, Mode::eval, RngStream()).embedding->value;
  }

  void collect(std::vector<Param<T>*>& params, std::vector<NamedTensor<T>>& buffers) {
    backbone.collect(params, buffers);
    attention.collect(params);
    params.push_back(&w1);
    params.push_back(&b1);
    params.push_back(&w2);
    params.push_back(&b2);
    params.push_back(&w3);
    params.push_back(&b3);
  }

  std::vector<Param<T>*> trainable_params() {
    std::vector<Param<T>*> all;
    std::vector<NamedTensor<T>> buffers;
    collect(all, buffers);
    std::vector<Param<T>*> out;
    for (auto* p : all)
      if (p->trainable) out.push_back(p);
    return out;
  }

  // Every tensor that belongs in a checkpoint: parameters plus BN stats.
  std::vector<NamedTensor<T>> named_tensors() {
    std::vector<Param<T>*> params;
    std::vector<NamedTensor<T>> buffers;
    collect(params, buffers);
    std::vector<NamedTensor<T>> out;
    out.reserve(params.size() + buffers.size());
    for (auto* p : params) out.emplace_back(p->name, &p->value);
    for (auto& b : buffers) out.push_back(b);
    return out;
  }

  ParamCounts<T> counts() {
    ParamCounts<T> c;
    c.backbone = backbone.trainable_count();
    c.attention = attention.trainable_count();
    for (Param<T>* p : {&w1, &b1, &w2, &b2, &w3, &b3})
      if (p->trainable) c.head += p->numel();
    return c;
  }
};

template <class T>
Model<T> build_model(const ModelConfig& config, const BackboneConfig& backbone_config,
                     std::uint64_t seed) {
  config.validate();
  backbone_config.validate();
  Model<T> m;
  m.config = config;
  m.backbone_config = backbone_config;
  InitCtx init{seed};
  m.backbone = build_backbone<T>(backbone_config, seed, &init, config.freeze_prefix - 1);
  m.attention.build(config.attention, backbone_config.head_channels, config.mha_heads, init);

  const int cf = backbone_config.head_channels;
  m.w1 = {"mlp.w1", Tensor<T>({cf, config.mlp_h1}), true};
  m.b1 = {"mlp.b1", Tensor<T>({config.mlp_h1}), true};
  m.w2 = {"mlp.w2", Tensor<T>({config.mlp_h1, config.mlp_h2}), true};
  m.b2 = {"mlp.b2", Tensor<T>({config.mlp_h2}), true};
  m.w3 = {"mlp.w3", Tensor<T>({config.mlp_h2, config.num_classes}), true};
  m.b3 = {"mlp.b3", Tensor<T>({config.num_classes}), true};
  init_dense(m.w1.value, init);
  init_dense(m.w2.value, init);
  init_dense(m.w3.value, init);
  return m;
}

}  // namespace fpc
