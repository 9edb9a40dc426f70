// Feature-extraction backbones assembled from MBConv / Fused-MBConv stages
// with optional squeeze-and-excitation gating, instantiated from a
// declarative stage table.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fpc/ops.hpp"
#include "fpc/params.hpp"

namespace fpc {

enum class BlockKind { mbconv, fused_mbconv };

struct StageSpec {
  BlockKind kind = BlockKind::mbconv;
  double expansion = 1.0;
  int out_channels = 0;
  int num_repeats = 1;
  int stride = 1;  // applies to the first block of the stage
  int kernel = 3;
  double se_ratio = 0.0;  // fraction of the block input channels; 0 = no SE
};

struct BackboneConfig {
  std::string name = "micro";
  int in_channels = 1;
  int stem_channels = 16;
  std::vector<StageSpec> stages;
  int head_channels = 0;
  int input_resolution = 64;

  int total_stride() const {
    int s = 2;  // stem
    for (const auto& st : stages) s *= st.stride;
    return s;
  }

  void validate() const {
    if (stages.empty()) throw usage_error("backbone config: at least one stage required");
    if (in_channels < 1 || stem_channels < 1 || input_resolution < 1)
      throw usage_error("backbone config: channels and resolution must be positive");
    for (const auto& st : stages) {
      if (st.out_channels < 1) throw usage_error("backbone config: out_channels must be positive");
      if (st.num_repeats < 1) throw usage_error("backbone config: num_repeats must be positive");
      if (st.stride != 1 && st.stride != 2)
        throw usage_error("backbone config: stride must be 1 or 2");
      if (st.kernel != 3 && st.kernel != 5)
        throw usage_error("backbone config: kernel must be 3 or 5");
      if (st.expansion <= 0) throw usage_error("backbone config: expansion must be positive");
      if (st.se_ratio < 0 || st.se_ratio > 1)
        throw usage_error("backbone config: se_ratio must be in [0,1]");
    }
    if (head_channels < stages.back().out_channels)
      throw usage_error("backbone config: head_channels must be >= last stage out_channels");
  }
};

// Desk-scale default: every block kind at < 1M parameters.
inline BackboneConfig micro_backbone() {
  BackboneConfig cfg;
  cfg.name = "micro";
  cfg.in_channels = 1;
  cfg.stem_channels = 16;
  cfg.stages = {
      {BlockKind::fused_mbconv, 1.0, 16, 1, 1, 3, 0.0},
      {BlockKind::fused_mbconv, 4.0, 32, 2, 2, 3, 0.0},
      {BlockKind::mbconv, 4.0, 64, 2, 2, 3, 0.25},
      {BlockKind::mbconv, 4.0, 96, 2, 2, 3, 0.25},
  };
  cfg.head_channels = 192;
  cfg.input_resolution = 64;
  return cfg;
}

template <class T>
struct BNLayer {
  Param<T> gamma, beta;
  BNState<T> state;

  void build(const std::string& prefix, int channels, bool zero_gamma, bool trainable) {
    gamma = {prefix + ".gamma",
             zero_gamma ? Tensor<T>({channels}) : Tensor<T>::full({channels}, T(1)), trainable};
    beta = {prefix + ".beta", Tensor<T>({channels}), trainable};
    state.running_mean = Tensor<T>({channels});
    state.running_var = Tensor<T>::full({channels}, T(1));
  }

  Node<T>* forward(BindCtx<T>& ctx, Node<T>* x, Mode mode) {
    return ops::batchnorm2d(ctx.g, x, ctx.bind(gamma), ctx.bind(beta), &state, mode);
  }

  void collect(std::vector<Param<T>*>& params, std::vector<NamedTensor<T>>& buffers,
               const std::string& prefix) {
    params.push_back(&gamma);
    params.push_back(&beta);
    buffers.emplace_back(prefix + ".running_mean", &state.running_mean);
    buffers.emplace_back(prefix + ".running_var", &state.running_var);
  }
};

// Channel gate: x * sigmoid(W2 silu(W1 GAP(x)) + b2), widths fixed at build.
template <class T>
struct SEBlock {
  Param<T> w1, b1, w2, b2;

  void build(const std::string& prefix, int channels, int width, InitCtx& init,
             bool trainable) {
    w1 = {prefix + ".w1", Tensor<T>({channels, width}), trainable};
    b1 = {prefix + ".b1", Tensor<T>({width}), trainable};
    w2 = {prefix + ".w2", Tensor<T>({width, channels}), trainable};
    b2 = {prefix + ".b2", Tensor<T>({channels}), trainable};
    init_dense(w1.value, init);
    init_dense(w2.value, init);
  }

  Node<T>* forward(BindCtx<T>& ctx, Node<T>* x) {
    Graph<T>& g = ctx.g;
    Node<T>* s = ops::global_avg_pool(g, x);
    s = ops::silu(g, ops::affine(g, s, ctx.bind(w1), ctx.bind(b1)));
    s = ops::sigmoid(g, ops::affine(g, s, ctx.bind(w2), ctx.bind(b2)));
    return ops::channel_scale(g, x, s);
  }

  void collect(std::vector<Param<T>*>& params) {
    params.push_back(&w1);
    params.push_back(&b1);
    params.push_back(&w2);
    params.push_back(&b2);
  }
};

// One inverted-residual block. MBConv: expand 1x1 -> BN -> SiLU ->
// depthwise kxk -> BN -> SiLU -> SE -> project 1x1 -> BN. Fused-MBConv
// replaces expand + depthwise with a single regular kxk conv. Expansion 1
// skips the expand conv (MBConv) or the project conv (fused). The skip
// connection applies iff stride 1 and in == out; its last BN starts at
// gamma = 0 so the block is the identity at init.
template <class T>
struct Block {
  BlockKind kind;
  int in_channels = 0, out_channels = 0, expanded = 0, kernel = 3, stride = 1;
  int se_width = 0;
  bool residual = false, has_expand = false, has_project = false;

  Param<T> expand_w;  // mbconv 1x1 expand or fused kxk conv
  BNLayer<T> bn0;
  Param<T> dw_w;  // mbconv only
  BNLayer<T> bn1;
  SEBlock<T> se;
  Param<T> project_w;
  BNLayer<T> bn2;

  void build(const std::string& prefix, const StageSpec& spec, int in_c, int stride_,
             InitCtx& init, bool trainable) {
    kind = spec.kind;
    in_channels = in_c;
    out_channels = spec.out_channels;
    kernel = spec.kernel;
    stride = stride_;
    expanded = static_cast<int>(std::lround(in_c * spec.expansion));
    residual = stride == 1 && in_channels == out_channels;
    se_width = spec.se_ratio > 0
                   ? std::max(1, static_cast<int>(std::floor(in_c * spec.se_ratio)))
                   : 0;

    const bool unit_expansion = expanded == in_c;
    if (kind == BlockKind::mbconv) {
      has_expand = !unit_expansion;
      has_project = true;
      if (has_expand) {
        expand_w = {prefix + ".expand.w", Tensor<T>({expanded, in_c, 1, 1}), trainable};
        init_conv(expand_w.value, init);
        bn0.build(prefix + ".bn0", expanded, false, trainable);
      }
      dw_w = {prefix + ".dw.w", Tensor<T>({expanded, 1, kernel, kernel}), trainable};
      init_depthwise(dw_w.value, init);
      bn1.build(prefix + ".bn1", expanded, false, trainable);
    } else {
      // Fused: one regular conv to the expanded width; with expansion 1 it
      // convolves straight to out_channels and the project conv disappears.
      has_expand = true;
      has_project = !unit_expansion;
      const int conv_out = has_project ? expanded : out_channels;
      expand_w = {prefix + ".fused.w", Tensor<T>({conv_out, in_c, kernel, kernel}), trainable};
      init_conv(expand_w.value, init);
      bn0.build(prefix + ".bn0", conv_out, has_project ? false : residual, trainable);
    }
    if (se_width > 0) se.build(prefix + ".se", expanded, se_width, init, trainable);
    if (has_project) {
      project_w = {prefix + ".project.w", Tensor<T>({out_channels, expanded, 1, 1}), trainable};
      init_conv(project_w.value, init);
      bn2.build(prefix + ".bn2", out_channels, residual, trainable);
    }
  }

  Node<T>* forward(BindCtx<T>& ctx, Node<T>* x, Mode mode) {
    Graph<T>& g = ctx.g;
    Node<T>* y = x;
    if (kind == BlockKind::mbconv) {
      if (has_expand) {
        y = ops::conv2d(g, y, ctx.bind(expand_w), 1, Pad::same);
        y = ops::silu(g, bn0.forward(ctx, y, mode));
      }
      y = ops::depthwise_conv2d(g, y, ctx.bind(dw_w), stride, Pad::same);
      y = ops::silu(g, bn1.forward(ctx, y, mode));
      if (se_width > 0) y = se.forward(ctx, y);
      y = ops::conv2d(g, y, ctx.bind(project_w), 1, Pad::same);
      y = bn2.forward(ctx, y, mode);
    } else {
      y = ops::conv2d(g, y, ctx.bind(expand_w), stride, Pad::same);
      y = ops::silu(g, bn0.forward(ctx, y, mode));
      if (has_project) {
        if (se_width > 0) y = se.forward(ctx, y);
        y = ops::conv2d(g, y, ctx.bind(project_w), 1, Pad::same);
        y = bn2.forward(ctx, y, mode);
      }
    }
    if (residual) y = ops::add(g, x, y);
    return y;
  }

  void collect(std::vector<Param<T>*>& params, std::vector<NamedTensor<T>>& buffers,
               const std::string& prefix) {
    if (kind == BlockKind::mbconv) {
      if (has_expand) {
        params.push_back(&expand_w);
        bn0.collect(params, buffers, prefix + ".bn0");
      }
      params.push_back(&dw_w);
      bn1.collect(params, buffers, prefix + ".bn1");
    } else {
      params.push_back(&expand_w);
      bn0.collect(params, buffers, prefix + ".bn0");
    }
    if (se_width > 0) se.collect(params);
    if (has_project) {
      params.push_back(&project_w);
      bn2.collect(params, buffers, prefix + ".bn2");
    }
  }
};

template <class T>
struct Backbone {
  BackboneConfig config;
  Param<T> stem_w;
  BNLayer<T> stem_bn;
  std::vector<std::vector<Block<T>>> stages;
  Param<T> head_w;
  BNLayer<T> head_bn;

  int feature_channels() const { return config.head_channels; }

  // featmap [B, head_channels, H/stride, W/stride], before any pooling.
  Node<T>* forward(BindCtx<T>& ctx, Node<T>* x, Mode mode) {
    Graph<T>& g = ctx.g;
    if (x->value.rank() != 4 || x->value.dim(1) != config.in_channels)
      throw shape_error("backbone: expected input [B," + std::to_string(config.in_channels) +
                        ",H,W], got " + shape_str(x->value.shape()));
    const int total = config.total_stride();
    if (x->value.dim(2) % total != 0 || x->value.dim(3) % total != 0)
      throw shape_error("backbone: input resolution " + std::to_string(x->value.dim(2)) +
                        " not divisible by total stride " + std::to_string(total));
    Node<T>* y = ops::conv2d(g, x, ctx.bind(stem_w), 2, Pad::same);
    y = ops::silu(g, stem_bn.forward(ctx, y, mode));
    for (auto& stage : stages)
      for (auto& block : stage) y = block.forward(ctx, y, mode);
    y = ops::conv2d(g, y, ctx.bind(head_w), 1, Pad::same);
    y = ops::silu(g, head_bn.forward(ctx, y, mode));
    return y;
  }

  void collect(std::vector<Param<T>*>& params, std::vector<NamedTensor<T>>& buffers) {
    params.push_back(&stem_w);
    stem_bn.collect(params, buffers, "stem.bn");
    for (std::size_t si = 0; si < stages.size(); ++si)
      for (std::size_t bi = 0; bi < stages[si].size(); ++bi) {
        const std::string prefix =
            "s" + std::to_string(si) + ".b" + std::to_string(bi);
        stages[si][bi].collect(params, buffers, prefix);
      }
    params.push_back(&head_w);
    head_bn.collect(params, buffers, "head.bn");
  }

  std::int64_t trainable_count() {
    std::vector<Param<T>*> params;
    std::vector<NamedTensor<T>> buffers;
    collect(params, buffers);
    std::int64_t n = 0;
    for (auto* p : params)
      if (p->trainable) n += p->numel();
    return n;
  }
};

// freeze_stages < 0 freezes nothing; 0 freezes the stem; k freezes the stem
// plus the first k stages.
template <class T>
Backbone<T> build_backbone(const BackboneConfig& config, std::uint64_t seed,
                           InitCtx* shared_init = nullptr, int freeze_stages = -1) {
  config.validate();
  InitCtx local{seed};
  InitCtx& init = shared_init ? *shared_init : local;
  Backbone<T> bb;
  bb.config = config;

  bb.stem_w = {"stem.conv.w",
               Tensor<T>({config.stem_channels, config.in_channels, 3, 3}), freeze_stages < 0};
  init_conv(bb.stem_w.value, init);
  bb.stem_bn.build("stem.bn", config.stem_channels, false, freeze_stages < 0);

  int in_c = config.stem_channels;
  for (std::size_t si = 0; si < config.stages.size(); ++si) {
    const StageSpec& spec = config.stages[si];
    const bool trainable = freeze_stages < 0 || static_cast<int>(si) >= freeze_stages;
    std::vector<Block<T>> blocks(static_cast<std::size_t>(spec.num_repeats));
    for (int r = 0; r < spec.num_repeats; ++r) {
      const std::string prefix = "s" + std::to_string(si) + ".b" + std::to_string(r);
      blocks[static_cast<std::size_t>(r)].build(prefix, spec, in_c, r == 0 ? spec.stride : 1,
                                                init, trainable);
      in_c = spec.out_channels;
    }
    bb.stages.push_back(std::move(blocks));
  }

  bb.head_w = {"head.conv.w", Tensor<T>({config.head_channels, in_c, 1, 1}), true};
  init_conv(bb.head_w.value, init);
  bb.head_bn.build("head.bn", config.head_channels, false, true);
  return bb;
}

}  // namespace fpc
