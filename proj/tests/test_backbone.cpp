#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fpc/backbone.hpp"
#include "fpc/config.hpp"
#include "fpc/train.hpp"

using namespace fpc;
using Catch::Approx;

namespace {

// Independent shape walk over a stage table; arithmetic only, no builders.
long long walk_block(BlockKind kind, int in_c, int out_c, double e, int k, double se_ratio) {
  long long n = 0;
  const int exp = static_cast<int>(std::lround(in_c * e));
  const bool unit = exp == in_c;
  const int sew = se_ratio > 0 ? std::max(1, static_cast<int>(std::floor(in_c * se_ratio))) : 0;
  auto bn = [](int c) { return 2LL * c; };
  auto se = [&](int channels) {
    return static_cast<long long>(channels) * sew + sew +
           static_cast<long long>(sew) * channels + channels;
  };
  if (kind == BlockKind::mbconv) {
    if (!unit) n += static_cast<long long>(exp) * in_c + bn(exp);
    n += static_cast<long long>(exp) * k * k + bn(exp);
    if (sew) n += se(exp);
    n += static_cast<long long>(out_c) * exp + bn(out_c);
  } else {
    if (!unit) {
      n += static_cast<long long>(exp) * in_c * k * k + bn(exp);
      if (sew) n += se(exp);
      n += static_cast<long long>(out_c) * exp + bn(out_c);
    } else {
      n += static_cast<long long>(out_c) * in_c * k * k + bn(out_c);
    }
  }
  return n;
}

long long walk_backbone(const BackboneConfig& cfg) {
  long long n = static_cast<long long>(cfg.stem_channels) * cfg.in_channels * 9 +
                2LL * cfg.stem_channels;
  int c = cfg.stem_channels;
  for (const auto& st : cfg.stages) {
    for (int r = 0; r < st.num_repeats; ++r) {
      n += walk_block(st.kind, c, st.out_channels, st.expansion, st.kernel, st.se_ratio);
      c = st.out_channels;
    }
  }
  n += static_cast<long long>(cfg.head_channels) * c + 2LL * cfg.head_channels;
  return n;
}

template <class T>
Tensor<T> random_input(Shape shape, std::uint64_t seed) {
  RngStream rng = RngStream::make(seed, "bb-test-input", 0);
  Tensor<T> t(std::move(shape));
  T* p = t.mut();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng.uniform());
  return t;
}

}  // namespace

TEST_CASE("micro backbone parameter count matches the analytic shape walk") {
  auto bb = build_backbone<double>(micro_backbone(), 1);
  CHECK(bb.trainable_count() == walk_backbone(micro_backbone()));
}

TEST_CASE("parameter count is a pure function of the config") {
  auto a = build_backbone<double>(micro_backbone(), 1);
  auto b = build_backbone<double>(micro_backbone(), 999);
  CHECK(a.trainable_count() == b.trainable_count());
}

TEST_CASE("config with zero stages is rejected") {
  BackboneConfig cfg = micro_backbone();
  cfg.stages.clear();
  CHECK_THROWS_AS(build_backbone<double>(cfg, 0), usage_error);
}

TEST_CASE("b0 backbone size sits within 5% of the published total minus head") {
  BackboneConfig b0 = load_backbone_config(std::string(FPC_SOURCE_DIR) +
                                           "/configs/backbones/b0.bb");
  auto bb = build_backbone<float>(b0, 0);
  const double expected = 4133833.0 - 84262.0;  // published total minus MLP head
  const double count = static_cast<double>(bb.trainable_count());
  CHECK(std::abs(count - expected) / expected < 0.05);
}

TEST_CASE("micro forward shape follows the stride product") {
  BackboneConfig cfg = micro_backbone();
  CHECK(cfg.total_stride() == 16);
  auto bb = build_backbone<float>(cfg, 3);
  Graph<float> g(false);
  BindCtx<float> ctx{g, nullptr};
  auto* y = bb.forward(ctx, g.constant(random_input<float>({2, 1, 64, 64}, 5)), Mode::eval);
  CHECK(y->value.shape() == Shape{2, 192, 4, 4});
}

TEST_CASE("doubling the input resolution quadruples the feature area") {
  auto bb = build_backbone<float>(micro_backbone(), 3);
  Graph<float> g(false);
  BindCtx<float> ctx{g, nullptr};
  auto* a = bb.forward(ctx, g.constant(random_input<float>({1, 1, 64, 64}, 6)), Mode::eval);
  auto* b = bb.forward(ctx, g.constant(random_input<float>({1, 1, 128, 128}, 6)), Mode::eval);
  CHECK(a->value.dim(1) == b->value.dim(1));
  CHECK(b->value.dim(2) == 2 * a->value.dim(2));
  CHECK(b->value.dim(3) == 2 * a->value.dim(3));
}

TEST_CASE("indivisible input resolution is rejected") {
  auto bb = build_backbone<float>(micro_backbone(), 3);
  Graph<float> g(false);
  BindCtx<float> ctx{g, nullptr};
  CHECK_THROWS_AS(bb.forward(ctx, g.constant(Tensor<float>({1, 1, 60, 60})), Mode::eval),
                  shape_error);
}

TEST_CASE("batch of identical images gives identical feature rows in eval mode") {
  auto bb = build_backbone<float>(micro_backbone(), 7);
  Tensor<float> one = random_input<float>({1, 1, 64, 64}, 8);
  Tensor<float> batch({3, 1, 64, 64});
  for (int i = 0; i < 3; ++i)
    std::copy(one.data(), one.data() + one.numel(), batch.mut() + i * one.numel());
  Graph<float> g(false);
  BindCtx<float> ctx{g, nullptr};
  auto* y = bb.forward(ctx, g.constant(batch), Mode::eval);
  const std::int64_t row = y->value.numel() / 3;
  for (int i = 1; i < 3; ++i)
    for (std::int64_t j = 0; j < row; ++j)
      CHECK(y->value.data()[j] == y->value.data()[i * row + j]);
}

TEST_CASE("b0 geometry: 224x224 input maps to 7x7x1280") {
  BackboneConfig b0 = load_backbone_config(std::string(FPC_SOURCE_DIR) +
                                           "/configs/backbones/b0.bb");
  auto bb = build_backbone<float>(b0, 0);
  Graph<float> g(false);
  BindCtx<float> ctx{g, nullptr};
  auto* y = bb.forward(ctx, g.constant(random_input<float>({1, 3, 224, 224}, 9)), Mode::eval);
  CHECK(y->value.shape() == Shape{1, 1280, 7, 7});
}

TEST_CASE("residual blocks with zeroed conv paths are exact identities") {
  auto bb = build_backbone<double>(micro_backbone(), 11);

  SECTION("fused block, stage 0") {
    Block<double>& blk = bb.stages[0][0];
    REQUIRE(blk.residual);
    std::fill(blk.expand_w.value.mut(),
              blk.expand_w.value.mut() + blk.expand_w.value.numel(), 0.0);
    Tensor<double> x = random_input<double>({1, 16, 8, 8}, 12);
    Graph<double> g(false);
    BindCtx<double> ctx{g, nullptr};
    auto* y = blk.forward(ctx, g.constant(x), Mode::eval);
    CHECK(max_abs_diff(y->value, x) == 0.0);
  }

  SECTION("mbconv block, stage 2 repeat 1") {
    Block<double>& blk = bb.stages[2][1];
    REQUIRE(blk.residual);
    REQUIRE(blk.kind == BlockKind::mbconv);
    std::fill(blk.project_w.value.mut(),
              blk.project_w.value.mut() + blk.project_w.value.numel(), 0.0);
    Tensor<double> x = random_input<double>({2, 64, 4, 4}, 13);
    Graph<double> g(false);
    BindCtx<double> ctx{g, nullptr};
    auto* y = blk.forward(ctx, g.constant(x), Mode::eval);
    CHECK(max_abs_diff(y->value, x) == 0.0);
  }
}

TEST_CASE("stride-2 blocks halve the spatial dims with same padding") {
  auto bb = build_backbone<float>(micro_backbone(), 14);
  Block<float>& blk = bb.stages[1][0];  // fused, stride 2
  REQUIRE(blk.stride == 2);
  Graph<float> g(false);
  BindCtx<float> ctx{g, nullptr};
  auto* y = blk.forward(ctx, g.constant(random_input<float>({1, 16, 32, 32}, 15)), Mode::eval);
  CHECK(y->value.dim(2) == 16);
  CHECK(y->value.dim(3) == 16);
}

TEST_CASE("expansion 4 on 8 input channels builds a width-32 inner stage") {
  StageSpec spec{BlockKind::mbconv, 4.0, 8, 1, 1, 3, 0.25};
  InitCtx init{0};
  Block<double> blk;
  blk.build("t", spec, 8, 1, init, true);
  CHECK(blk.expanded == 32);
  CHECK(blk.expand_w.value.shape() == Shape{32, 8, 1, 1});
  CHECK(blk.dw_w.value.shape() == Shape{32, 1, 3, 3});
  // SE squeeze width is a quarter of the block input width.
  CHECK(blk.se.w1.value.shape() == Shape{32, 2});
}

TEST_CASE("se_block gate behavior") {
  // Zero excitation weights force a 0.5 gate on every channel.
  InitCtx init{0};
  SEBlock<double> se;
  se.build("se", 4, 2, init, true);
  std::fill(se.w2.value.mut(), se.w2.value.mut() + se.w2.value.numel(), 0.0);
  Tensor<double> x = random_input<double>({1, 4, 3, 3}, 17);
  Graph<double> g(false);
  BindCtx<double> ctx{g, nullptr};
  auto* y = se.forward(ctx, g.constant(x));
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(y->value.data()[i] == Approx(0.5 * x.data()[i]));

  // Saturating the excitation bias pushes the gate to the upper bound x.
  std::fill(se.b2.value.mut(), se.b2.value.mut() + se.b2.value.numel(), 50.0);
  auto* up = se.forward(ctx, g.constant(x));
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(up->value.data()[i] == Approx(x.data()[i]).margin(1e-9));

  // Hand-set weights on a constant input against the direct formula.
  SEBlock<double> se2;
  se2.build("se2", 2, 1, init, true);
  se2.w1.value = Tensor<double>({2, 1}, {0.5, -0.25});
  se2.b1.value = Tensor<double>({1}, {0.1});
  se2.w2.value = Tensor<double>({1, 2}, {1.0, -2.0});
  se2.b2.value = Tensor<double>({2}, {0.0, 0.3});
  const double c0 = 0.8, c1 = 0.4;
  Tensor<double> xc({1, 2, 2, 2});
  for (int i = 0; i < 4; ++i) {
    xc.mut()[i] = c0;
    xc.mut()[4 + i] = c1;
  }
  auto* out = se2.forward(ctx, g.constant(xc));
  const double pre = 0.5 * c0 - 0.25 * c1 + 0.1;
  const double hidden = pre / (1.0 + std::exp(-pre)) ;  // silu
  const double gate0 = 1.0 / (1.0 + std::exp(-(hidden * 1.0 + 0.0)));
  const double gate1 = 1.0 / (1.0 + std::exp(-(hidden * -2.0 + 0.3)));
  CHECK(out->value.at({0, 0, 0, 0}) == Approx(gate0 * c0));
  CHECK(out->value.at({0, 1, 1, 1}) == Approx(gate1 * c1));
}

TEST_CASE("gradients reach every backbone parameter after one optimizer step") {
  BackboneConfig cfg = micro_backbone();
  cfg.input_resolution = 32;
  auto bb = build_backbone<double>(cfg, 19);
  Tensor<double> x = random_input<double>({2, 1, 32, 32}, 20);
  Adam<double> adam(1e-3, 0.9, 0.999, 1e-8);

  // Residual blocks start with a zero-initialized last BN gamma, so their
  // conv paths carry no gradient until that gamma moves off zero; run one
  // update first, then check the second backward pass.
  for (int pass = 0; pass < 2; ++pass) {
    Graph<double> g;
    std::vector<std::pair<Param<double>*, Node<double>*>> bindings;
    BindCtx<double> ctx{g, &bindings};
    auto* y = bb.forward(ctx, g.constant(x), Mode::train);
    g.backward(ops::sum(g, y));
    if (pass == 0) {
      adam.step(bindings);
      continue;
    }
    for (const auto& [param, leaf] : bindings) {
      REQUIRE(leaf->grad.defined());
      double mx = 0;
      for (std::int64_t i = 0; i < leaf->grad.numel(); ++i)
        mx = std::max(mx, std::abs(leaf->grad.data()[i]));
      INFO("parameter " << param->name);
      CHECK(mx > 0.0);
    }
  }
}
