#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fpc/gradcam.hpp"
#include "fpc/model.hpp"

using namespace fpc;
using Catch::Approx;

namespace {

Model<double> small_model(std::uint64_t seed, AttentionVariant v = AttentionVariant::ssa) {
  ModelConfig mc;
  mc.attention = v;
  mc.mlp_h1 = 16;
  mc.mlp_h2 = 8;
  BackboneConfig bc = micro_backbone();
  bc.input_resolution = 32;
  return build_model<double>(mc, bc, seed);
}

Tensor<double> probe_image(std::uint64_t seed) {
  RngStream rng = RngStream::make(seed, "cam-img", 0);
  Tensor<double> t({1, 32, 32});
  for (std::int64_t i = 0; i < t.numel(); ++i) t.mut()[i] = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("gradcam heatmap contracts") {
  auto model = small_model(1);
  Tensor<double> img = probe_image(2);
  Heatmap<double> hm = gradcam(model, img);

  SECTION("nonnegative everywhere, max 1 unless identically zero") {
    double mx = 0;
    for (std::int64_t i = 0; i < hm.values.numel(); ++i) {
      CHECK(hm.values.data()[i] >= 0.0);
      mx = std::max(mx, hm.values.data()[i]);
    }
    CHECK((mx == Approx(1.0).margin(1e-12) || mx == 0.0));
  }

  SECTION("heatmap shape equals the input spatial shape") {
    CHECK(hm.values.shape() == Shape{32, 32});
    CHECK(hm.feature_values.shape() == Shape{2, 2});
  }

  SECTION("target defaults to the predicted class") {
    CHECK(hm.target_class == hm.predicted_class);
    Heatmap<double> forced = gradcam(model, img, {.target_class = 3});
    CHECK(forced.target_class == 3);
  }

  SECTION("out-of-range target class is rejected") {
    CHECK_THROWS_AS(gradcam(model, img, {.target_class = 9}), usage_error);
  }

  SECTION("deterministic in eval mode") {
    Heatmap<double> again = gradcam(model, img);
    CHECK(max_abs_diff(hm.values, again.values) == 0.0);
  }
}

TEST_CASE("uniform-alpha hook reduces to ReLU of the channel sum") {
  auto model = small_model(3);
  Tensor<double> img = probe_image(4);
  Heatmap<double> hm = gradcam(model, img, {.uniform_alpha = true});

  // Recomposition oracle: run the feature extractor separately and fold
  // the channels by hand.
  Graph<double> g(false);
  auto out = model.forward_nodes(g, img.reshaped({1, 1, 32, 32}), Mode::eval, RngStream());
  const auto& fm = out.featmap->value;
  const int cf = fm.dim(1), hf = fm.dim(2), wf = fm.dim(3);
  Tensor<double> expect({hf, wf});
  for (int k = 0; k < cf; ++k)
    for (int i = 0; i < hf * wf; ++i)
      expect.mut()[i] += fm.data()[static_cast<std::int64_t>(k) * hf * wf + i];
  for (int i = 0; i < hf * wf; ++i) expect.mut()[i] = std::max(expect.mut()[i], 0.0);
  CHECK(max_abs_diff(hm.feature_values, expect) < 1e-12);
}

TEST_CASE("heatmaps are invariant to a constant logit shift") {
  auto model = small_model(5);
  Tensor<double> img = probe_image(6);
  Heatmap<double> base = gradcam(model, img);
  for (std::int64_t i = 0; i < model.b3.value.numel(); ++i) model.b3.value.mut()[i] += 7.5;
  Heatmap<double> shifted = gradcam(model, img);
  CHECK(max_abs_diff(base.values, shifted.values) < 1e-12);
}

TEST_CASE("pre- and post-attention targets both work") {
  auto model = small_model(7, AttentionVariant::sda);
  Tensor<double> img = probe_image(8);
  Heatmap<double> pre = gradcam(model, img);
  Heatmap<double> post = gradcam(model, img, {.post_attention = true});
  CHECK(pre.values.shape() == post.values.shape());
  // With attention "none" the two targets coincide.
  auto plain = small_model(7, AttentionVariant::none);
  Heatmap<double> a = gradcam(plain, img);
  Heatmap<double> b = gradcam(plain, img, {.post_attention = true});
  CHECK(max_abs_diff(a.values, b.values) == 0.0);
}

TEST_CASE("probability-target option") {
  auto model = small_model(9);
  Tensor<double> img = probe_image(10);
  Heatmap<double> viaprob = gradcam(model, img, {.use_probability = true});
  CHECK(viaprob.values.dim(0) == 32);
  double mx = 0;
  for (std::int64_t i = 0; i < viaprob.values.numel(); ++i)
    mx = std::max(mx, viaprob.values.data()[i]);
  CHECK((mx == Approx(1.0).margin(1e-12) || mx == 0.0));
}

TEST_CASE("overlay blending") {
  SECTION("alpha 0 returns the grayscale image") {
    Tensor<double> heat({2, 2});
    Tensor<double> img({1, 2, 2}, {0.0, 0.25, 0.5, 1.0});
    auto rgb = overlay(heat, img, 0.0);
    REQUIRE(rgb.size() == 12);
    const unsigned char expect[4] = {0, 64, 128, 255};
    for (int p = 0; p < 4; ++p)
      for (int c = 0; c < 3; ++c)
        CHECK(rgb[static_cast<std::size_t>(3 * p + c)] == expect[p]);
  }

  SECTION("alpha 1 with a saturated heatmap is uniformly the red end") {
    Tensor<double> heat = Tensor<double>::full({2, 2}, 1.0);
    Tensor<double> img({1, 2, 2});
    auto rgb = overlay(heat, img, 1.0);
    for (int p = 0; p < 4; ++p) {
      CHECK(rgb[static_cast<std::size_t>(3 * p)] == 255);
      CHECK(rgb[static_cast<std::size_t>(3 * p + 1)] == 0);
      CHECK(rgb[static_cast<std::size_t>(3 * p + 2)] == 0);
    }
  }

  SECTION("alpha 0.5 two-pixel fixture matches hand-computed blends") {
    // Pixel 0: heat 0.25 -> stop (0,255,255); gray 0.2 -> 51.
    // Pixel 1: heat 0.625 -> halfway green->yellow (127.5,255,0); gray 0.8 -> 204.
    Tensor<double> heat({1, 2}, {0.25, 0.625});
    Tensor<double> img({1, 1, 2}, {0.2, 0.8});
    auto rgb = overlay(heat, img, 0.5);
    CHECK(rgb[0] == std::lround(0.5 * 51 + 0.5 * 0));      // 26
    CHECK(rgb[1] == std::lround(0.5 * 51 + 0.5 * 255));    // 153
    CHECK(rgb[2] == std::lround(0.5 * 51 + 0.5 * 255));    // 153
    CHECK(rgb[3] == std::lround(0.5 * 204 + 0.5 * 127.5)); // 166
    CHECK(rgb[4] == std::lround(0.5 * 204 + 0.5 * 255));   // 230
    CHECK(rgb[5] == std::lround(0.5 * 204 + 0.5 * 0));     // 102
  }

  SECTION("size mismatch and bad alpha are rejected") {
    Tensor<double> heat({2, 2});
    Tensor<double> img({1, 3, 3});
    CHECK_THROWS_AS(overlay(heat, img, 0.5), shape_error);
    Tensor<double> ok({1, 2, 2});
    CHECK_THROWS_AS(overlay(heat, ok, 1.5), usage_error);
  }
}
