#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "fpc/model.hpp"
#include "fpc/train.hpp"

using namespace fpc;
using Catch::Approx;

namespace {

TrainConfig quiet_config() {
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.rotation_degrees = 0;
  tc.zoom_factor = 0;
  tc.resize_jitter = 0;
  tc.flip_horizontal = false;
  tc.flip_vertical = false;
  return tc;
}

template <class T>
std::vector<Sample<T>> tiny_dataset(int n, int res, std::uint64_t seed) {
  RngStream rng = RngStream::make(seed, "train-test-data", 0);
  std::vector<Sample<T>> data;
  for (int i = 0; i < n; ++i) {
    Sample<T> s;
    s.image = Tensor<T>({1, res, res});
    for (std::int64_t j = 0; j < s.image.numel(); ++j)
      s.image.mut()[j] = static_cast<T>(rng.uniform());
    s.label = i % 6;
    data.push_back(std::move(s));
  }
  return data;
}

Model<double> tiny_model(std::uint64_t seed) {
  ModelConfig mc;
  mc.attention = AttentionVariant::none;
  mc.mlp_h1 = 16;
  mc.mlp_h2 = 8;
  BackboneConfig bc = micro_backbone();
  bc.input_resolution = 32;
  return build_model<double>(mc, bc, seed);
}

}  // namespace

TEST_CASE("cce loss frozen values") {
  Graph<double> g;

  SECTION("perfect prediction gives zero loss") {
    Tensor<double> p({1, 3}, {0.0, 1.0, 0.0});
    Tensor<double> y({1, 3}, {0.0, 1.0, 0.0});
    CHECK(ops::cce_loss(g, g.constant(p), g.constant(y))->value.item() == Approx(0.0));
  }

  SECTION("uniform over six classes costs ln 6") {
    Tensor<double> p = Tensor<double>::full({2, 6}, 1.0 / 6);
    Tensor<double> y({2, 6});
    y.set({0, 2}, 1.0);
    y.set({1, 5}, 1.0);
    CHECK(ops::cce_loss(g, g.constant(p), g.constant(y))->value.item() ==
          Approx(1.791759).margin(1e-6));
  }

  SECTION("[0.7, 0.2, 0.1] with true class 1 costs -ln 0.2") {
    Tensor<double> p({1, 3}, {0.7, 0.2, 0.1});
    Tensor<double> y({1, 3}, {0.0, 1.0, 0.0});
    CHECK(ops::cce_loss(g, g.constant(p), g.constant(y))->value.item() ==
          Approx(1.609438).margin(1e-6));
  }

  SECTION("loss is nonnegative and zero only at certainty") {
    RngStream rng = RngStream::make(3, "cce-prop", 0);
    for (int t = 0; t < 100; ++t) {
      Tensor<double> logits({1, 4});
      for (int j = 0; j < 4; ++j) logits.mut()[j] = 4.0 * rng.normal();
      auto* probs = ops::softmax(g, g.constant(logits), 1);
      Tensor<double> y({1, 4});
      const int cls = static_cast<int>(rng.below(4));
      y.set({0, cls}, 1.0);
      const double loss = ops::cce_loss(g, probs, g.constant(y))->value.item();
      CHECK(loss >= 0.0);
      if (probs->value.at({0, cls}) < 1.0) CHECK(loss > 0.0);
    }
  }
}

TEST_CASE("adam optimizer") {
  SECTION("zero gradients leave parameters unchanged") {
    Tensor<double> value({3}, {1.0, -2.0, 0.5});
    Tensor<double> m({3}), v({3});
    Tensor<double> out = adam_step(value, Tensor<double>({3}), m, v, 1, 0.1, 0.9, 0.999, 1e-8);
    CHECK(max_abs_diff(out, value) == 0.0);
  }

  SECTION("first step size is about the learning rate for any gradient scale") {
    for (double scale : {1e-4, 1.0, 1e4}) {
      Tensor<double> value({1}, {0.0});
      Tensor<double> g({1}, {scale});
      Tensor<double> m({1}), v({1});
      Tensor<double> out = adam_step(value, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8);
      CHECK(std::abs(out.item()) == Approx(0.1).epsilon(1e-3));
      CHECK(out.item() < 0.0);
    }
  }

  SECTION("two scripted steps match a high-precision oracle within 1e-12") {
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Tensor<double> value({1}, {0.25});
    Tensor<double> m({1}), v({1});
    value = adam_step(value, Tensor<double>({1}, {1.0}), m, v, 1, lr, b1, b2, eps);
    value = adam_step(value, Tensor<double>({1}, {0.5}), m, v, 2, lr, b1, b2, eps);

    // Long-double reference, written straight from the update equations.
    long double p = 0.25L, lm = 0.0L, lv = 0.0L;
    const long double grads[2] = {1.0L, 0.5L};
    for (int t = 1; t <= 2; ++t) {
      const long double g = grads[t - 1];
      lm = 0.9L * lm + 0.1L * g;
      lv = 0.999L * lv + 0.001L * g * g;
      const long double mh = lm / (1.0L - std::pow(0.9L, static_cast<long double>(t)));
      const long double vh = lv / (1.0L - std::pow(0.999L, static_cast<long double>(t)));
      p -= 0.1L * mh / (std::sqrt(vh) + 1e-8L);
    }
    CHECK(std::abs(value.item() - static_cast<double>(p)) < 1e-12);
  }

  SECTION("step 1 is scale-free up to epsilon") {
    Tensor<double> m1({2}), v1({2}), m2({2}), v2({2});
    Tensor<double> start({2}, {0.0, 0.0});
    Tensor<double> g({2}, {0.3, -0.7});
    Tensor<double> gs({2}, {0.3 * 50, -0.7 * 50});
    Tensor<double> a = adam_step(start, g, m1, v1, 1, 0.01, 0.9, 0.999, 1e-8);
    Tensor<double> b = adam_step(start, gs, m2, v2, 1, 0.01, 0.9, 0.999, 1e-8);
    for (int i = 0; i < 2; ++i) {
      CHECK(std::signbit(a.data()[i]) == std::signbit(b.data()[i]));
      CHECK(a.data()[i] == Approx(b.data()[i]).epsilon(1e-4));
    }
  }
}

TEST_CASE("augmentation") {
  RngStream rng = RngStream::make(5, "aug-img", 0);
  Tensor<double> img({1, 8, 8});
  for (std::int64_t i = 0; i < img.numel(); ++i) img.mut()[i] = rng.uniform();

  SECTION("all ranges zero with flips off is the identity") {
    TrainConfig cfg = quiet_config();
    RngStream s = RngStream::make(5, "aug", 1);
    CHECK(max_abs_diff(augment(img, s, cfg), img) == 0.0);
  }

  SECTION("horizontal flip applied twice is the identity") {
    CHECK(max_abs_diff(detail::flip_horizontal(detail::flip_horizontal(img)), img) == 0.0);
    CHECK(max_abs_diff(detail::flip_vertical(detail::flip_vertical(img)), img) == 0.0);
  }

  SECTION("90 degree rotation permutes a 2x2 pattern as expected") {
    Tensor<double> pat({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});  // [[a,b],[c,d]]
    // Exact inverse-rotation matrix for +90 degrees (clockwise on screen).
    Tensor<double> rot = detail::affine_sample(pat, 0.0, 1.0, -1.0, 0.0);
    CHECK(rot.at({0, 0, 0}) == Approx(3.0));  // c
    CHECK(rot.at({0, 0, 1}) == Approx(1.0));  // a
    CHECK(rot.at({0, 1, 0}) == Approx(4.0));  // d
    CHECK(rot.at({0, 1, 1}) == Approx(2.0));  // b
  }

  SECTION("identical stream state reproduces the augmented image") {
    TrainConfig cfg;
    RngStream a = RngStream::make(9, "aug", 7);
    RngStream b = RngStream::make(9, "aug", 7);
    CHECK(max_abs_diff(augment(img, a, cfg), augment(img, b, cfg)) == 0.0);
  }
}

TEST_CASE("stratified split") {
  auto manifest_with = [](const std::vector<int>& counts) {
    DatasetManifest m;
    for (std::size_t c = 0; c < counts.size(); ++c)
      for (int i = 0; i < counts[c]; ++i)
        m.records.push_back({"img_" + std::to_string(c) + "_" + std::to_string(i) + ".pgm",
                             default_labels()[c], "p" + std::to_string(i / 3)});
    return m;
  };

  SECTION("published per-class train/test counts are reproduced exactly") {
    const std::vector<int> planes{711, 3092, 1040, 1718, 1626, 4213};
    const std::vector<int> want_train{569, 2474, 832, 1374, 1301, 3370};
    const std::vector<int> want_test{142, 618, 208, 344, 325, 843};
    auto [train, test] = stratified_split(manifest_with(planes), 0.8, 123);
    auto tc = train.class_counts();
    auto sc = test.class_counts();
    for (std::size_t c = 0; c < planes.size(); ++c) {
      CHECK(tc[default_labels()[c]] == want_train[c]);
      CHECK(sc[default_labels()[c]] == want_test[c]);
    }
    CHECK(train.records.size() + test.records.size() == 12400);
  }

  SECTION("class of 10 at fraction 0.8 splits 8/2 for any seed, deterministically") {
    DatasetManifest m = manifest_with({10, 10, 10, 10, 10, 10});
    for (std::uint64_t seed : {0ull, 1ull, 42ull, 987654321ull}) {
      auto [train, test] = stratified_split(m, 0.8, seed);
      for (const auto& lbl : default_labels()) {
        CHECK(train.class_counts()[lbl] == 8);
        CHECK(test.class_counts()[lbl] == 2);
      }
      auto [train2, test2] = stratified_split(m, 0.8, seed);
      REQUIRE(test.records.size() == test2.records.size());
      for (std::size_t i = 0; i < test.records.size(); ++i)
        CHECK(test.records[i].path == test2.records[i].path);
    }
  }

  SECTION("split is a partition: no overlap, full coverage, order preserved") {
    DatasetManifest m = manifest_with({7, 9, 12, 5, 8, 21});
    auto [train, test] = stratified_split(m, 0.8, 5);
    std::unordered_set<std::string> seen;
    for (const auto& r : train.records) seen.insert(r.path);
    for (const auto& r : test.records) CHECK(!seen.count(r.path));
    CHECK(train.records.size() + test.records.size() == m.records.size());
    // Proportions within one sample per class.
    for (const auto& [label, n] : m.class_counts()) {
      const double expect = 0.2 * n;
      CHECK(std::abs(test.class_counts()[label] - expect) <= 1.0);
    }
  }

  SECTION("a vocabulary class with no records is an error") {
    DatasetManifest m = manifest_with({4, 4, 4, 4, 4});  // missing class O
    CHECK_THROWS_AS(stratified_split(m, 0.8, 0), data_error);
  }

  SECTION("patient-wise split never separates a patient") {
    DatasetManifest m = manifest_with({20, 20, 20, 20, 20, 20});
    auto [train, test] = stratified_split(m, 0.8, 3, true);
    std::unordered_set<std::string> test_patients;
    for (const auto& r : test.records) test_patients.insert(r.label + "/" + r.patient_id);
    for (const auto& r : train.records)
      CHECK(!test_patients.count(r.label + "/" + r.patient_id));
  }
}

TEST_CASE("train_loop contracts") {
  SECTION("learning rate zero leaves parameters bitwise unchanged") {
    auto model = tiny_model(21);
    auto before = model.named_tensors();
    std::vector<Tensor<double>> copies;
    for (auto& [name, t] : before) copies.push_back(t->clone());
    TrainConfig cfg = quiet_config();
    cfg.learning_rate = 0.0;
    auto data = tiny_dataset<double>(6, 32, 1);
    train_loop(model, data, cfg);
    auto after = model.named_tensors();
    for (std::size_t i = 0; i < after.size(); ++i) {
      if (after[i].first.find("running_") != std::string::npos) continue;  // BN stats move
      CHECK(max_abs_diff(*after[i].second, copies[i]) == 0.0);
    }
  }

  SECTION("one epoch on 10 samples with batch 4 takes exactly 3 steps") {
    auto model = tiny_model(22);
    TrainConfig cfg = quiet_config();
    auto logs = train_loop(model, tiny_dataset<double>(10, 32, 2), cfg);
    REQUIRE(logs.size() == 1);
    CHECK(logs[0].steps == 3);
  }

  SECTION("fixed seed is bitwise reproducible") {
    TrainConfig cfg = quiet_config();
    cfg.epochs = 2;
    cfg.rotation_degrees = 10;
    cfg.zoom_factor = 0.1;
    cfg.flip_horizontal = true;
    auto data = tiny_dataset<double>(8, 32, 3);
    auto m1 = tiny_model(23);
    auto m2 = tiny_model(23);
    auto l1 = train_loop(m1, data, cfg);
    auto l2 = train_loop(m2, data, cfg);
    CHECK(l1.back().mean_loss == l2.back().mean_loss);
    auto t1 = m1.named_tensors();
    auto t2 = m2.named_tensors();
    for (std::size_t i = 0; i < t1.size(); ++i)
      CHECK(max_abs_diff(*t1[i].second, *t2[i].second) == 0.0);
  }

  SECTION("empty training set is a data error") {
    auto model = tiny_model(24);
    std::vector<Sample<double>> empty;
    CHECK_THROWS_AS(train_loop(model, empty, quiet_config()), data_error);
  }

  SECTION("non-finite values surface as a training failure with context") {
    auto model = tiny_model(25);
    auto data = tiny_dataset<double>(4, 32, 4);
    data[1].image.mut()[5] = std::numeric_limits<double>::quiet_NaN();
    try {
      train_loop(model, data, quiet_config());
      FAIL("expected numeric_error");
    } catch (const numeric_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("epoch 1") != std::string::npos);
      CHECK(msg.find("step") != std::string::npos);
    }
  }
}
