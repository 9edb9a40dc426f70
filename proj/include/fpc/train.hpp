// Loss is in ops (cce_loss); this header adds the Adam optimizer, geometric
// augmentation, the stratified split and the training loop.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fpc/manifest.hpp"
#include "fpc/model.hpp"
#include "fpc/ops.hpp"
#include "fpc/rng.hpp"

namespace fpc {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double rotation_degrees = 15.0;
  double zoom_factor = 0.10;
  double resize_jitter = 0.10;
  bool flip_horizontal = true;
  bool flip_vertical = true;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;

  void validate() const {
    if (epochs < 1) throw usage_error("epochs must be >= 1");
    if (batch_size < 1) throw usage_error("batch_size must be >= 1");
    if (train_fraction <= 0 || train_fraction >= 1)
      throw usage_error("train_fraction must be in (0,1)");
    if (rotation_degrees < 0 || zoom_factor < 0 || zoom_factor >= 1 || resize_jitter < 0 ||
        resize_jitter >= 1)
      throw usage_error("augmentation ranges out of domain");
  }
};

// ---- Adam ------------------------------------------------------------------

// One bias-corrected Adam update for a single tensor; m and v are the
// running moments, t the step count after incrementing.
template <class T>
Tensor<T> adam_step(const Tensor<T>& value, const Tensor<T>& grad, Tensor<T>& m,
                    Tensor<T>& v, long long t, double lr, double beta1, double beta2,
                    double eps) {
  if (!value.same_shape(grad) || !value.same_shape(m) || !value.same_shape(v))
    throw shape_error("adam_step: mismatched shapes");
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  Tensor<T> out(value.shape());
  Tensor<T> m_new(value.shape()), v_new(value.shape());
  const T* pv = value.data();
  const T* pg = grad.data();
  const T* pm = m.data();
  const T* pq = v.data();
  T* om = m_new.mut();
  T* ov = v_new.mut();
  T* oo = out.mut();
  for (std::int64_t i = 0, n = value.numel(); i < n; ++i) {
    const double g = pg[i];
    const double mi = beta1 * pm[i] + (1.0 - beta1) * g;
    const double vi = beta2 * pq[i] + (1.0 - beta2) * g * g;
    om[i] = static_cast<T>(mi);
    ov[i] = static_cast<T>(vi);
    const double mhat = mi / c1;
    const double vhat = vi / c2;
    oo[i] = static_cast<T>(pv[i] - lr * mhat / (std::sqrt(vhat) + eps));
  }
  m = m_new;
  v = v_new;
  return out;
}

template <class T>
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  long long step_count() const { return t_; }

  // Applies one update to every trainable bound parameter. Leaves whose
  // gradient never materialized count as zero gradient.
  void step(const std::vector<std::pair<Param<T>*, Node<T>*>>& bindings) {
    ++t_;
    for (const auto& [param, leaf] : bindings) {
      if (!param->trainable) continue;
      auto& st = states_[param];
      if (!st.m.defined() || st.m.numel() != param->numel()) {
        st.m = Tensor<T>(param->value.shape());
        st.v = Tensor<T>(param->value.shape());
      }
      const Tensor<T> grad = leaf->grad.defined() && leaf->grad.numel() > 0
                                 ? leaf->grad
                                 : Tensor<T>(param->value.shape());
      param->value = adam_step(param->value, grad, st.m, st.v, t_, lr_, beta1_, beta2_, eps_);
    }
  }

 private:
  struct State {
    Tensor<T> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::unordered_map<Param<T>*, State> states_;
};

// ---- geometric augmentation --------------------------------------------------

namespace detail {

// dst pixel (i,j) samples src at center + A * (dst - center); zeros outside.
template <class T>
Tensor<T> affine_sample(const Tensor<T>& img, double a00, double a01, double a10,
                        double a11) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  Tensor<T> out(img.shape());
  T* dst = out.mut();
  for (int ch = 0; ch < c; ++ch) {
    const T* src = img.data() + static_cast<std::int64_t>(ch) * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double dx = j - cx, dy = i - cy;
        const double sx = cx + a00 * dx + a01 * dy;
        const double sy = cy + a10 * dx + a11 * dy;
        double v = 0;
        if (sx >= 0 && sx <= w - 1 && sy >= 0 && sy <= h - 1) {
          const int x0 = static_cast<int>(std::floor(sx));
          const int y0 = static_cast<int>(std::floor(sy));
          const int x1 = std::min(x0 + 1, w - 1);
          const int y1 = std::min(y0 + 1, h - 1);
          const double fx = sx - x0, fy = sy - y0;
          const double top = src[y0 * w + x0] + (src[y0 * w + x1] - src[y0 * w + x0]) * fx;
          const double bot = src[y1 * w + x0] + (src[y1 * w + x1] - src[y1 * w + x0]) * fx;
          v = top + (bot - top) * fy;
        }
        dst[static_cast<std::int64_t>(ch) * h * w + static_cast<std::int64_t>(i) * w + j] =
            static_cast<T>(v);
      }
  }
  return out;
}

template <class T>
Tensor<T> flip_horizontal(const Tensor<T>& img) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<T> out(img.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out.mut()[(static_cast<std::int64_t>(ch) * h + i) * w + j] =
            img.data()[(static_cast<std::int64_t>(ch) * h + i) * w + (w - 1 - j)];
  return out;
}

template <class T>
Tensor<T> flip_vertical(const Tensor<T>& img) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<T> out(img.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out.mut()[(static_cast<std::int64_t>(ch) * h + i) * w + j] =
            img.data()[(static_cast<std::int64_t>(ch) * h + (h - 1 - i)) * w + j];
  return out;
}

}  // namespace detail

// In order: rotation in +-rotation_degrees (positive = clockwise on screen),
// zoom in [1-z, 1+z], resize jitter in +-resize_jitter, then each enabled
// flip with probability 1/2; the result is resized back to the input size.
// All random draws happen even for disabled transforms so the stream layout
// is independent of the config.
template <class T>
Tensor<T> augment(const Tensor<T>& image, RngStream& rng, const TrainConfig& cfg) {
  if (image.rank() != 3) throw shape_error("augment expects [C,H,W]");
  const int h = image.dim(1), w = image.dim(2);
  const double theta =
      rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees) * std::numbers::pi / 180.0;
  const double zoom = 1.0 + rng.uniform(-cfg.zoom_factor, cfg.zoom_factor);
  const double jitter = rng.uniform(-cfg.resize_jitter, cfg.resize_jitter);
  const bool fh = rng.uniform() < 0.5;
  const bool fv = rng.uniform() < 0.5;

  Tensor<T> out = image;
  if (theta != 0.0) {
    // Inverse rotation matrix R(-theta) in (x, y) screen coordinates.
    const double c = std::cos(theta), s = std::sin(theta);
    out = detail::affine_sample(out, c, s, -s, c);
  }
  if (zoom != 1.0) out = detail::affine_sample(out, 1.0 / zoom, 0.0, 0.0, 1.0 / zoom);
  if (jitter != 0.0) {
    const int jh = std::max(1, static_cast<int>(std::lround(h * (1.0 + jitter))));
    const int jw = std::max(1, static_cast<int>(std::lround(w * (1.0 + jitter))));
    if (jh != h || jw != w) out = bilinear_resize(bilinear_resize(out, jh, jw), h, w);
  }
  if (cfg.flip_horizontal && fh) out = detail::flip_horizontal(out);
  if (cfg.flip_vertical && fv) out = detail::flip_vertical(out);
  return out;
}

// ---- stratified split --------------------------------------------------------

// Per class, the test share is round((1 - train_fraction) * n), half away
// from zero; membership comes from a seeded shuffle within the class.
// patient_wise assigns whole patients instead; its per-class counts are
// then only approximate.
inline std::pair<DatasetManifest, DatasetManifest> stratified_split(
    const DatasetManifest& manifest, double train_fraction, std::uint64_t seed,
    bool patient_wise = false) {
  if (train_fraction <= 0 || train_fraction >= 1)
    throw usage_error("train_fraction must be in (0,1)");
  if (manifest.records.empty()) throw data_error("stratified_split: empty manifest");

  std::vector<bool> in_test(manifest.records.size(), false);
  for (std::size_t ci = 0; ci < manifest.vocabulary.size(); ++ci) {
    const std::string& label = manifest.vocabulary[ci];
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].label == label) members.push_back(i);
    if (members.empty())
      throw data_error("stratified_split: class '" + label + "' has no records");
    const long long test_n =
        std::llround((1.0 - train_fraction) * static_cast<double>(members.size()));
    RngStream rng = RngStream::make(seed, "split", ci);

    if (!patient_wise) {
      // Fisher-Yates; the last test_n positions form the test set.
      for (std::size_t i = members.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(members[i - 1], members[j]);
      }
      for (std::size_t i = members.size() - static_cast<std::size_t>(test_n);
           i < members.size(); ++i)
        in_test[members[i]] = true;
    } else {
      std::vector<std::string> patients;
      std::map<std::string, std::vector<std::size_t>> groups;
      for (std::size_t i : members) {
        const std::string& pid = manifest.records[i].patient_id;
        if (!groups.count(pid)) patients.push_back(pid);
        groups[pid].push_back(i);
      }
      for (std::size_t i = patients.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(patients[i - 1], patients[j]);
      }
      long long assigned = 0;
      for (const auto& pid : patients) {
        if (assigned >= test_n) break;
        for (std::size_t i : groups[pid]) in_test[i] = true;
        assigned += static_cast<long long>(groups[pid].size());
      }
    }
  }

  DatasetManifest train, test;
  train.vocabulary = manifest.vocabulary;
  test.vocabulary = manifest.vocabulary;
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    (in_test[i] ? test : train).records.push_back(manifest.records[i]);
  return {std::move(train), std::move(test)};
}

// ---- training loop -----------------------------------------------------------

template <class T>
struct Sample {
  Tensor<T> image;  // [C, R, R] at the model resolution
  int label = 0;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0;
  double accuracy = 0;
  double seconds = 0;
  long long steps = 0;  // optimizer steps taken this epoch
};

// epochs * ceil(N / batch) Adam steps; per-epoch mean loss and accuracy on
// the augmented training stream. Fixed seed implies a bit-identical run.
template <class T>
std::vector<EpochLog> train_loop(
    Model<T>& model, const std::vector<Sample<T>>& data, const TrainConfig& cfg,
    const std::function<void(const EpochLog&)>& on_epoch = nullptr) {
  cfg.validate();
  if (data.empty()) throw data_error("train_loop: empty training set");
  const int k = model.config.num_classes;
  const std::size_t n = data.size();
  Adam<T> adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  std::vector<EpochLog> logs;
  long long global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    RngStream shuffle = RngStream::make(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.below(i))]);

    double loss_sum = 0;
    std::size_t correct = 0;
    long long epoch_steps = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bk = std::min(static_cast<std::size_t>(cfg.batch_size), n - start);
      const int res = model.input_resolution();
      const int ch = model.input_channels();
      Tensor<T> batch({static_cast<int>(bk), ch, res, res});
      Tensor<T> onehot({static_cast<int>(bk), k});
      std::vector<int> labels(bk);
      for (std::size_t i = 0; i < bk; ++i) {
        const std::size_t idx = order[start + i];
        RngStream aug = RngStream::make(
            cfg.seed, "augment",
            static_cast<std::uint64_t>(epoch - 1) * n + static_cast<std::uint64_t>(idx));
        Tensor<T> img = augment(data[idx].image, aug, cfg);
        std::copy(img.data(), img.data() + img.numel(), batch.mut() + static_cast<std::int64_t>(i) * img.numel());
        labels[i] = data[idx].label;
        onehot.set({static_cast<int>(i), data[idx].label}, T(1));
      }

      Graph<T> g;
      std::vector<std::pair<Param<T>*, Node<T>*>> bindings;
      auto out = model.forward_nodes(g, batch, Mode::train,
                                     RngStream::make(cfg.seed, "dropout",
                                                     static_cast<std::uint64_t>(global_step)),
                                     &bindings);
      Node<T>* loss = ops::cce_loss(g, out.probs, g.constant(onehot));
      const double loss_v = static_cast<double>(loss->value.item());
      // The f32 exp clamps its argument, so saturated probabilities can hide
      // an upstream overflow; the logits still carry it.
      if (!std::isfinite(loss_v) || !out.logits->value.all_finite())
        throw numeric_error("training failure: non-finite loss at epoch " +
                            std::to_string(epoch) + ", step " +
                            std::to_string(global_step + 1));
      g.backward(loss);
      adam.step(bindings);
      ++global_step;
      ++epoch_steps;

      loss_sum += loss_v * static_cast<double>(bk);
      for (std::size_t i = 0; i < bk; ++i) {
        int best = 0;
        T best_p = out.probs->value.at({static_cast<int>(i), 0});
        for (int j = 1; j < k; ++j) {
          const T p = out.probs->value.at({static_cast<int>(i), j});
          if (p > best_p) {
            best_p = p;
            best = j;
          }
        }
        if (best == labels[i]) ++correct;
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = loss_sum / static_cast<double>(n);
    log.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.steps = epoch_steps;
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

}  // namespace fpc
