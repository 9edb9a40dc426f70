// Gradient-weighted class activation maps over the final backbone feature
// map, plus the colormap overlay renderer.
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <vector>

#include "fpc/model.hpp"
#include "fpc/tensor.hpp"

namespace fpc {

struct GradCamOptions {
  std::optional<int> target_class;  // default: the predicted class
  bool use_probability = false;     // differentiate the probability, not the logit
  bool post_attention = false;      // take the map after attention instead
  bool uniform_alpha = false;       // test hook: force every alpha_k to 1
};

template <class T>
struct Heatmap {
  Tensor<T> feature_values;  // [H_f, W_f], rectified, unnormalized
  Tensor<T> values;          // [H, W], upsampled and normalized to [0,1]
  int target_class = 0;
  int predicted_class = 0;
};

// alpha_k = spatial mean of d(score)/dA_k; map = ReLU(sum_k alpha_k A_k),
// upsampled bilinearly to the input size and normalized by its max (a zero
// map stays zero).
template <class T>
Heatmap<T> gradcam(Model<T>& model, const Tensor<T>& image, const GradCamOptions& opts = {}) {
  if (image.rank() != 3) throw shape_error("gradcam expects one image [C,H,W]");
  const int h = image.dim(1), w = image.dim(2);
  Tensor<T> batch = image.reshaped({1, image.dim(0), h, w});

  Graph<T> g;
  auto out = model.forward_nodes(g, batch, Mode::eval, RngStream());

  int predicted = 0;
  {
    const T* p = out.probs->value.data();
    for (int j = 1; j < model.config.num_classes; ++j)
      if (p[j] > p[predicted]) predicted = j;
  }
  const int target = opts.target_class.value_or(predicted);
  if (target < 0 || target >= model.config.num_classes)
    throw usage_error("gradcam: target class " + std::to_string(target) + " out of range");

  Node<T>* score_node = opts.use_probability ? out.probs : out.logits;
  g.backward(ops::index_scalar(g, score_node, target));

  Node<T>* feat = opts.post_attention ? out.featmap_att : out.featmap;
  const int cf = feat->value.dim(1), hf = feat->value.dim(2), wf = feat->value.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(hf) * wf;
  if (!feat->grad.defined() || feat->grad.numel() == 0)
    feat->grad = Tensor<T>(feat->value.shape());

  Heatmap<T> hm;
  hm.predicted_class = predicted;
  hm.target_class = target;
  hm.feature_values = Tensor<T>({hf, wf});
  {
    const T* a = feat->value.data();
    const T* da = feat->grad.data();
    T* raw = hm.feature_values.mut();
    for (int k = 0; k < cf; ++k) {
      T alpha = 0;
      if (opts.uniform_alpha) {
        alpha = T(1);
      } else {
        for (std::int64_t i = 0; i < plane; ++i) alpha += da[k * plane + i];
        alpha /= static_cast<T>(plane);
      }
      for (std::int64_t i = 0; i < plane; ++i) raw[i] += alpha * a[k * plane + i];
    }
    for (std::int64_t i = 0; i < plane; ++i) raw[i] = std::max(raw[i], T(0));
  }

  Tensor<T> up = bilinear_resize(hm.feature_values.reshaped({1, hf, wf}), h, w);
  T mx = 0;
  for (std::int64_t i = 0; i < up.numel(); ++i) mx = std::max(mx, up.data()[i]);
  hm.values = Tensor<T>({h, w});
  if (mx > 0) {
    T* v = hm.values.mut();
    for (std::int64_t i = 0; i < up.numel(); ++i) v[i] = up.data()[i] / mx;
  }
  return hm;
}

// Five-stop colormap, linearly interpolated (values in 0..255):
//   t=0.00 -> (  0,   0, 255)    t=0.25 -> (  0, 255, 255)
//   t=0.50 -> (  0, 255,   0)    t=0.75 -> (255, 255,   0)
//   t=1.00 -> (255,   0,   0)
inline void heat_color(double t, double rgb[3]) {
  static const double stops[5][3] = {
      {0, 0, 255}, {0, 255, 255}, {0, 255, 0}, {255, 255, 0}, {255, 0, 0}};
  t = std::clamp(t, 0.0, 1.0);
  const int seg = std::min(3, static_cast<int>(t * 4.0));
  const double f = t * 4.0 - seg;
  for (int c = 0; c < 3; ++c) rgb[c] = stops[seg][c] * (1.0 - f) + stops[seg + 1][c] * f;
}

// blended = (1 - alpha) * grayscale + alpha * colormap(heat), per pixel,
// rounded half away from zero. heat: [H,W] in [0,1]; image: [C,H,W] in
// [0,1] (channel 0 is the displayed grayscale).
template <class T>
std::vector<unsigned char> overlay(const Tensor<T>& heat, const Tensor<T>& image,
                                   double alpha) {
  if (heat.rank() != 2 || image.rank() != 3 || heat.dim(0) != image.dim(1) ||
      heat.dim(1) != image.dim(2))
    throw shape_error("overlay: heatmap and image sizes differ");
  if (alpha < 0 || alpha > 1) throw usage_error("overlay: alpha must be in [0,1]");
  const int h = heat.dim(0), w = heat.dim(1);
  std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
  const T* hv = heat.data();
  const T* gv = image.data();  // channel 0
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
    double color[3];
    heat_color(static_cast<double>(hv[i]), color);
    const double gray = static_cast<double>(gv[i]) * 255.0;
    for (int c = 0; c < 3; ++c) {
      const double v = (1.0 - alpha) * gray + alpha * color[c];
      rgb[static_cast<std::size_t>(3 * i + c)] =
          static_cast<unsigned char>(std::clamp<long>(std::lround(v), 0, 255));
    }
  }
  return rgb;
}

template <class T>
void heatmap_to_csv(const Tensor<T>& values, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write heatmap CSV '" + path + "'");
  for (int i = 0; i < values.dim(0); ++i) {
    for (int j = 0; j < values.dim(1); ++j)
      out << (j ? "," : "") << static_cast<double>(values.at({i, j}));
    out << '\n';
  }
}

}  // namespace fpc
