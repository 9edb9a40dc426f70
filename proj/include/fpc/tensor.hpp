// Dense row-major n-d tensor. Copies are O(1) (shared storage); ops build
// fresh tensors, so a tensor never changes once it is visible to a reader.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fpc/common.hpp"
#include "fpc/parallel.hpp"

namespace fpc {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw shape_error("non-positive dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor {
 public:
  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape_))
      throw shape_error("value count does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.mut(), t.mut() + t.numel(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const {
    return data_ ? static_cast<std::int64_t>(data_->size()) : 0;
  }

  const T* data() const { return data_->data(); }
  // Writable view. Callers only mutate tensors they have just created.
  T* mut() { return data_->data(); }

  T at(std::initializer_list<int> idx) const { return data()[offset(idx)]; }
  void set(std::initializer_list<int> idx, T v) { mut()[offset(idx)] = v; }

  T item() const {
    if (numel() != 1) throw shape_error("item() on non-scalar " + shape_str(shape_));
    return (*data_)[0];
  }

  // Same storage, new shape.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw shape_error("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                        " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  Tensor<T> map(const std::function<T(T)>& f) const {
    Tensor t(shape_);
    const T* x = data();
    T* y = t.mut();
    for (std::int64_t i = 0, n = numel(); i < n; ++i) y[i] = f(x[i]);
    return t;
  }

  bool all_finite() const {
    const T* x = data();
    for (std::int64_t i = 0, n = numel(); i < n; ++i)
      if (!std::isfinite(static_cast<double>(x[i]))) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::int64_t offset(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw shape_error("index rank mismatch for " + shape_str(shape_));
    std::int64_t off = 0;
    int k = 0;
    for (int i : idx) {
      off = off * shape_[static_cast<std::size_t>(k)] + i;
      ++k;
    }
    return off;
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
};

// ---- flat helpers ----------------------------------------------------------

template <class T>
void axpy(std::int64_t n, T a, const T* x, T* y) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw shape_error("max_abs_diff shape mismatch");
  T m = 0;
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::int64_t i = 0, n = a.numel(); i < n; ++i)
    m = std::max(m, std::abs(pa[i] - pb[i]));
  return m;
}

// ---- gemm ------------------------------------------------------------------
//
// One kernel family backs dense matmul, im2col convolution and the MLP.
// C[m x n] (+)= op(A) * op(B). Each output row is produced by exactly one
// worker, so multithreaded results are bit-identical to single-threaded.

template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  parallel_for(m, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      T* ci = c + i * n;
      if (!accumulate) std::fill(ci, ci + n, T(0));
      const T* ai = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) axpy(n, ai[p], b + p * n, ci);
    }
  });
}

// C = A * B^T with B stored [n x k]. B is transposed into scratch once so
// the inner loops run stride-1 through the fast nn kernel; the O(k*n) copy
// is negligible against the O(m*k*n) multiply.
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  std::vector<T> bt(static_cast<std::size_t>(k) * n);
  for (std::int64_t j = 0; j < n; ++j)
    for (std::int64_t p = 0; p < k; ++p) bt[static_cast<std::size_t>(p * n + j)] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

// C[k x n] (+)= A^T * B with A stored [m x k], B stored [m x n].
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  parallel_for(k, [&](std::int64_t r0, std::int64_t r1) {
    if (!accumulate)
      for (std::int64_t r = r0; r < r1; ++r) std::fill(c + r * n, c + r * n + n, T(0));
    for (std::int64_t i = 0; i < m; ++i) {
      const T* bi = b + i * n;
      for (std::int64_t r = r0; r < r1; ++r) axpy(n, a[i * k + r], bi, c + r * n);
    }
  });
}

template <class T>
Tensor<T> matmul_values(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " * " +
                      shape_str(b.shape()));
  Tensor<T> c({a.dim(0), b.dim(1)});
  gemm_nn(a.data(), b.data(), c.mut(), a.dim(0), a.dim(1), b.dim(1), false);
  return c;
}

// ---- bilinear resize -------------------------------------------------------
//
// Half-pixel (align_corners = false) sampling. Shared by the autodiff
// upsample op, image loading and augmentation, so all resampling in the
// engine agrees bit-for-bit.

struct BilinearTap {
  int lo, hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

inline BilinearTap bilinear_tap(int out_idx, int in_size, int out_size) {
  double src = (out_idx + 0.5) * (static_cast<double>(in_size) / out_size) - 0.5;
  if (src < 0) src = 0;
  if (src > in_size - 1) src = in_size - 1;
  int lo = static_cast<int>(std::floor(src));
  int hi = std::min(lo + 1, in_size - 1);
  return {lo, hi, src - lo};
}

// x: [C, h, w] -> [C, oh, ow]
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int oh, int ow) {
  if (x.rank() != 3) throw shape_error("bilinear_resize expects [C,h,w]");
  if (oh < 1 || ow < 1) throw shape_error("bilinear_resize: output dims must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (oh == h && ow == w) return x;
  std::vector<BilinearTap> ty(static_cast<std::size_t>(oh)), tx(static_cast<std::size_t>(ow));
  for (int i = 0; i < oh; ++i) ty[static_cast<std::size_t>(i)] = bilinear_tap(i, h, oh);
  for (int j = 0; j < ow; ++j) tx[static_cast<std::size_t>(j)] = bilinear_tap(j, w, ow);
  Tensor<T> out({c, oh, ow});
  const T* src = x.data();
  T* dst = out.mut();
  for (int ch = 0; ch < c; ++ch) {
    const T* p = src + static_cast<std::int64_t>(ch) * h * w;
    for (int i = 0; i < oh; ++i) {
      const auto& a = ty[static_cast<std::size_t>(i)];
      for (int j = 0; j < ow; ++j) {
        const auto& b = tx[static_cast<std::size_t>(j)];
        double v00 = p[a.lo * w + b.lo], v01 = p[a.lo * w + b.hi];
        double v10 = p[a.hi * w + b.lo], v11 = p[a.hi * w + b.hi];
        double top = v00 + (v01 - v00) * b.w_hi;
        double bot = v10 + (v11 - v10) * b.w_hi;
        *dst++ = static_cast<T>(top + (bot - top) * a.w_hi);
      }
    }
  }
  return out;
}

}  // namespace fpc
