// Differentiable tensor operations recorded on a Graph tape.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "fpc/graph.hpp"
#include "fpc/rng.hpp"
#include "fpc/tensor.hpp"

namespace fpc {

enum class Mode { train, eval };
enum class Pad { same, valid };

// Running batch-norm statistics, owned by the model. Train-mode forward
// replaces the tensors (never mutates in place) so closures holding the old
// values stay valid.
template <class T>
struct BNState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

namespace ops {

// ---- elementwise -----------------------------------------------------------

template <class T>
Node<T>* add(Graph<T>& g, Node<T>* a, Node<T>* b) {
  if (!a->value.same_shape(b->value))
    throw shape_error("add: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                      shape_str(b->value.shape()));
  Tensor<T> y(a->value.shape());
  const T* pa = a->value.data();
  const T* pb = b->value.data();
  T* py = y.mut();
  for (std::int64_t i = 0, n = y.numel(); i < n; ++i) py[i] = pa[i] + pb[i];
  return g.make(std::move(y), {a, b},
                [a, b](Node<T>& n) {
                  a->add_grad(n.grad);
                  b->add_grad(n.grad);
                },
                "add");
}

template <class T>
Node<T>* scale(Graph<T>& g, Node<T>* x, T c) {
  Tensor<T> y(x->value.shape());
  const T* px = x->value.data();
  T* py = y.mut();
  for (std::int64_t i = 0, n = y.numel(); i < n; ++i) py[i] = c * px[i];
  return g.make(std::move(y), {x},
                [x, c](Node<T>& n) {
                  Tensor<T> gx(n.grad.shape());
                  const T* pg = n.grad.data();
                  T* pj = gx.mut();
                  for (std::int64_t i = 0, m = gx.numel(); i < m; ++i) pj[i] = c * pg[i];
                  x->add_grad(gx);
                },
                "scale");
}

template <class T>
Node<T>* mul(Graph<T>& g, Node<T>* a, Node<T>* b) {
  if (!a->value.same_shape(b->value)) throw shape_error("mul: shape mismatch");
  Tensor<T> y(a->value.shape());
  const T* pa = a->value.data();
  const T* pb = b->value.data();
  T* py = y.mut();
  for (std::int64_t i = 0, n = y.numel(); i < n; ++i) py[i] = pa[i] * pb[i];
  return g.make(std::move(y), {a, b},
                [a, b](Node<T>& n) {
                  Tensor<T> ga(n.grad.shape()), gb(n.grad.shape());
                  const T* pg = n.grad.data();
                  const T* pa = a->value.data();
                  const T* pb = b->value.data();
                  T* qa = ga.mut();
                  T* qb = gb.mut();
                  for (std::int64_t i = 0, m = ga.numel(); i < m; ++i) {
                    qa[i] = pg[i] * pb[i];
                    qb[i] = pg[i] * pa[i];
                  }
                  a->add_grad(ga);
                  b->add_grad(gb);
                },
                "mul");
}

template <class T>
Node<T>* sum(Graph<T>& g, Node<T>* x) {
  T acc = 0;
  const T* px = x->value.data();
  for (std::int64_t i = 0, n = x->value.numel(); i < n; ++i) acc += px[i];
  return g.make(Tensor<T>::scalar(acc), {x},
                [x](Node<T>& n) {
                  x->add_grad(Tensor<T>::full(x->value.shape(), n.grad.item()));
                },
                "sum");
}

template <class T>
Node<T>* index_scalar(Graph<T>& g, Node<T>* x, std::int64_t flat) {
  if (flat < 0 || flat >= x->value.numel()) throw shape_error("index_scalar out of range");
  return g.make(Tensor<T>::scalar(x->value.data()[flat]), {x},
                [x, flat](Node<T>& n) {
                  Tensor<T> gx(x->value.shape());
                  gx.mut()[flat] = n.grad.item();
                  x->add_grad(gx);
                },
                "index");
}

// ---- activations -----------------------------------------------------------

template <class T>
Node<T>* relu(Graph<T>& g, Node<T>* x) {
  Tensor<T> y = x->value.map([](T v) { return v > 0 ? v : T(0); });
  return g.make(std::move(y), {x},
                [x](Node<T>& n) {
                  Tensor<T> gx(n.grad.shape());
                  const T* pg = n.grad.data();
                  const T* px = x->value.data();
                  T* pj = gx.mut();
                  for (std::int64_t i = 0, m = gx.numel(); i < m; ++i)
                    pj[i] = px[i] > 0 ? pg[i] : T(0);
                  x->add_grad(gx);
                },
                "relu");
}

// exp for the hot elementwise paths. The float flavor is a branch-free
// Cephes-style polynomial (rel. error ~1e-7, around one ulp of f32) that
// the compiler can vectorize; doubles keep libm exp so 64-bit gradient
// checks see full precision.
inline float exp_val(float x) {
  x = std::min(87.33f, std::max(-87.33f, x));
  const float n = std::floor(x * 1.44269504f + 0.5f);
  float r = x - n * 0.693359375f;
  r -= n * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = 1.0f + r + r * r * p;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof(scale));
  return y * scale;
}

inline double exp_val(double x) { return std::exp(x); }

template <class T>
T sigmoid_val(T v) {
  return v >= 0 ? T(1) / (T(1) + exp_val(-v))
                : exp_val(v) / (T(1) + exp_val(v));
}

template <class T>
Node<T>* sigmoid(Graph<T>& g, Node<T>* x) {
  Tensor<T> y = x->value.map([](T v) { return sigmoid_val(v); });
  Tensor<T> yv = y;  // shared storage, captured for the backward pass
  return g.make(std::move(y), {x},
                [x, yv](Node<T>& n) {
                  Tensor<T> gx(n.grad.shape());
                  const T* pg = n.grad.data();
                  const T* ps = yv.data();
                  T* pj = gx.mut();
                  for (std::int64_t i = 0, m = gx.numel(); i < m; ++i)
                    pj[i] = pg[i] * ps[i] * (T(1) - ps[i]);
                  x->add_grad(gx);
                },
                "sigmoid");
}

// silu(x) = x * sigmoid(x), the swish activation with unit slope. The
// forward sigmoid is kept for the backward pass.
template <class T>
Node<T>* silu(Graph<T>& g, Node<T>* x) {
  Tensor<T> y(x->value.shape());
  auto sig = std::make_shared<Tensor<T>>(x->value.shape());
  {
    const T* px = x->value.data();
    T* ps = sig->mut();
    T* py = y.mut();
    for (std::int64_t i = 0, n = y.numel(); i < n; ++i) {
      const T s = sigmoid_val(px[i]);
      ps[i] = s;
      py[i] = px[i] * s;
    }
  }
  if (!g.recording()) return g.make(std::move(y), {}, {}, "silu");
  return g.make(std::move(y), {x},
                [x, sig](Node<T>& n) {
                  Tensor<T> gx(n.grad.shape());
                  const T* pg = n.grad.data();
                  const T* px = x->value.data();
                  const T* ps = sig->data();
                  T* pj = gx.mut();
                  for (std::int64_t i = 0, m = gx.numel(); i < m; ++i)
                    pj[i] = pg[i] * ps[i] * (T(1) + px[i] * (T(1) - ps[i]));
                  x->add_grad(gx);
                },
                "silu");
}

// ---- softmax ---------------------------------------------------------------

template <class T>
Node<T>* softmax(Graph<T>& g, Node<T>* x, int axis) {
  const Shape& s = x->value.shape();
  if (axis < 0 || axis >= x->value.rank()) throw shape_error("softmax: invalid axis");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x->value.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t k = s[static_cast<std::size_t>(axis)];

  Tensor<T> y(s);
  const T* px = x->value.data();
  T* py = y.mut();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * k * inner + i;
      T mx = px[base];
      for (std::int64_t a = 1; a < k; ++a) mx = std::max(mx, px[base + a * inner]);
      T z = 0;
      for (std::int64_t a = 0; a < k; ++a) {
        T e = exp_val(px[base + a * inner] - mx);
        py[base + a * inner] = e;
        z += e;
      }
      for (std::int64_t a = 0; a < k; ++a) py[base + a * inner] /= z;
    }
  }
  Tensor<T> yv = y;
  return g.make(std::move(y), {x},
                [x, yv, outer, inner, k](Node<T>& n) {
                  Tensor<T> gx(n.grad.shape());
                  const T* pg = n.grad.data();
                  const T* ps = yv.data();
                  T* pj = gx.mut();
                  for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < inner; ++i) {
                      const std::int64_t base = o * k * inner + i;
                      T dot = 0;
                      for (std::int64_t a = 0; a < k; ++a)
                        dot += pg[base + a * inner] * ps[base + a * inner];
                      for (std::int64_t a = 0; a < k; ++a)
                        pj[base + a * inner] =
                            ps[base + a * inner] * (pg[base + a * inner] - dot);
                    }
                  x->add_grad(gx);
                },
                "softmax");
}

// ---- matmul family ---------------------------------------------------------

template <class T>
Node<T>* matmul(Graph<T>& g, Node<T>* a, Node<T>* b) {
  Tensor<T> y = matmul_values(a->value, b->value);
  return g.make(std::move(y), {a, b},
                [a, b](Node<T>& n) {
                  const std::int64_t m = a->value.dim(0), k = a->value.dim(1),
                                     nn = b->value.dim(1);
                  Tensor<T> ga(a->value.shape());
                  gemm_nt(n.grad.data(), b->value.data(), ga.mut(), m, nn, k, false);
                  a->add_grad(ga);
                  Tensor<T> gb(b->value.shape());
                  gemm_tn(a->value.data(), n.grad.data(), gb.mut(), m, k, nn, false);
                  b->add_grad(gb);
                },
                "matmul");
}

template <class T>
Node<T>* transpose2d(Graph<T>& g, Node<T>* x) {
  if (x->value.rank() != 2) throw shape_error("transpose2d expects rank 2");
  const int r = x->value.dim(0), c = x->value.dim(1);
  Tensor<T> y({c, r});
  const T* px = x->value.data();
  T* py = y.mut();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) py[j * r + i] = px[i * c + j];
  return g.make(std::move(y), {x},
                [x, r, c](Node<T>& n) {
                  Tensor<T> gx({r, c});
                  const T* pg = n.grad.data();
                  T* pj = gx.mut();
                  for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) pj[i * c + j] = pg[j * r + i];
                  x->add_grad(gx);
                },
                "transpose");
}

// y = x * w + bias, x: [B, n], w: [n, m], bias: [m] (bias may be null).
template <class T>
Node<T>* affine(Graph<T>& g, Node<T>* x, Node<T>* w, Node<T>* bias) {
  if (x->value.rank() != 2 || w->value.rank() != 2 || x->value.dim(1) != w->value.dim(0))
    throw shape_error("affine: incompatible shapes");
  const std::int64_t batch = x->value.dim(0), n = x->value.dim(1), m = w->value.dim(1);
  if (bias && (bias->value.rank() != 1 || bias->value.dim(0) != m))
    throw shape_error("affine: bias length mismatch");
  Tensor<T> y({static_cast<int>(batch), static_cast<int>(m)});
  gemm_nn(x->value.data(), w->value.data(), y.mut(), batch, n, m, false);
  if (bias) {
    T* py = y.mut();
    const T* pb = bias->value.data();
    for (std::int64_t i = 0; i < batch; ++i) axpy(m, T(1), pb, py + i * m);
  }
  std::vector<Node<T>*> parents{x, w};
  if (bias) parents.push_back(bias);
  return g.make(std::move(y), std::move(parents),
                [x, w, bias, batch, n, m](Node<T>& nd) {
                  Tensor<T> gx(x->value.shape());
                  gemm_nt(nd.grad.data(), w->value.data(), gx.mut(), batch, m, n, false);
                  x->add_grad(gx);
                  Tensor<T> gw(w->value.shape());
                  gemm_tn(x->value.data(), nd.grad.data(), gw.mut(), batch, n, m, false);
                  w->add_grad(gw);
                  if (bias) {
                    Tensor<T> gb(bias->value.shape());
                    T* pb = gb.mut();
                    const T* pg = nd.grad.data();
                    for (std::int64_t i = 0; i < batch; ++i) axpy(m, T(1), pg + i * m, pb);
                    bias->add_grad(gb);
                  }
                },
                "affine");
}

// ---- shape plumbing --------------------------------------------------------

template <class T>
Node<T>* reshape(Graph<T>& g, Node<T>* x, Shape shape) {
  Tensor<T> y = x->value.reshaped(shape);
  return g.make(std::move(y), {x},
                [x](Node<T>& n) { x->add_grad(n.grad.reshaped(x->value.shape())); },
                "reshape");
}

// [B,C,H,W] -> [B, H*W, C]; token (i*W + j) carries the pixel (i, j).
template <class T>
Node<T>* bchw_to_blc(Graph<T>& g, Node<T>* x) {
  if (x->value.rank() != 4) throw shape_error("to_sequence expects [B,C,H,W]");
  const int b = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
            w = x->value.dim(3);
  const int l = h * w;
  Tensor<T> y({b, l, c});
  const T* px = x->value.data();
  T* py = y.mut();
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci) {
      const T* src = px + (static_cast<std::int64_t>(bi) * c + ci) * l;
      T* dst = py + static_cast<std::int64_t>(bi) * l * c + ci;
      for (int t = 0; t < l; ++t) dst[static_cast<std::int64_t>(t) * c] = src[t];
    }
  return g.make(std::move(y), {x},
                [x, b, c, l](Node<T>& n) {
                  Tensor<T> gx(x->value.shape());
                  const T* pg = n.grad.data();
                  T* pj = gx.mut();
                  for (int bi = 0; bi < b; ++bi)
                    for (int ci = 0; ci < c; ++ci) {
                      T* dst = pj + (static_cast<std::int64_t>(bi) * c + ci) * l;
                      const T* src = pg + static_cast<std::int64_t>(bi) * l * c + ci;
                      for (int t = 0; t < l; ++t) dst[t] = src[static_cast<std::int64_t>(t) * c];
                    }
                  x->add_grad(gx);
                },
                "to_seq");
}

// [B, H*W, C] -> [B,C,H,W]; exact inverse of bchw_to_blc.
template <class T>
Node<T>* blc_to_bchw(Graph<T>& g, Node<T>* x, int h, int w) {
  if (x->value.rank() != 3) throw shape_error("from_sequence expects [B,L,C]");
  const int b = x->value.dim(0), l = x->value.dim(1), c = x->value.dim(2);
  if (l != h * w) throw shape_error("from_sequence: L != H*W");
  Tensor<T> y({b, c, h, w});
  const T* px = x->value.data();
  T* py = y.mut();
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci) {
      T* dst = py + (static_cast<std::int64_t>(bi) * c + ci) * l;
      const T* src = px + static_cast<std::int64_t>(bi) * l * c + ci;
      for (int t = 0; t < l; ++t) dst[t] = src[static_cast<std::int64_t>(t) * c];
    }
  return g.make(std::move(y), {x},
                [x, b, c, l](Node<T>& n) {
                  Tensor<T> gx(x->value.shape());
                  const T* pg = n.grad.data();
                  T* pj = gx.mut();
                  for (int bi = 0; bi < b; ++bi)
                    for (int ci = 0; ci < c; ++ci) {
                      const T* src = pg + (static_cast<std::int64_t>(bi) * c + ci) * l;
                      T* dst = pj + static_cast<std::int64_t>(bi) * l * c + ci;
                      for (int t = 0; t < l; ++t) dst[static_cast<std::int64_t>(t) * c] = src[t];
                    }
                  x->add_grad(gx);
                },
                "from_seq");
}

// [B,L,C] -> [L,C] for one batch item.
template <class T>
Node<T>* slice_item(Graph<T>& g, Node<T>* x, int index) {
  if (x->value.rank() != 3) throw shape_error("slice_item expects [B,L,C]");
  const int l = x->value.dim(1), c = x->value.dim(2);
  if (index < 0 || index >= x->value.dim(0)) throw shape_error("slice_item: index out of range");
  const std::int64_t sz = static_cast<std::int64_t>(l) * c;
  Tensor<T> y({l, c});
  std::memcpy(y.mut(), x->value.data() + index * sz, sizeof(T) * static_cast<std::size_t>(sz));
  return g.make(std::move(y), {x},
                [x, index, sz](Node<T>& n) {
                  Tensor<T> gx(x->value.shape());
                  std::memcpy(gx.mut() + index * sz, n.grad.data(),
                              sizeof(T) * static_cast<std::size_t>(sz));
                  x->add_grad(gx);
                },
                "slice_item");
}

// items: B nodes of [L,C] -> [B,L,C].
template <class T>
Node<T>* stack_items(Graph<T>& g, const std::vector<Node<T>*>& items) {
  if (items.empty()) throw shape_error("stack_items: empty");
  const int l = items[0]->value.dim(0), c = items[0]->value.dim(1);
  const int b = static_cast<int>(items.size());
  const std::int64_t sz = static_cast<std::int64_t>(l) * c;
  Tensor<T> y({b, l, c});
  for (int i = 0; i < b; ++i) {
    if (!items[static_cast<std::size_t>(i)]->value.same_shape(items[0]->value))
      throw shape_error("stack_items: ragged shapes");
    std::memcpy(y.mut() + i * sz, items[static_cast<std::size_t>(i)]->value.data(),
                sizeof(T) * static_cast<std::size_t>(sz));
  }
  std::vector<Node<T>*> parents = items;
  return g.make(std::move(y), parents,
                [items, sz](Node<T>& n) {
                  for (std::size_t i = 0; i < items.size(); ++i) {
                    Tensor<T> gi(items[i]->value.shape());
                    std::memcpy(gi.mut(), n.grad.data() + static_cast<std::int64_t>(i) * sz,
                                sizeof(T) * static_cast<std::size_t>(sz));
                    items[i]->add_grad(gi);
                  }
                },
                "stack_items");
}

// parts: nodes of [L, d_i] -> [L, sum(d_i)].
template <class T>
Node<T>* concat_cols(Graph<T>& g, const std::vector<Node<T>*>& parts) {
  if (parts.empty()) throw shape_error("concat_cols: empty");
  const int l = parts[0]->value.dim(0);
  int total = 0;
  for (auto* p : parts) {
    if (p->value.rank() != 2 || p->value.dim(0) != l)
      throw shape_error("concat_cols: row mismatch");
    total += p->value.dim(1);
  }
  Tensor<T> y({l, total});
  T* py = y.mut();
  int off = 0;
  for (auto* p : parts) {
    const int d = p->value.dim(1);
    const T* src = p->value.data();
    for (int i = 0; i < l; ++i)
      std::memcpy(py + static_cast<std::int64_t>(i) * total + off, src + static_cast<std::int64_t>(i) * d,
                  sizeof(T) * static_cast<std::size_t>(d));
    off += d;
  }
  std::vector<Node<T>*> parents = parts;
  return g.make(std::move(y), parents,
                [parts, l, total](Node<T>& n) {
                  const T* pg = n.grad.data();
                  int off = 0;
                  for (auto* p : parts) {
                    const int d = p->value.dim(1);
                    Tensor<T> gp(p->value.shape());
                    T* dst = gp.mut();
                    for (int i = 0; i < l; ++i)
                      std::memcpy(dst + static_cast<std::int64_t>(i) * d,
                                  pg + static_cast<std::int64_t>(i) * total + off,
                                  sizeof(T) * static_cast<std::size_t>(d));
                    off += d;
                    p->add_grad(gp);
                  }
                },
                "concat_cols");
}

// ---- convolution -----------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline int pad_amount(Pad padding, int k) { return padding == Pad::same ? (k - 1) / 2 : 0; }

// Patch gather: x [B,Cin,H,W] -> cols [B*OH*OW, Cin*kh*kw], zero padding.
template <class T>
void im2col(const T* x, int b, int cin, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* cols) {
  const std::int64_t krow = static_cast<std::int64_t>(cin) * kh * kw;
  parallel_for(static_cast<std::int64_t>(b) * oh * ow, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const int bi = static_cast<int>(r / (static_cast<std::int64_t>(oh) * ow));
      const int rem = static_cast<int>(r % (static_cast<std::int64_t>(oh) * ow));
      const int oy = rem / ow, ox = rem % ow;
      T* dst = cols + r * krow;
      const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
      for (int c = 0; c < cin; ++c) {
        const T* plane = x + (static_cast<std::int64_t>(bi) * cin + c) * h * w;
        for (int u = 0; u < kh; ++u) {
          const int iy = iy0 + u;
          for (int v = 0; v < kw; ++v) {
            const int ix = ix0 + v;
            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                         ? plane[static_cast<std::int64_t>(iy) * w + ix]
                         : T(0);
          }
        }
      }
    }
  });
}

// Transpose of im2col: scatter-add cols back into the input layout.
template <class T>
void col2im(const T* cols, int b, int cin, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* dx) {
  const std::int64_t krow = static_cast<std::int64_t>(cin) * kh * kw;
  // Parallel over batch items: each dx plane set is touched by one worker.
  parallel_for(b, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t bi = b0; bi < b1; ++bi) {
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const std::int64_t r = (bi * oh + oy) * ow + ox;
          const T* src = cols + r * krow;
          const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
          for (int c = 0; c < cin; ++c) {
            T* plane = dx + (bi * cin + c) * h * w;
            for (int u = 0; u < kh; ++u) {
              const int iy = iy0 + u;
              for (int v = 0; v < kw; ++v) {
                const int ix = ix0 + v;
                if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                  plane[static_cast<std::int64_t>(iy) * w + ix] += src[(c * kh + u) * kw + v];
              }
            }
          }
        }
    }
  });
}

// x: [B,Cin,H,W], w: [Cout,Cin,kh,kw]. Same/valid padding, odd kernels.
template <class T>
Node<T>* conv2d(Graph<T>& g, Node<T>* x, Node<T>* w, int stride, Pad padding) {
  if (x->value.rank() != 4 || w->value.rank() != 4)
    throw shape_error("conv2d expects x [B,C,H,W] and w [Co,Ci,kh,kw]");
  const int b = x->value.dim(0), cin = x->value.dim(1), h = x->value.dim(2),
            wd = x->value.dim(3);
  const int cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  if (w->value.dim(1) != cin)
    throw shape_error("conv2d: channel mismatch, input has " + std::to_string(cin) +
                      ", kernel expects " + std::to_string(w->value.dim(1)));
  if (kh % 2 == 0 || kw % 2 == 0) throw shape_error("conv2d: kernel dims must be odd");
  const int pad = pad_amount(padding, kh);
  const int oh = conv_out_dim(h, kh, stride, pad), ow = conv_out_dim(wd, kw, stride, pad);
  if (oh < 1 || ow < 1) throw shape_error("conv2d: output would be empty");

  const std::int64_t rows = static_cast<std::int64_t>(b) * oh * ow;
  const std::int64_t krow = static_cast<std::int64_t>(cin) * kh * kw;
  auto cols = std::make_shared<Tensor<T>>(Shape{static_cast<int>(rows), static_cast<int>(krow)});
  im2col(x->value.data(), b, cin, h, wd, kh, kw, stride, pad, oh, ow, cols->mut());

  // out2[r, co] = cols[r, :] . wflat[co, :]
  Tensor<T> out2({static_cast<int>(rows), cout});
  gemm_nt(cols->data(), w->value.data(), out2.mut(), rows, krow, cout, false);

  Tensor<T> y({b, cout, oh, ow});
  {
    const T* src = out2.data();
    T* dst = y.mut();
    const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
    parallel_for(b, [&](std::int64_t b0, std::int64_t b1) {
      for (std::int64_t bi = b0; bi < b1; ++bi)
        for (std::int64_t p = 0; p < plane; ++p) {
          const T* row = src + (bi * plane + p) * cout;
          for (int co = 0; co < cout; ++co) dst[(bi * cout + co) * plane + p] = row[co];
        }
    });
  }

  if (!g.recording()) return g.make(std::move(y), {}, {}, "conv2d");
  return g.make(std::move(y), {x, w},
                [x, w, cols, b, cin, h, wd, cout, kh, kw, stride, pad, oh, ow](Node<T>& n) {
                  const std::int64_t rows = static_cast<std::int64_t>(b) * oh * ow;
                  const std::int64_t krow = static_cast<std::int64_t>(cin) * kh * kw;
                  const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
                  Tensor<T> dout2({static_cast<int>(rows), cout});
                  {
                    const T* src = n.grad.data();
                    T* dst = dout2.mut();
                    for (std::int64_t bi = 0; bi < b; ++bi)
                      for (std::int64_t p = 0; p < plane; ++p)
                        for (int co = 0; co < cout; ++co)
                          dst[(bi * plane + p) * cout + co] = src[(bi * cout + co) * plane + p];
                  }
                  if (w->needs_grad) {
                    Tensor<T> gw(w->value.shape());
                    gemm_tn(dout2.data(), cols->data(), gw.mut(), rows, cout, krow, false);
                    w->add_grad(gw);
                  }
                  if (x->needs_grad) {
                    Tensor<T> dcols({static_cast<int>(rows), static_cast<int>(krow)});
                    gemm_nn(dout2.data(), w->value.data(), dcols.mut(), rows, cout, krow, false);
                    Tensor<T> gx(x->value.shape());
                    col2im(dcols.data(), b, cin, h, wd, kh, kw, stride, pad, oh, ow, gx.mut());
                    x->add_grad(gx);
                  }
                },
                "conv2d");
}

// Per-channel convolution; w: [C,1,kh,kw].
template <class T>
Node<T>* depthwise_conv2d(Graph<T>& g, Node<T>* x, Node<T>* w, int stride, Pad padding) {
  if (x->value.rank() != 4 || w->value.rank() != 4 || w->value.dim(1) != 1)
    throw shape_error("depthwise_conv2d expects x [B,C,H,W] and w [C,1,kh,kw]");
  const int b = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
            wd = x->value.dim(3);
  const int kh = w->value.dim(2), kw = w->value.dim(3);
  if (w->value.dim(0) != c)
    throw shape_error("depthwise_conv2d: channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw shape_error("depthwise_conv2d: kernel dims must be odd");
  const int pad = pad_amount(padding, kh);
  const int oh = conv_out_dim(h, kh, stride, pad), ow = conv_out_dim(wd, kw, stride, pad);
  if (oh < 1 || ow < 1) throw shape_error("depthwise_conv2d: output would be empty");

  Tensor<T> y({b, c, oh, ow});
  {
    const T* px = x->value.data();
    const T* pw = w->value.data();
    T* py = y.mut();
    parallel_for(static_cast<std::int64_t>(b) * c, [&](std::int64_t i0, std::int64_t i1) {
      for (std::int64_t bc = i0; bc < i1; ++bc) {
        const int ci = static_cast<int>(bc % c);
        const T* plane = px + bc * h * wd;
        const T* ker = pw + static_cast<std::int64_t>(ci) * kh * kw;
        T* out = py + bc * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            T acc = 0;
            const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
            for (int u = 0; u < kh; ++u) {
              const int iy = iy0 + u;
              if (iy < 0 || iy >= h) continue;
              for (int v = 0; v < kw; ++v) {
                const int ix = ix0 + v;
                if (ix < 0 || ix >= wd) continue;
                acc += plane[static_cast<std::int64_t>(iy) * wd + ix] * ker[u * kw + v];
              }
            }
            out[static_cast<std::int64_t>(oy) * ow + ox] = acc;
          }
      }
    });
  }
  return g.make(std::move(y), {x, w},
                [x, w, b, c, h, wd, kh, kw, stride, pad, oh, ow](Node<T>& n) {
                  Tensor<T> gx(x->value.shape());
                  Tensor<T> gw(w->value.shape());
                  const T* px = x->value.data();
                  const T* pw = w->value.data();
                  const T* pg = n.grad.data();
                  T* qx = gx.mut();
                  T* qw = gw.mut();
                  // One worker owns channel ci: its gw plane and all gx
                  // planes of that channel, so writes never collide.
                  parallel_for(c, [&](std::int64_t c0, std::int64_t c1) {
                    for (std::int64_t ci = c0; ci < c1; ++ci) {
                      const T* ker = pw + ci * kh * kw;
                      T* dker = qw + ci * kh * kw;
                      for (int bi = 0; bi < b; ++bi) {
                        const std::int64_t bc = static_cast<std::int64_t>(bi) * c + ci;
                        const T* plane = px + bc * h * wd;
                        T* dplane = qx + bc * h * wd;
                        const T* gout = pg + bc * oh * ow;
                        for (int oy = 0; oy < oh; ++oy)
                          for (int ox = 0; ox < ow; ++ox) {
                            const T gv = gout[static_cast<std::int64_t>(oy) * ow + ox];
                            if (gv == T(0)) continue;
                            const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
                            for (int u = 0; u < kh; ++u) {
                              const int iy = iy0 + u;
                              if (iy < 0 || iy >= h) continue;
                              for (int v = 0; v < kw; ++v) {
                                const int ix = ix0 + v;
                                if (ix < 0 || ix >= wd) continue;
                                dplane[static_cast<std::int64_t>(iy) * wd + ix] += gv * ker[u * kw + v];
                                dker[u * kw + v] += gv * plane[static_cast<std::int64_t>(iy) * wd + ix];
                              }
                            }
                          }
                      }
                    }
                  });
                  x->add_grad(gx);
                  w->add_grad(gw);
                },
                "depthwise");
}

// ---- batch norm ------------------------------------------------------------

// Train mode normalizes with biased batch statistics and folds them into the
// running stats (running = momentum * running + (1 - momentum) * batch);
// eval mode normalizes with the running stats. epsilon sits under the
// square root in both modes.
template <class T>
Node<T>* batchnorm2d(Graph<T>& g, Node<T>* x, Node<T>* gamma, Node<T>* beta,
                     BNState<T>* state, Mode mode, T momentum = T(0.9),
                     T eps = T(1e-5)) {
  if (x->value.rank() != 4) throw shape_error("batchnorm2d expects [B,C,H,W]");
  const int b = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
            w = x->value.dim(3);
  if (gamma->value.numel() != c || beta->value.numel() != c)
    throw shape_error("batchnorm2d: parameter length must equal channel count");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t n_per_c = static_cast<std::int64_t>(b) * plane;

  Tensor<T> mean({c}), invstd({c});
  if (mode == Mode::train) {
    const T* px = x->value.data();
    T* pm = mean.mut();
    Tensor<T> var({c});
    T* pv = var.mut();
    for (int ci = 0; ci < c; ++ci) {
      T s = 0;
      for (int bi = 0; bi < b; ++bi) {
        const T* p = px + (static_cast<std::int64_t>(bi) * c + ci) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      pm[ci] = s / static_cast<T>(n_per_c);
      T q = 0;
      for (int bi = 0; bi < b; ++bi) {
        const T* p = px + (static_cast<std::int64_t>(bi) * c + ci) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const T d = p[i] - pm[ci];
          q += d * d;
        }
      }
      pv[ci] = q / static_cast<T>(n_per_c);
      invstd.mut()[ci] = T(1) / std::sqrt(pv[ci] + eps);
    }
    if (state) {
      Tensor<T> rm(state->running_mean.shape()), rv(state->running_var.shape());
      for (int ci = 0; ci < c; ++ci) {
        rm.mut()[ci] = momentum * state->running_mean.data()[ci] + (T(1) - momentum) * pm[ci];
        rv.mut()[ci] = momentum * state->running_var.data()[ci] + (T(1) - momentum) * pv[ci];
      }
      state->running_mean = rm;
      state->running_var = rv;
    }
  } else {
    if (!state) throw shape_error("batchnorm2d eval mode requires running stats");
    for (int ci = 0; ci < c; ++ci) {
      mean.mut()[ci] = state->running_mean.data()[ci];
      invstd.mut()[ci] = T(1) / std::sqrt(state->running_var.data()[ci] + eps);
    }
  }

  Tensor<T> y(x->value.shape());
  {
    const T* px = x->value.data();
    T* py = y.mut();
    const T* pg = gamma->value.data();
    const T* pb = beta->value.data();
    parallel_for(static_cast<std::int64_t>(b) * c, [&](std::int64_t i0, std::int64_t i1) {
      for (std::int64_t bc = i0; bc < i1; ++bc) {
        const int ci = static_cast<int>(bc % c);
        const T a = pg[ci] * invstd.data()[ci];
        const T off = pb[ci] - a * mean.data()[ci];
        const T* src = px + bc * plane;
        T* dst = py + bc * plane;
        for (std::int64_t i = 0; i < plane; ++i) dst[i] = a * src[i] + off;
      }
    });
  }

  const bool train = mode == Mode::train;
  return g.make(std::move(y), {x, gamma, beta},
                [x, gamma, beta, mean, invstd, train, b, c, plane, n_per_c](Node<T>& n) {
                  const T* px = x->value.data();
                  const T* pg = n.grad.data();
                  const T* pgam = gamma->value.data();
                  Tensor<T> ggam({c}), gbet({c});
                  Tensor<T> gx(x->value.shape());
                  T* qx = gx.mut();
                  for (int ci = 0; ci < c; ++ci) {
                    const T mu = mean.data()[ci], inv = invstd.data()[ci];
                    T sum_dy = 0, sum_dy_xhat = 0;
                    for (int bi = 0; bi < b; ++bi) {
                      const std::int64_t bc = static_cast<std::int64_t>(bi) * c + ci;
                      const T* dy = pg + bc * plane;
                      const T* xv = px + bc * plane;
                      for (std::int64_t i = 0; i < plane; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xhat += dy[i] * (xv[i] - mu) * inv;
                      }
                    }
                    ggam.mut()[ci] = sum_dy_xhat;
                    gbet.mut()[ci] = sum_dy;
                    const T gam = pgam[ci];
                    for (int bi = 0; bi < b; ++bi) {
                      const std::int64_t bc = static_cast<std::int64_t>(bi) * c + ci;
                      const T* dy = pg + bc * plane;
                      const T* xv = px + bc * plane;
                      T* dx = qx + bc * plane;
                      if (train) {
                        const T inv_n = T(1) / static_cast<T>(n_per_c);
                        for (std::int64_t i = 0; i < plane; ++i) {
                          const T xhat = (xv[i] - mu) * inv;
                          dx[i] += gam * inv *
                                   (dy[i] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
                        }
                      } else {
                        for (std::int64_t i = 0; i < plane; ++i) dx[i] += gam * inv * dy[i];
                      }
                    }
                  }
                  x->add_grad(gx);
                  gamma->add_grad(ggam);
                  beta->add_grad(gbet);
                },
                "batchnorm2d");
}

// ---- pooling ---------------------------------------------------------------

// [B,C,H,W] -> [B,C]
template <class T>
Node<T>* global_avg_pool(Graph<T>& g, Node<T>* x) {
  if (x->value.rank() != 4) throw shape_error("global_avg_pool expects [B,C,H,W]");
  const int b = x->value.dim(0), c = x->value.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x->value.dim(2)) * x->value.dim(3);
  Tensor<T> y({b, c});
  const T* px = x->value.data();
  T* py = y.mut();
  for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(b) * c; ++bc) {
    T s = 0;
    const T* p = px + bc * plane;
    for (std::int64_t i = 0; i < plane; ++i) s += p[i];
    py[bc] = s / static_cast<T>(plane);
  }
  return g.make(std::move(y), {x},
                [x, b, c, plane](Node<T>& n) {
                  Tensor<T> gx(x->value.shape());
                  const T* pg = n.grad.data();
                  T* pj = gx.mut();
                  for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(b) * c; ++bc) {
                    const T v = pg[bc] / static_cast<T>(plane);
                    T* p = pj + bc * plane;
                    for (std::int64_t i = 0; i < plane; ++i) p[i] = v;
                  }
                  x->add_grad(gx);
                },
                "gap");
}

template <class T>
Node<T>* max_pool2d(Graph<T>& g, Node<T>* x, int window, int stride) {
  if (x->value.rank() != 4) throw shape_error("max_pool2d expects [B,C,H,W]");
  const int b = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
            w = x->value.dim(3);
  if (window > h || window > w) throw shape_error("max_pool2d: window exceeds spatial dims");
  const int oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  Tensor<T> y({b, c, oh, ow});
  auto arg = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(y.numel()));
  const T* px = x->value.data();
  T* py = y.mut();
  std::int64_t o = 0;
  for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(b) * c; ++bc) {
    const T* plane = px + bc * h * w;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox, ++o) {
        T best = plane[static_cast<std::int64_t>(oy * stride) * w + ox * stride];
        std::int64_t bidx = bc * h * w + static_cast<std::int64_t>(oy * stride) * w + ox * stride;
        for (int u = 0; u < window; ++u)
          for (int v = 0; v < window; ++v) {
            const std::int64_t idx =
                bc * h * w + static_cast<std::int64_t>(oy * stride + u) * w + ox * stride + v;
            if (px[idx] > best) {
              best = px[idx];
              bidx = idx;
            }
          }
        py[o] = best;
        (*arg)[static_cast<std::size_t>(o)] = bidx;
      }
  }
  return g.make(std::move(y), {x},
                [x, arg](Node<T>& n) {
                  Tensor<T> gx(x->value.shape());
                  const T* pg = n.grad.data();
                  T* pj = gx.mut();
                  for (std::int64_t i = 0, m = n.grad.numel(); i < m; ++i)
                    pj[(*arg)[static_cast<std::size_t>(i)]] += pg[i];
                  x->add_grad(gx);
                },
                "max_pool");
}

// ---- dropout ---------------------------------------------------------------

// Inverted dropout: train zeroes with prob p and scales survivors by
// 1/(1-p); eval is the input node itself. The mask is a pure function of
// the stream key and element index.
template <class T>
Node<T>* dropout(Graph<T>& g, Node<T>* x, double p, Mode mode, RngStream stream) {
  if (p < 0.0 || p >= 1.0) throw shape_error("dropout: p must be in [0,1)");
  if (mode == Mode::eval || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<bool>>(static_cast<std::size_t>(x->value.numel()));
  Tensor<T> y(x->value.shape());
  const T* px = x->value.data();
  T* py = y.mut();
  for (std::int64_t i = 0, n = y.numel(); i < n; ++i) {
    const bool keep = stream.uniform_at(static_cast<std::uint64_t>(i)) >= p;
    (*mask)[static_cast<std::size_t>(i)] = keep;
    py[i] = keep ? px[i] * keep_scale : T(0);
  }
  return g.make(std::move(y), {x},
                [x, mask, keep_scale](Node<T>& n) {
                  Tensor<T> gx(n.grad.shape());
                  const T* pg = n.grad.data();
                  T* pj = gx.mut();
                  for (std::int64_t i = 0, m = gx.numel(); i < m; ++i)
                    pj[i] = (*mask)[static_cast<std::size_t>(i)] ? pg[i] * keep_scale : T(0);
                  x->add_grad(gx);
                },
                "dropout");
}

// ---- bilinear upsample -----------------------------------------------------

// x: [C,h,w] -> [C,oh,ow], half-pixel sampling shared with bilinear_resize.
template <class T>
Node<T>* upsample_bilinear(Graph<T>& g, Node<T>* x, int oh, int ow) {
  if (x->value.rank() != 3) throw shape_error("upsample_bilinear expects [C,h,w]");
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  Tensor<T> y = bilinear_resize(x->value, oh, ow);
  if (oh == h && ow == w)
    return g.make(std::move(y), {x}, [x](Node<T>& n) { x->add_grad(n.grad); },
                  "upsample");
  return g.make(std::move(y), {x},
                [x, c, h, w, oh, ow](Node<T>& n) {
                  Tensor<T> gx(x->value.shape());
                  T* pj = gx.mut();
                  const T* pg = n.grad.data();
                  for (int ch = 0; ch < c; ++ch) {
                    T* dst = pj + static_cast<std::int64_t>(ch) * h * w;
                    const T* src = pg + static_cast<std::int64_t>(ch) * oh * ow;
                    for (int i = 0; i < oh; ++i) {
                      const BilinearTap a = bilinear_tap(i, h, oh);
                      for (int j = 0; j < ow; ++j) {
                        const BilinearTap bt = bilinear_tap(j, w, ow);
                        const T gv = src[static_cast<std::int64_t>(i) * ow + j];
                        dst[a.lo * w + bt.lo] += gv * static_cast<T>((1 - a.w_hi) * (1 - bt.w_hi));
                        dst[a.lo * w + bt.hi] += gv * static_cast<T>((1 - a.w_hi) * bt.w_hi);
                        dst[a.hi * w + bt.lo] += gv * static_cast<T>(a.w_hi * (1 - bt.w_hi));
                        dst[a.hi * w + bt.hi] += gv * static_cast<T>(a.w_hi * bt.w_hi);
                      }
                    }
                  }
                  x->add_grad(gx);
                },
                "upsample");
}

// ---- broadcasting helpers for SE and residual wiring ------------------------

// y[b,c,h,w] = x[b,c,h,w] * s[b,c]
template <class T>
Node<T>* channel_scale(Graph<T>& g, Node<T>* x, Node<T>* s) {
  if (x->value.rank() != 4 || s->value.rank() != 2 || s->value.dim(0) != x->value.dim(0) ||
      s->value.dim(1) != x->value.dim(1))
    throw shape_error("channel_scale: expects x [B,C,H,W], s [B,C]");
  const int b = x->value.dim(0), c = x->value.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x->value.dim(2)) * x->value.dim(3);
  Tensor<T> y(x->value.shape());
  const T* px = x->value.data();
  const T* ps = s->value.data();
  T* py = y.mut();
  for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(b) * c; ++bc) {
    const T f = ps[bc];
    const T* src = px + bc * plane;
    T* dst = py + bc * plane;
    for (std::int64_t i = 0; i < plane; ++i) dst[i] = f * src[i];
  }
  return g.make(std::move(y), {x, s},
                [x, s, b, c, plane](Node<T>& n) {
                  Tensor<T> gx(x->value.shape());
                  Tensor<T> gs(s->value.shape());
                  const T* pg = n.grad.data();
                  const T* px = x->value.data();
                  const T* ps = s->value.data();
                  T* qx = gx.mut();
                  T* qs = gs.mut();
                  for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(b) * c; ++bc) {
                    const T f = ps[bc];
                    T acc = 0;
                    const T* gsrc = pg + bc * plane;
                    const T* xsrc = px + bc * plane;
                    T* gdst = qx + bc * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                      gdst[i] = f * gsrc[i];
                      acc += gsrc[i] * xsrc[i];
                    }
                    qs[bc] = acc;
                  }
                  x->add_grad(gx);
                  s->add_grad(gs);
                },
                "channel_scale");
}

// ---- categorical cross entropy ---------------------------------------------

// Mean over the batch of -sum_j y_ij log(p_ij); probabilities are clamped
// at 1e-12 before the log.
template <class T>
Node<T>* cce_loss(Graph<T>& g, Node<T>* probs, Node<T>* onehot) {
  if (probs->value.rank() != 2 || !probs->value.same_shape(onehot->value))
    throw shape_error("cce_loss: probs and targets must both be [N,K]");
  const int n = probs->value.dim(0), k = probs->value.dim(1);
  const T clamp = static_cast<T>(1e-12);
  const T* pp = probs->value.data();
  const T* py = onehot->value.data();
  T acc = 0;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * k; ++i)
    if (py[i] != T(0)) acc -= py[i] * std::log(std::max(pp[i], clamp));
  acc /= static_cast<T>(n);
  Tensor<T> targets = onehot->value;
  return g.make(Tensor<T>::scalar(acc), {probs, onehot},
                [probs, targets, n, k, clamp](Node<T>& nd) {
                  // d/dp of log(max(p, clamp)) vanishes below the clamp.
                  Tensor<T> gp(probs->value.shape());
                  const T* pp = probs->value.data();
                  const T* py = targets.data();
                  const T gv = nd.grad.item();
                  T* q = gp.mut();
                  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * k; ++i)
                    q[i] = (py[i] != T(0) && pp[i] > clamp)
                               ? -gv * py[i] / (pp[i] * static_cast<T>(n))
                               : T(0);
                  probs->add_grad(gp);
                },
                "cce");
}

}  // namespace ops
}  // namespace fpc
