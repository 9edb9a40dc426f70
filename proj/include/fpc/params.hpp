// Named trainable parameters and the init helpers shared by all components.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fpc/graph.hpp"
#include "fpc/ops.hpp"
#include "fpc/rng.hpp"
#include "fpc/tensor.hpp"

namespace fpc {

template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  bool trainable = true;

  std::int64_t numel() const { return value.numel(); }
};

// Collects (parameter -> leaf node) bindings while a forward pass runs, so
// the optimizer can read gradients off the tape afterwards.
template <class T>
struct BindCtx {
  Graph<T>& g;
  std::vector<std::pair<Param<T>*, Node<T>*>>* bindings = nullptr;

  Node<T>* bind(Param<T>& p) {
    Node<T>* n = g.leaf(p.value, p.trainable);
    if (bindings) bindings->emplace_back(&p, n);
    return n;
  }
};

// Sequential init streams: parameters are created in a fixed order per
// config, so the draw for each tensor depends only on (seed, position).
struct InitCtx {
  std::uint64_t seed;
  std::uint64_t next_index = 0;

  RngStream next() { return RngStream::make(seed, "init", next_index++); }
};

template <class T>
void init_trunc_normal(Tensor<T>& t, InitCtx& init, double stddev) {
  RngStream rng = init.next();
  T* p = t.mut();
  for (std::int64_t i = 0; i < t.numel(); ++i)
    p[i] = static_cast<T>(stddev * rng.truncated_normal());
}

// Conv kernels: truncated normal scaled by fan-out.
template <class T>
void init_conv(Tensor<T>& w, InitCtx& init) {
  const double fan_out =
      static_cast<double>(w.dim(0)) * w.dim(2) * w.dim(3);
  init_trunc_normal(w, init, std::sqrt(2.0 / fan_out));
}

// Depthwise kernels [C,1,kh,kw]: each channel has kh*kw outgoing weights.
template <class T>
void init_depthwise(Tensor<T>& w, InitCtx& init) {
  const double fan_out = static_cast<double>(w.dim(2)) * w.dim(3);
  init_trunc_normal(w, init, std::sqrt(2.0 / fan_out));
}

// Dense weights [in, out]: truncated normal scaled by fan-in.
template <class T>
void init_dense(Tensor<T>& w, InitCtx& init) {
  init_trunc_normal(w, init, std::sqrt(2.0 / w.dim(0)));
}

template <class T>
using NamedTensor = std::pair<std::string, Tensor<T>*>;

}  // namespace fpc
