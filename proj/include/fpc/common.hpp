// Shared error types and engine-wide runtime settings.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fpc {

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor rank/dimension violations (matmul inner dims, channel counts, ...).
struct shape_error : error {
  using error::error;
};

// Malformed external inputs: manifests, archives, images, labels.
struct data_error : error {
  using error::error;
};

// Non-finite values where the contract requires finite arithmetic.
struct numeric_error : error {
  using error::error;
};

// Bad CLI flags or config keys.
struct usage_error : error {
  using error::error;
};

namespace runtime {

// Worker count for the internal pool. Every op assigns each output element
// to exactly one worker with a fixed partition, so results are identical
// for any thread count.
inline int& thread_count() {
  static int n = 2;
  return n;
}

inline void set_threads(int n) { thread_count() = n < 1 ? 1 : n; }

}  // namespace runtime

}  // namespace fpc
