#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ldseg/errors.hpp"

namespace ldseg {

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw shape_error("dimension sizes must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;  // empty shape = scalar with one element
}

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major n-d array. The value carrier for activations, parameters,
// latents and images. float for the pipeline, double for the finite-difference
// re-evaluation mode used by the gradient tests.
template <typename S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> shp, S fill = S(0))
      : shape(std::move(shp)), data(shape_numel(shape), fill) {}
  TensorT(std::vector<int> shp, std::vector<S> values) : shape(std::move(shp)), data(std::move(values)) {
    if (data.size() != shape_numel(shape))
      throw shape_error("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                        shape_to_string(shape));
  }

  static TensorT scalar(S v) {
    TensorT t;
    t.data.assign(1, v);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  S& operator[](std::size_t i) { return data[i]; }
  const S& operator[](std::size_t i) const { return data[i]; }

  // 4-d accessor, the common activation layout [N,C,H,W]
  S& at4(int n, int c, int h, int w) {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const S& at4(int n, int c, int h, int w) const {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  S& at2(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  const S& at2(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  TensorT reshaped(std::vector<int> new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw shape_error("reshape " + shape_to_string(shape) + " -> " + shape_to_string(new_shape) +
                        " changes element count");
    TensorT out;
    out.shape = std::move(new_shape);
    out.data = data;
    return out;
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void require_finite(const char* what) const {
    if (!all_finite()) throw value_error(std::string(what) + ": non-finite value");
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;

template <typename S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* what) {
  if (!a.same_shape(b))
    throw shape_error(std::string(what) + ": shape mismatch " + shape_to_string(a.shape) + " vs " +
                      shape_to_string(b.shape));
}

}  // namespace ldseg
