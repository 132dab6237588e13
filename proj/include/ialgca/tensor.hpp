#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "ialgca/common.hpp"
#include "ialgca/rng.hpp"

namespace ialgca {

// Dense row-major N-d array. Scalar is double in gradient-check mode and
// float in the training path.
template <class S>
struct Tensor {
  using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;

  std::vector<int> shape;
  Storage data;
  int node = -1;  // id on the active tape, -1 when not recorded

  Tensor() = default;
  explicit Tensor(std::vector<int> shp) : shape(std::move(shp)) {
    data = Storage::Zero(numel_of(shape));
  }

  static int64_t numel_of(const std::vector<int>& shp) {
    int64_t n = 1;
    for (int d : shp) {
      if (d < 0) throw ShapeError(cat("negative dimension in shape ", shape_str(shp)));
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp)); }

  static Tensor full(std::vector<int> shp, S v) {
    Tensor t(std::move(shp));
    t.data.setConstant(v);
    return t;
  }

  static Tensor scalar(S v) {
    Tensor t;
    t.shape = {};
    t.data = Storage::Constant(1, v);
    return t;
  }

  static Tensor from(std::vector<int> shp, std::initializer_list<S> vals) {
    Tensor t(std::move(shp));
    if (static_cast<int64_t>(vals.size()) != t.numel())
      throw ShapeError(cat("initializer size ", vals.size(), " does not match shape ",
                           shape_str(t.shape)));
    int64_t i = 0;
    for (S v : vals) t.data[i++] = v;
    return t;
  }

  static Tensor randn(std::vector<int> shp, Rng& rng, double std = 1.0) {
    Tensor t(std::move(shp));
    for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<S>(std * rng.gauss());
    return t;
  }

  int64_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  S& at(int i) { return data[i]; }
  S at(int i) const { return data[i]; }
  S& at(int i, int j) { return data[static_cast<int64_t>(i) * dim(1) + j]; }
  S at(int i, int j) const { return data[static_cast<int64_t>(i) * dim(1) + j]; }
  S& at(int i, int j, int k) {
    return data[(static_cast<int64_t>(i) * dim(1) + j) * dim(2) + k];
  }
  S at(int i, int j, int k) const {
    return data[(static_cast<int64_t>(i) * dim(1) + j) * dim(2) + k];
  }
  S& at(int i, int j, int k, int l) {
    return data[((static_cast<int64_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }
  S at(int i, int j, int k, int l) const {
    return data[((static_cast<int64_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const { return data.isFinite().all(); }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data = data.template cast<T>();
    return out;
  }
};

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

// Relative error with an absolute floor; the denominator guards near-zero
// gradients against finite-difference roundoff.
inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

}  // namespace ialgca
