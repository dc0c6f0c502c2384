#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "lmdet/error.hpp"
#include "lmdet/rng.hpp"

namespace lmdet {

using i64 = int64_t;

// Dense row-major tensor. Graph ops treat tensors as rank-2 matrices
// (rank-1 = row vector, scalar = 1x1); higher ranks are storage-only
// (images, checkpoints).
template <class Real>
struct Tensor {
  std::vector<i64> shape;
  std::vector<Real> data;
  bool requires_grad = false;
  std::vector<Real> grad;  // same length as data iff requires_grad

  Tensor() = default;

  explicit Tensor(std::vector<i64> s, Real fill = Real(0)) : shape(std::move(s)) {
    for (i64 e : shape) require(e > 0, "Tensor: extents must be positive");
    data.assign(size_t(numel_of(shape)), fill);
  }

  static Tensor from(std::vector<i64> s, std::vector<Real> values) {
    Tensor t;
    t.shape = std::move(s);
    require(i64(values.size()) == numel_of(t.shape), "Tensor::from: data length != product of extents");
    t.data = std::move(values);
    return t;
  }

  static Tensor scalar(Real v) { return from({1}, {v}); }

  static i64 numel_of(const std::vector<i64>& s) {
    i64 n = 1;
    for (i64 e : s) n *= e;
    return n;
  }

  i64 numel() const { return i64(data.size()); }

  i64 rows() const { return shape.size() == 2 ? shape[0] : 1; }
  i64 cols() const {
    if (shape.size() == 2) return shape[1];
    if (shape.size() == 1) return shape[0];
    return 1;
  }

  Real& at(i64 r, i64 c) { return data[size_t(r * cols() + c)]; }
  Real at(i64 r, i64 c) const { return data[size_t(r * cols() + c)]; }

  void set_requires_grad(bool v) {
    requires_grad = v;
    if (v)
      grad.assign(data.size(), Real(0));
    else
      grad.clear();
  }

  void zero_grad() {
    if (requires_grad) grad.assign(data.size(), Real(0));
  }

  void fill_uniform(Rng& rng, Real lo, Real hi) {
    for (auto& v : data) v = Real(rng.uniform(double(lo), double(hi)));
  }

  void fill_normal(Rng& rng, Real mean, Real stddev) {
    for (auto& v : data) v = Real(mean + stddev * Real(rng.normal()));
  }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = Other(data[i]);
    return out;
  }
};

inline std::string shape_str(const std::vector<i64>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace lmdet
