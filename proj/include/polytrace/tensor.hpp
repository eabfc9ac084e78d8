#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "polytrace/common.hpp"

namespace polytrace {

// Dense row-major tensor. Rank-4 image tensors use NCHW order.
template <class R>
struct Tensor {
  std::vector<int> shape;
  std::vector<R> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape)) {}
  Tensor(std::vector<int> s, R fill) : shape(std::move(s)), data(count(shape), fill) {}

  static std::int64_t count(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static Tensor zeros(const std::vector<int>& s) { return Tensor(s); }
  static Tensor full(const std::vector<int>& s, R v) { return Tensor(s, v); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  bool empty() const { return data.empty(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  R* ptr() { return data.data(); }
  const R* ptr() const { return data.data(); }

  R& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const R& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // NCHW accessor.
  R& at(int n, int c, int y, int x) {
    return data[((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  const R& at(int n, int c, int y, int x) const {
    return data[((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }

  R& at(int n, int c) { return data[static_cast<std::int64_t>(n) * shape[1] + c]; }
  const R& at(int n, int c) const { return data[static_cast<std::int64_t>(n) * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(R v) { std::fill(data.begin(), data.end(), v); }

  Tensor reshaped(std::vector<int> s) const {
    Tensor t;
    t.shape = std::move(s);
    require(count(t.shape) == numel(), "reshape: element count mismatch");
    t.data = data;
    return t;
  }

  template <class F>
  Tensor<R> map(F&& f) const {
    Tensor<R> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = f(data[i]);
    return out;
  }

  bool all_finite() const {
    for (R v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <class R>
std::string shape_str(const Tensor<R>& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i)
    s += (i ? "x" : "") + std::to_string(t.shape[i]);
  return s + "]";
}

template <class R>
double max_abs_diff(const Tensor<R>& a, const Tensor<R>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

// Pearson correlation between two equally sized tensors (flattened).
template <class R>
double pearson(const Tensor<R>& a, const Tensor<R>& b) {
  require(a.numel() == b.numel() && a.numel() > 1, "pearson: size mismatch");
  const double n = static_cast<double>(a.numel());
  double ma = 0, mb = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0 || sbb <= 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace polytrace
