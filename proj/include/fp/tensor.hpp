#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "fp/errors.hpp"
#include "fp/rng.hpp"

namespace fp {

// Dense row-major array of doubles. Training math runs in double; file I/O
// narrows to f32 at the format boundary.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    v.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::initializer_list<std::int64_t> s)
      : Tensor(std::vector<std::int64_t>(s)) {}

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) {
      if (d < 0) throw ConfigError("negative tensor dimension");
      n *= d;
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  std::int64_t rows() const {
    if (rank() != 2) throw ConfigError("rows(): tensor is not 2-D");
    return shape[0];
  }
  std::int64_t cols() const {
    if (rank() != 2) throw ConfigError("cols(): tensor is not 2-D");
    return shape[1];
  }

  double& at(std::int64_t i, std::int64_t j) {
    return v[static_cast<std::size_t>(i * shape[1] + j)];
  }
  double at(std::int64_t i, std::int64_t j) const {
    return v[static_cast<std::size_t>(i * shape[1] + j)];
  }

  double* row_ptr(std::int64_t i) { return v.data() + i * shape[1]; }
  const double* row_ptr(std::int64_t i) const { return v.data() + i * shape[1]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  void fill(double c) { std::fill(v.begin(), v.end(), c); }

  static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<std::int64_t> s, double c) {
    Tensor t(std::move(s));
    t.fill(c);
    return t;
  }

  static Tensor from(std::vector<std::int64_t> s, std::vector<double> data) {
    Tensor t;
    t.shape = std::move(s);
    if (numel_of(t.shape) != static_cast<std::int64_t>(data.size()))
      throw ConfigError("tensor data length does not match shape");
    t.v = std::move(data);
    return t;
  }

  static Tensor randn(std::vector<std::int64_t> s, Rng& rng, double sigma = 1.0) {
    Tensor t(std::move(s));
    for (double& x : t.v) x = rng.normal(0.0, sigma);
    return t;
  }

  std::string shape_str() const {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(shape[i]);
    }
    return out + "]";
  }
};

inline double dot(const double* a, const double* b, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// c[m,n] += a[m,k] * b[k,n]; accumulates so callers can fuse adds.
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& c);
// c[m,n] += a[k,m]^T * b[k,n]
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c);
// c[m,n] += a[m,k] * b[n,k]^T
void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& c);

}  // namespace fp
