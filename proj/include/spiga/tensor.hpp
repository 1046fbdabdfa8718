#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "spiga/error.hpp"

namespace spiga {

// Dense row-major tensor of 64-bit floats. Shapes are small (rank <= 4) and
// most ops treat the data as a matrix via explicit leading/trailing dims.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> data)
      : shape(std::move(s)), v(std::move(data)) {
    for (std::size_t d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string());
    if (numel(shape) != v.size())
      throw DimensionError("tensor data size " + std::to_string(v.size()) +
                           " does not match shape " + shape_string());
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = numel(s);
    return Tensor{std::move(s), std::vector<double>(n, 0.0)};
  }

  static Tensor full(std::vector<std::size_t> s, double value) {
    std::size_t n = numel(s);
    return Tensor{std::move(s), std::vector<double>(n, value)};
  }

  static Tensor scalar(double value) { return Tensor{{1}, {value}}; }

  // 2D constructor from nested initializer lists, for tests and fixtures.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows_init) {
    std::size_t r = rows_init.size();
    std::size_t c = r ? rows_init.begin()->size() : 0;
    Tensor t = zeros({r, c});
    std::size_t i = 0;
    for (const auto& row : rows_init) {
      if (row.size() != c) throw DimensionError("ragged matrix initializer");
      for (double x : row) t.v[i++] = x;
    }
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.v[i * n + i] = 1.0;
    return t;
  }

  std::size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }
  std::size_t rank() const { return shape.size(); }

  // Matrix view helpers; rank-1 tensors count as a single row.
  std::size_t rows() const { return rank() >= 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() >= 2 ? shape[rank() - 1] : (rank() == 1 ? shape[0] : 0); }

  double& operator()(std::size_t i, std::size_t j) { return v[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols() + j]; }
  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw DimensionError("max_abs_diff shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

}  // namespace spiga
