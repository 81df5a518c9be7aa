#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pat/errors.hpp"

namespace pat {

/// Dense row-major matrix of doubles. The only container the numeric kernel
/// uses; kept deliberately minimal.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {v.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {v.data() + r * cols, cols}; }

  std::size_t size() const { return v.size(); }
  void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

inline double dot(const double* __restrict__ a, const double* __restrict__ b, std::size_t n) {
  double acc = 0.0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t k = 0; k < n; ++k) acc += a[k] * b[k];
  return acc;
}

inline void axpy(double* __restrict__ y, double s, const double* __restrict__ x, std::size_t n) {
#pragma omp simd
  for (std::size_t j = 0; j < n; ++j) y[j] += s * x[j];
}

// C = A * B^T, A: m x k, B: n x k, C: m x n. B rows are streamed once each
// (B is typically a large weight matrix, A a small batch that stays cached).
inline void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c) {
  require_shape(a.cols == b.cols, "matmul_nt: inner dims disagree");
  c.rows = a.rows;
  c.cols = b.rows;
  c.v.assign(a.rows * b.rows, 0.0);
  for (std::size_t j = 0; j < b.rows; ++j) {
    const double* bj = b.v.data() + j * b.cols;
    for (std::size_t i = 0; i < a.rows; ++i)
      c.v[i * c.cols + j] = dot(a.v.data() + i * a.cols, bj, a.cols);
  }
}

// C = A^T * B, A: k x m, B: k x n, C: m x n (accumulated into c when set).
// Rows of C are finished one at a time so a large C is streamed once.
inline void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false) {
  require_shape(a.rows == b.rows, "matmul_tn: inner dims disagree");
  if (!accumulate) {
    c.rows = a.cols;
    c.cols = b.cols;
    c.v.assign(a.cols * b.cols, 0.0);
  } else {
    require_shape(c.rows == a.cols && c.cols == b.cols, "matmul_tn: bad accumulator shape");
  }
  for (std::size_t i = 0; i < a.cols; ++i) {
    double* ci = c.v.data() + i * c.cols;
    for (std::size_t k = 0; k < a.rows; ++k) {
      const double s = a.v[k * a.cols + i];
      if (s == 0.0) continue;
      axpy(ci, s, b.v.data() + k * b.cols, b.cols);
    }
  }
}

// C = A * B, A: m x k, B: k x n, C: m x n.
inline void matmul_nn(const Matrix& a, const Matrix& b, Matrix& c) {
  require_shape(a.cols == b.rows, "matmul_nn: inner dims disagree");
  c.rows = a.rows;
  c.cols = b.cols;
  c.v.assign(a.rows * b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.v.data() + i * a.cols;
    double* ci = c.v.data() + i * c.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double s = ai[k];
      if (s == 0.0) continue;
      axpy(ci, s, b.v.data() + k * b.cols, b.cols);
    }
  }
}

// ---------------------------------------------------------------------------
// Little-endian binary primitives shared by the file formats.

inline void write_u32(std::ostream& os, std::uint32_t x) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t x) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double x) { write_u64(os, std::bit_cast<std::uint64_t>(x)); }

inline void write_f32(std::ostream& os, float x) { write_u32(os, std::bit_cast<std::uint32_t>(x)); }

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("unexpected end of file while reading u32");
  std::uint32_t x = 0;
  for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return x;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("unexpected end of file while reading u64");
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return x;
}

inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_u32(is)); }

inline void write_f64_span(std::ostream& os, std::span<const double> xs) {
  for (double x : xs) write_f64(os, x);
}

inline void read_f64_span(std::istream& is, std::span<double> xs) {
  for (double& x : xs) x = read_f64(is);
}

}  // namespace pat
