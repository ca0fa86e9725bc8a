#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "dlab/common.hpp"

namespace dlab {

/// Dense row-major array of doubles. Rank is dynamic but everything in this
/// project is rank 1 or 2. Invariant: data.size() == product(shape).
struct NdArray {
  Shape shape;
  std::vector<double> data;

  NdArray() = default;
  NdArray(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ValidationError("NdArray: shape " + shape_str(shape) + " does not match " +
                            std::to_string(data.size()) + " elements");
  }

  static NdArray zeros(Shape s) {
    auto n = shape_numel(s);
    return NdArray(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  static NdArray full(Shape s, double v) {
    auto n = shape_numel(s);
    return NdArray(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
  }
  static NdArray scalar(double v) { return NdArray({1}, {v}); }
  static NdArray vec(std::initializer_list<double> v) {
    return NdArray({static_cast<int64_t>(v.size())}, std::vector<double>(v));
  }
  // 2-D from nested initializer list.
  static NdArray mat(std::initializer_list<std::initializer_list<double>> rows) {
    int64_t r = static_cast<int64_t>(rows.size());
    int64_t c = r ? static_cast<int64_t>(rows.begin()->size()) : 0;
    std::vector<double> d;
    d.reserve(static_cast<size_t>(r * c));
    for (auto& row : rows) {
      if (static_cast<int64_t>(row.size()) != c)
        throw ValidationError("NdArray::mat: ragged rows");
      d.insert(d.end(), row.begin(), row.end());
    }
    return NdArray({r, c}, std::move(d));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool is_scalar() const { return numel() == 1; }

  int64_t rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 1 : shape[0]); }
  int64_t cols() const { return shape.size() == 2 ? shape[1] : 1; }

  double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * cols() + j)]; }
  double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols() + j)]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline bool same_shape(const NdArray& a, const NdArray& b) { return a.shape == b.shape; }

inline void require_same_shape(const NdArray& a, const NdArray& b, const char* op) {
  if (!same_shape(a, b))
    throw ValidationError(std::string("shape mismatch in ") + op + ": " + shape_str(a.shape) +
                          " vs " + shape_str(b.shape));
}

// out[n x m] = a[n x k] * b[k x m]; out must be zeroed by the caller.
// ikj order keeps the inner loop contiguous in both out and b.
inline void matmul_accum(double* out, const double* a, const double* b, int64_t n, int64_t k,
                         int64_t m) {
  for (int64_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    double* orow = out + i * m;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (int64_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// ga[n x k] += g[n x m] * b^T, with b[k x m]. Row-by-row dot products.
inline void matmul_grad_lhs(double* ga, const double* g, const double* b, int64_t n, int64_t k,
                            int64_t m) {
  for (int64_t i = 0; i < n; ++i) {
    const double* grow = g + i * m;
    double* garow = ga + i * k;
    for (int64_t j = 0; j < k; ++j) {
      const double* brow = b + j * m;
      double acc = 0.0;
      for (int64_t p = 0; p < m; ++p) acc += grow[p] * brow[p];
      garow[j] += acc;
    }
  }
}

// gb[k x m] += a^T * g, with a[n x k], g[n x m]. Rank-1 updates per row of a.
inline void matmul_grad_rhs(double* gb, const double* a, const double* g, int64_t n, int64_t k,
                            int64_t m) {
  for (int64_t p = 0; p < n; ++p) {
    const double* arow = a + p * k;
    const double* grow = g + p * m;
    for (int64_t i = 0; i < k; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* gbrow = gb + i * m;
      for (int64_t j = 0; j < m; ++j) gbrow[j] += av * grow[j];
    }
  }
}

inline NdArray matmul(const NdArray& a, const NdArray& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw ValidationError("shape mismatch in matmul: " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
  NdArray out = NdArray::zeros({a.shape[0], b.shape[1]});
  matmul_accum(out.data.data(), a.data.data(), b.data.data(), a.shape[0], a.shape[1], b.shape[1]);
  return out;
}

inline NdArray transpose(const NdArray& a) {
  if (a.rank() != 2) throw ValidationError("transpose expects rank 2, got " + shape_str(a.shape));
  NdArray out = NdArray::zeros({a.shape[1], a.shape[0]});
  for (int64_t i = 0; i < a.shape[0]; ++i)
    for (int64_t j = 0; j < a.shape[1]; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

inline void fill_uniform(NdArray& a, Rng& rng, double lo, double hi) {
  for (double& v : a.data) v = rng.uniform(lo, hi);
}

inline void fill_normal(NdArray& a, Rng& rng) {
  for (double& v : a.data) v = rng.normal();
}

inline double max_abs(const NdArray& a) {
  double m = 0.0;
  for (double v : a.data) m = std::max(m, std::fabs(v));
  return m;
}

inline double max_abs_diff(const NdArray& a, const NdArray& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

inline double sum_of(const NdArray& a) {
  double s = 0.0;
  for (double v : a.data) s += v;
  return s;
}

inline double mean_of(const NdArray& a) { return sum_of(a) / static_cast<double>(a.numel()); }

// Column means of a 2-D array.
inline std::vector<double> col_means(const NdArray& a) {
  std::vector<double> m(static_cast<size_t>(a.cols()), 0.0);
  for (int64_t i = 0; i < a.rows(); ++i)
    for (int64_t j = 0; j < a.cols(); ++j) m[static_cast<size_t>(j)] += a.at(i, j);
  for (double& v : m) v /= static_cast<double>(a.rows());
  return m;
}

}  // namespace dlab
