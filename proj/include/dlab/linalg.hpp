#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dlab/ndarray.hpp"

namespace dlab {

inline NdArray identity(int64_t n) {
  NdArray out = NdArray::zeros({n, n});
  for (int64_t i = 0; i < n; ++i) out.at(i, i) = 1.0;
  return out;
}

// Thin SVD M = U diag(S) V^T for rows >= cols, one-sided Jacobi.
// U: [d x k] column-orthonormal, S non-increasing, V: [k x k] orthonormal.
// Sign convention: the largest-magnitude entry of each U column is positive.
struct SvdTriple {
  NdArray U;
  std::vector<double> S;
  NdArray V;
};

namespace detail {

// Fills column j of U with a unit vector orthogonal to columns [0, j) using
// the best-conditioned canonical basis vector.
inline void fill_orthonormal_column(NdArray& U, int64_t j) {
  const int64_t d = U.shape[0];
  std::vector<double> best;
  double best_norm = -1.0;
  for (int64_t e = 0; e < d; ++e) {
    std::vector<double> v(static_cast<size_t>(d), 0.0);
    v[static_cast<size_t>(e)] = 1.0;
    for (int64_t l = 0; l < j; ++l) {
      double dot = 0.0;
      for (int64_t i = 0; i < d; ++i) dot += U.at(i, l) * v[static_cast<size_t>(i)];
      for (int64_t i = 0; i < d; ++i) v[static_cast<size_t>(i)] -= dot * U.at(i, l);
    }
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm > best_norm) {
      best_norm = nrm;
      best = std::move(v);
    }
  }
  for (int64_t i = 0; i < d; ++i) U.at(i, j) = best[static_cast<size_t>(i)] / best_norm;
}

inline void apply_sign_convention(NdArray& U, NdArray& V) {
  const int64_t d = U.shape[0], k = U.shape[1];
  for (int64_t j = 0; j < k; ++j) {
    int64_t arg = 0;
    double mx = -1.0;
    for (int64_t i = 0; i < d; ++i) {
      const double a = std::fabs(U.at(i, j));
      if (a > mx) {
        mx = a;
        arg = i;
      }
    }
    if (U.at(arg, j) < 0.0) {
      for (int64_t i = 0; i < d; ++i) U.at(i, j) = -U.at(i, j);
      for (int64_t i = 0; i < V.shape[0]; ++i) V.at(i, j) = -V.at(i, j);
    }
  }
}

}  // namespace detail

inline SvdTriple svd(const NdArray& M) {
  if (M.rank() != 2)
    throw ValidationError("svd: expects a matrix, got shape " + shape_str(M.shape));
  if (!M.all_finite()) throw ValidationError("svd: non-finite input");
  const int64_t d = M.shape[0], k = M.shape[1];
  if (d < k)
    throw ValidationError("svd: expects rows >= cols, got " + shape_str(M.shape));

  NdArray A = M;  // columns orthogonalized in place; A = M V throughout
  NdArray V = identity(k);
  const double tol = 1e-14;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (int64_t p = 0; p + 1 < k; ++p) {
      for (int64_t q = p + 1; q < k; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (int64_t i = 0; i < d; ++i) {
          const double x = A.at(i, p), y = A.at(i, q);
          app += x * x;
          aqq += y * y;
          apq += x * y;
        }
        if (apq == 0.0 || std::fabs(apq) <= tol * std::sqrt(app * aqq)) continue;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = tau >= 0.0 ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                                    : 1.0 / (tau - std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int64_t i = 0; i < d; ++i) {
          const double x = A.at(i, p), y = A.at(i, q);
          A.at(i, p) = c * x - s * y;
          A.at(i, q) = s * x + c * y;
        }
        for (int64_t i = 0; i < k; ++i) {
          const double x = V.at(i, p), y = V.at(i, q);
          V.at(i, p) = c * x - s * y;
          V.at(i, q) = s * x + c * y;
        }
        rotated = true;
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(static_cast<size_t>(k), 0.0);
  for (int64_t j = 0; j < k; ++j) {
    double n2 = 0.0;
    for (int64_t i = 0; i < d; ++i) n2 += A.at(i, j) * A.at(i, j);
    norms[static_cast<size_t>(j)] = std::sqrt(n2);
  }
  std::vector<int64_t> order(static_cast<size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return norms[static_cast<size_t>(a)] > norms[static_cast<size_t>(b)]; });

  SvdTriple out;
  out.U = NdArray::zeros({d, k});
  out.V = NdArray::zeros({k, k});
  out.S.resize(static_cast<size_t>(k));
  double smax = 0.0;
  for (double n : norms) smax = std::max(smax, n);
  const double rank_tol = smax * 1e-13;
  for (int64_t j = 0; j < k; ++j) {
    const int64_t src = order[static_cast<size_t>(j)];
    const double sn = norms[static_cast<size_t>(src)];
    out.S[static_cast<size_t>(j)] = sn;
    for (int64_t i = 0; i < k; ++i) out.V.at(i, j) = V.at(i, src);
    if (sn > rank_tol && sn > 0.0) {
      for (int64_t i = 0; i < d; ++i) out.U.at(i, j) = A.at(i, src) / sn;
    } else {
      detail::fill_orthonormal_column(out.U, j);
    }
  }
  detail::apply_sign_convention(out.U, out.V);
  return out;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic two-sided Jacobi). Input is
// symmetrized internally. Eigenvalues descending; vectors in columns.

struct EighResult {
  std::vector<double> values;
  NdArray vectors;
};

inline EighResult jacobi_eigh(const NdArray& M) {
  if (M.rank() != 2 || M.shape[0] != M.shape[1])
    throw ValidationError("jacobi_eigh: expects a square matrix, got " + shape_str(M.shape));
  const int64_t n = M.shape[0];
  NdArray A = NdArray::zeros({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) A.at(i, j) = 0.5 * (M.at(i, j) + M.at(j, i));
  NdArray V = identity(n);

  double scale = 1e-300;
  for (double v : A.data) scale = std::max(scale, std::fabs(v));
  const double eps = 1e-14 * scale;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int64_t p = 0; p + 1 < n; ++p)
      for (int64_t q = p + 1; q < n; ++q) off = std::max(off, std::fabs(A.at(p, q)));
    if (off <= eps) break;
    for (int64_t p = 0; p + 1 < n; ++p) {
      for (int64_t q = p + 1; q < n; ++q) {
        const double apq = A.at(p, q);
        if (std::fabs(apq) <= eps * 1e-2) continue;
        const double tau = (A.at(q, q) - A.at(p, p)) / (2.0 * apq);
        const double t = tau >= 0.0 ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                                    : 1.0 / (tau - std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        const double app = A.at(p, p), aqq = A.at(q, q);
        A.at(p, p) = app - t * apq;
        A.at(q, q) = aqq + t * apq;
        A.at(p, q) = 0.0;
        A.at(q, p) = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          if (i == p || i == q) continue;
          const double aip = A.at(i, p), aiq = A.at(i, q);
          A.at(i, p) = c * aip - s * aiq;
          A.at(i, q) = s * aip + c * aiq;
          A.at(p, i) = A.at(i, p);
          A.at(q, i) = A.at(i, q);
        }
        for (int64_t i = 0; i < n; ++i) {
          const double x = V.at(i, p), y = V.at(i, q);
          V.at(i, p) = c * x - s * y;
          V.at(i, q) = s * x + c * y;
        }
      }
    }
  }

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return A.at(a, a) > A.at(b, b); });
  EighResult out;
  out.values.resize(static_cast<size_t>(n));
  out.vectors = NdArray::zeros({n, n});
  for (int64_t j = 0; j < n; ++j) {
    const int64_t src = order[static_cast<size_t>(j)];
    out.values[static_cast<size_t>(j)] = A.at(src, src);
    for (int64_t i = 0; i < n; ++i) out.vectors.at(i, j) = V.at(i, src);
  }
  NdArray dummy = NdArray::zeros({n, n});
  detail::apply_sign_convention(out.vectors, dummy);
  return out;
}

// ---------------------------------------------------------------------------
// PCA of a data matrix [n x d]: mean-center, then eigendecompose X^T X via
// the SVD of centered X. Eigenvalues are those of X^T X (no 1/n factor).

struct PcaFit {
  std::vector<double> mean;
  NdArray eigvecs;  // [d x d], columns, sign convention as in svd()
  std::vector<double> eigvals;
};

inline PcaFit pca_fit(const NdArray& X) {
  if (X.rank() != 2) throw ValidationError("pca_fit: expects a matrix, got " + shape_str(X.shape));
  const int64_t n = X.shape[0], d = X.shape[1];
  if (n < 2) throw ValidationError("pca_fit: needs at least 2 rows, got " + std::to_string(n));
  PcaFit fit;
  fit.mean = col_means(X);
  NdArray Xc = NdArray::zeros({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) Xc.at(i, j) = X.at(i, j) - fit.mean[static_cast<size_t>(j)];
  if (n >= d) {
    SvdTriple t = svd(Xc);
    fit.eigvecs = t.V;
    fit.eigvals.reserve(static_cast<size_t>(d));
    for (double s : t.S) fit.eigvals.push_back(s * s);
    NdArray dummy = NdArray::zeros({d, d});
    detail::apply_sign_convention(fit.eigvecs, dummy);
  } else {
    EighResult e = jacobi_eigh(matmul(transpose(Xc), Xc));
    fit.eigvecs = e.vectors;
    fit.eigvals = e.values;
    for (double& v : fit.eigvals) v = std::max(v, 0.0);
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Spearman rank correlation with average ranks for ties.

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& x) {
  const size_t n = x.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (size_t l = i; l <= j; ++l) ranks[order[l]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ValidationError("spearman: length mismatch " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  if (a.size() < 2) throw ValidationError("spearman: needs at least 2 samples");
  const std::vector<double> ra = detail::average_ranks(a);
  const std::vector<double> rb = detail::average_ranks(b);
  const size_t n = ra.size();
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double da = ra[i] - ma, db = rb[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace dlab
