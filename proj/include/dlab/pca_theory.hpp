#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "dlab/linalg.hpp"
#include "dlab/vae.hpp"

namespace dlab {

// 1 - (sum over rows of the row-wise max |entry|) / k. Zero exactly when the
// matrix is a signed permutation; positive otherwise for orthonormal input.
inline double signed_permutation_distance(const NdArray& V) {
  if (V.rank() != 2 || V.shape[0] != V.shape[1])
    throw ValidationError("signed_permutation_distance: expects a square matrix, got " +
                          shape_str(V.shape));
  const int64_t k = V.shape[0];
  double acc = 0.0;
  for (int64_t i = 0; i < k; ++i) {
    double mx = 0.0;
    for (int64_t j = 0; j < k; ++j) mx = std::max(mx, std::fabs(V.at(i, j)));
    acc += mx;
  }
  return 1.0 - acc / static_cast<double>(k);
}

// Ascending mean posterior variance; ties keep the lower latent index first.
inline std::vector<int> sort_latents_by_sigma(const std::vector<double>& sigma_sq) {
  std::vector<int> order(sigma_sq.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return sigma_sq[static_cast<size_t>(a)] < sigma_sq[static_cast<size_t>(b)];
  });
  return order;
}

struct TraceInequalityResult {
  double lhs = 0.0;  // tr(M)
  double rhs = 0.0;  // n * det(M)^(1/n)
  bool holds = false;
  double equality_gap = 0.0;
};

inline TraceInequalityResult trace_inequality_check(const NdArray& M) {
  if (M.rank() != 2 || M.shape[0] != M.shape[1])
    throw ValidationError("trace_inequality_check: expects a square matrix, got " +
                          shape_str(M.shape));
  const int64_t n = M.shape[0];
  EighResult e = jacobi_eigh(M);  // symmetrizes internally
  double scale = 0.0;
  for (double v : e.values) scale = std::max(scale, std::fabs(v));
  for (double v : e.values)
    if (v < -1e-10 * std::max(1.0, scale))
      throw ValidationError("trace_inequality_check: matrix is not PSD (eigenvalue " +
                            std::to_string(v) + ")");
  TraceInequalityResult r;
  double det = 1.0;
  for (double v : e.values) {
    r.lhs += v;
    det *= std::max(v, 0.0);
  }
  r.rhs = static_cast<double>(n) * std::pow(det, 1.0 / static_cast<double>(n));
  r.equality_gap = r.lhs - r.rhs;
  r.holds = r.lhs >= r.rhs - 1e-9;
  return r;
}

// diag(MD) = diag(DM) = 0 and tr(MD) = tr(DM) = 0 for diagonal D and
// zero-diagonal M, checked numerically to 1e-12.
inline bool diag_absorb_check(const NdArray& D, const NdArray& M) {
  if (D.rank() != 2 || D.shape[0] != D.shape[1] || M.rank() != 2 || D.shape != M.shape)
    throw ValidationError("diag_absorb_check: expects equal square shapes, got " +
                          shape_str(D.shape) + " vs " + shape_str(M.shape));
  const int64_t n = D.shape[0];
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      if (i != j && D.at(i, j) != 0.0)
        throw ValidationError("diag_absorb_check: D must be diagonal");
  for (int64_t i = 0; i < n; ++i)
    if (M.at(i, i) != 0.0)
      throw ValidationError("diag_absorb_check: M must have a zero diagonal");

  const NdArray MD = matmul(M, D);
  const NdArray DM = matmul(D, M);
  double worst = 0.0, tr_md = 0.0, tr_dm = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    worst = std::max({worst, std::fabs(MD.at(i, i)), std::fabs(DM.at(i, i))});
    tr_md += MD.at(i, i);
    tr_dm += DM.at(i, i);
  }
  return worst <= 1e-12 && std::fabs(tr_md) <= 1e-12 && std::fabs(tr_dm) <= 1e-12;
}

struct LatentScaleResult {
  double c_numeric = 0.0;
  double c_closed_form = 0.0;  // sqrt(sum x_i^2), the printed constant
  bool unbounded = false;
};

// argmin over c > 0 of sum_i (c^2 x_i^2 - log(c^2 y_i^2)), golden-section to
// 1e-10 after a geometric bracket scan.
inline LatentScaleResult optimal_latent_scale(const std::vector<double>& x,
                                              const std::vector<double>& y) {
  if (x.empty() || x.size() != y.size())
    throw ValidationError("optimal_latent_scale: x and y must be same nonzero length");
  for (double v : y)
    if (v == 0.0) throw ValidationError("optimal_latent_scale: y entries must be nonzero");

  LatentScaleResult out;
  double sum_x2 = 0.0;
  for (double v : x) sum_x2 += v * v;
  out.c_closed_form = std::sqrt(sum_x2);
  if (sum_x2 == 0.0) {
    out.unbounded = true;  // objective decreases without bound as c grows
    out.c_numeric = std::numeric_limits<double>::quiet_NaN();
    return out;
  }

  const double n = static_cast<double>(x.size());
  double log_y2 = 0.0;
  for (double v : y) log_y2 += std::log(v * v);
  auto f = [&](double c) { return c * c * sum_x2 - 2.0 * n * std::log(c) - log_y2; };

  double best_c = 1.0, best_f = f(1.0);
  for (int e = -40; e <= 40; ++e) {
    const double c = std::pow(2.0, e);
    const double v = f(c);
    if (v < best_f) {
      best_f = v;
      best_c = c;
    }
  }
  double lo = best_c * 0.5, hi = best_c * 2.0;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c1 = b - phi * (b - a), c2 = a + phi * (b - a);
  double f1 = f(c1), f2 = f(c2);
  while (b - a > 1e-10 * std::max(1.0, b)) {
    if (f1 < f2) {
      b = c2;
      c2 = c1;
      f2 = f1;
      c1 = b - phi * (b - a);
      f1 = f(c1);
    } else {
      a = c1;
      c1 = c2;
      f1 = f2;
      c2 = a + phi * (b - a);
      f2 = f(c2);
    }
  }
  // function-value comparisons stall near double rounding; derivative steps
  // finish the descent to a stationary point
  double c = 0.5 * (a + b);
  for (int it = 0; it < 8; ++it) {
    const double g = 2.0 * c * sum_x2 - 2.0 * n / c;
    const double h = 2.0 * sum_x2 + 2.0 * n / (c * c);
    double step = g / h;
    if (!std::isfinite(step)) break;
    if (std::fabs(step) > 0.5 * c) step = std::copysign(0.5 * c, step);
    c -= step;
  }
  out.c_numeric = c;
  return out;
}

// ---------------------------------------------------------------------------
// Alignment of a trained linear model's decoder with the PCA basis of its own
// reconstructed data. The testable claims: the decoder SVD's V factor is a
// signed permutation, its U columns match PCA eigenvectors (greedy |cosine|
// matching in singular-value order), and singular-value rank inversely
// matches the rank of the mean posterior variance.

struct PcaAlignmentReport {
  double v_distance = 1.0;
  std::vector<double> matched_cosines;  // one per active latent, singular-value order
  double min_cosine = 0.0;
  double sigma_spearman = 0.0;  // rank of singular values vs inverse rank of E[sigma^2]
  int active_latents = 0;
  int polarized_latents = 0;
  bool inconclusive = false;  // model not polarized in all active coordinates
  bool pass = false;
  double tol_distance = 0.05;
  double tol_cosine = 0.99;
  double active_sigma_threshold = 0.8;
};

inline PcaAlignmentReport verify_pca_alignment(VaeModel& model, const LabeledDataset& ds,
                                               double tol_distance = 0.05,
                                               double tol_cosine = 0.99) {
  if (model.config.arch != "linear")
    throw ValidationError("verify_pca_alignment: requires the linear architecture");
  PcaAlignmentReport rep;
  rep.tol_distance = tol_distance;
  rep.tol_cosine = tol_cosine;

  Representation r = eval_representation(model, ds.images);
  const int64_t k = model.config.latent_dim;

  std::vector<bool> active(static_cast<size_t>(k), false);
  for (int64_t j = 0; j < k; ++j)
    active[static_cast<size_t>(j)] = r.mean_sigma_sq[static_cast<size_t>(j)] < rep.active_sigma_threshold;
  rep.active_latents = static_cast<int>(std::count(active.begin(), active.end(), true));
  std::vector<bool> polarized = detect_polarized_regime(r.sigma_sq);
  rep.polarized_latents = static_cast<int>(std::count(polarized.begin(), polarized.end(), true));
  if (rep.polarized_latents < rep.active_latents) {
    rep.inconclusive = true;
    return rep;
  }

  SvdTriple dec = svd(model.decoder_matrix());
  rep.v_distance = signed_permutation_distance(dec.V);

  NdArray xhat = decode_batch(model, r.mu);
  PcaFit fit = pca_fit(xhat);

  // greedy |cosine| matching of U columns (descending singular value) to the
  // still-unused PCA eigenvector with the best agreement
  const int64_t d = dec.U.shape[0];
  std::vector<bool> used(static_cast<size_t>(d), false);
  rep.min_cosine = 1.0;
  for (int64_t col = 0; col < rep.active_latents; ++col) {
    double best = -1.0;
    int64_t best_j = -1;
    for (int64_t j = 0; j < d; ++j) {
      if (used[static_cast<size_t>(j)]) continue;
      double dot = 0.0, nu = 0.0, nv = 0.0;
      for (int64_t i = 0; i < d; ++i) {
        dot += dec.U.at(i, col) * fit.eigvecs.at(i, j);
        nu += dec.U.at(i, col) * dec.U.at(i, col);
        nv += fit.eigvecs.at(i, j) * fit.eigvecs.at(i, j);
      }
      const double cosine = std::fabs(dot) / std::sqrt(nu * nv);
      if (cosine > best) {
        best = cosine;
        best_j = j;
      }
    }
    used[static_cast<size_t>(best_j)] = true;
    rep.matched_cosines.push_back(best);
    rep.min_cosine = std::min(rep.min_cosine, best);
  }

  // per-latent singular value: latent j drives the singular direction with
  // the dominant entry in row j of V
  std::vector<double> s_latent, neg_sigma;
  for (int64_t j = 0; j < k; ++j) {
    if (!active[static_cast<size_t>(j)]) continue;
    int64_t arg = 0;
    double mx = -1.0;
    for (int64_t i = 0; i < k; ++i) {
      const double a = std::fabs(dec.V.at(j, i));
      if (a > mx) {
        mx = a;
        arg = i;
      }
    }
    s_latent.push_back(dec.S[static_cast<size_t>(arg)]);
    neg_sigma.push_back(-r.mean_sigma_sq[static_cast<size_t>(j)]);
  }
  rep.sigma_spearman = s_latent.size() >= 2 ? spearman(s_latent, neg_sigma) : 1.0;

  rep.pass = rep.v_distance < rep.tol_distance && rep.min_cosine > rep.tol_cosine &&
             rep.sigma_spearman == 1.0 && rep.active_latents > 0;
  return rep;
}

inline nlohmann::json alignment_report_json(const PcaAlignmentReport& rep) {
  return nlohmann::json{{"v_distance", rep.v_distance},
                        {"matched_cosines", rep.matched_cosines},
                        {"min_cosine", rep.min_cosine},
                        {"sigma_spearman", rep.sigma_spearman},
                        {"active_latents", rep.active_latents},
                        {"polarized_latents", rep.polarized_latents},
                        {"inconclusive", rep.inconclusive},
                        {"pass", rep.pass},
                        {"tol_distance", rep.tol_distance},
                        {"tol_cosine", rep.tol_cosine},
                        {"active_sigma_threshold", rep.active_sigma_threshold}};
}

}  // namespace dlab
