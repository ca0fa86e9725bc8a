#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dlab/dataset.hpp"
#include "dlab/factor_grid.hpp"
#include "dlab/linalg.hpp"
#include "dlab/ndarray.hpp"
#include "dlab/vae.hpp"

namespace dlab {

// Latent means and posterior variances aligned row-by-row with the factor
// indices of the dataset they were computed from.
struct RepresentationTable {
  NdArray mu;        // [n, k]
  NdArray sigma_sq;  // [n, k]
  std::vector<uint16_t> factor_indices;  // n * num_factors, row-major
  FactorGrid grid;

  int64_t n() const { return mu.shape.empty() ? 0 : mu.shape[0]; }
  int64_t k() const { return mu.rank() == 2 ? mu.shape[1] : 0; }
  int num_factors() const { return grid.num_factors(); }

  int factor_at(int64_t row, int f) const {
    return factor_indices[static_cast<size_t>(row) * static_cast<size_t>(num_factors()) +
                          static_cast<size_t>(f)];
  }
  double factor_value_at(int64_t row, int f) const {
    return grid.factors[static_cast<size_t>(f)]
        .values[static_cast<size_t>(factor_at(row, f))];
  }

  void validate() const {
    if (mu.rank() != 2 || sigma_sq.rank() != 2)
      throw ValidationError("RepresentationTable: mu and sigma_sq must be rank 2");
    if (mu.shape != sigma_sq.shape)
      throw ValidationError("RepresentationTable: mu shape " + shape_str(mu.shape) +
                            " != sigma_sq shape " + shape_str(sigma_sq.shape));
    if (n() < 2) throw ValidationError("RepresentationTable: needs at least 2 rows");
    if (factor_indices.size() !=
        static_cast<size_t>(n()) * static_cast<size_t>(num_factors()))
      throw ValidationError("RepresentationTable: factor_indices size mismatch");
    if (!mu.all_finite() || !sigma_sq.all_finite())
      throw ValidationError("RepresentationTable: non-finite entries");
    for (int64_t r = 0; r < n(); ++r)
      for (int f = 0; f < num_factors(); ++f)
        if (factor_at(r, f) >= grid.factors[static_cast<size_t>(f)].levels)
          throw ValidationError("RepresentationTable: factor index out of range at row " +
                                std::to_string(r));
  }
};

inline RepresentationTable make_representation_table(const Representation& rep,
                                                     const LabeledDataset& ds) {
  RepresentationTable t;
  t.mu = rep.mu;
  t.sigma_sq = rep.sigma_sq;
  t.factor_indices = ds.factor_indices;
  t.grid = ds.grid;
  t.validate();
  return t;
}

// Equal-width histogram codes per latent over the observed min/max. The top
// bin is right-closed so the maximum lands in bin `bins - 1`; a constant
// column maps to all zeros.
inline std::vector<std::vector<int>> discretize_latents(const NdArray& mu, int bins) {
  if (bins < 2) throw ValidationError("discretize_latents: bins must be >= 2");
  if (mu.rank() != 2) throw ValidationError("discretize_latents: expects [n, k] input");
  const int64_t n = mu.shape[0], k = mu.shape[1];
  std::vector<std::vector<int>> codes(static_cast<size_t>(k),
                                      std::vector<int>(static_cast<size_t>(n), 0));
  for (int64_t j = 0; j < k; ++j) {
    double lo = mu.at(0, j), hi = mu.at(0, j);
    for (int64_t i = 1; i < n; ++i) {
      lo = std::min(lo, mu.at(i, j));
      hi = std::max(hi, mu.at(i, j));
    }
    if (!(hi > lo)) continue;
    const double width = (hi - lo) / static_cast<double>(bins);
    for (int64_t i = 0; i < n; ++i) {
      const auto below = static_cast<int>(std::floor((hi - mu.at(i, j)) / width));
      codes[static_cast<size_t>(j)][static_cast<size_t>(i)] =
          (bins - 1) - std::min(bins - 1, below);
    }
  }
  return codes;
}

namespace detail {

// counts per level, ids in sorted level order
inline std::map<int, int64_t> level_counts(const std::vector<int>& a) {
  std::map<int, int64_t> c;
  for (int v : a) ++c[v];
  return c;
}

}  // namespace detail

// Plug-in entropy in nats from level counts.
inline double discrete_entropy(const std::vector<int>& a) {
  const auto counts = detail::level_counts(a);
  const auto n = static_cast<int64_t>(a.size());
  double h = 0.0;
  for (const auto& [lvl, c] : counts)
    h += (static_cast<double>(c) / static_cast<double>(n)) *
         std::log(static_cast<double>(n) / static_cast<double>(c));
  return h;
}

// Plug-in mutual information in nats from the joint histogram. Log arguments
// are ratios of integer counts, so exact independence (joint count * n equal
// to the product of marginals in every cell) gives exactly zero.
inline double mutual_information(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size())
    throw ValidationError("mutual_information: columns differ in length");
  if (a.empty()) throw ValidationError("mutual_information: empty columns");
  const auto n = static_cast<int64_t>(a.size());
  const auto ca = detail::level_counts(a);
  const auto cb = detail::level_counts(b);
  std::map<std::pair<int, int>, int64_t> joint;
  for (size_t i = 0; i < a.size(); ++i) ++joint[{a[i], b[i]}];

  double acc = 0.0;
  for (const auto& [cell, nab] : joint) {
    const int64_t na = ca.at(cell.first);
    const int64_t nb = cb.at(cell.second);
    acc += (static_cast<double>(nab) / static_cast<double>(n)) *
           std::log(static_cast<double>(nab * n) / static_cast<double>(na * nb));
  }
  return std::max(0.0, acc);
}

inline std::vector<int> factor_column(const RepresentationTable& t, int f) {
  std::vector<int> col(static_cast<size_t>(t.n()), 0);
  for (int64_t i = 0; i < t.n(); ++i) col[static_cast<size_t>(i)] = t.factor_at(i, f);
  return col;
}

// I(w_f, z_j) for every factor/latent pair, latents discretized to `bins`.
inline NdArray compute_mi_matrix(const RepresentationTable& t, int bins = 20) {
  t.validate();
  const auto codes = discretize_latents(t.mu, bins);
  NdArray mi = NdArray::zeros({t.num_factors(), t.k()});
  for (int f = 0; f < t.num_factors(); ++f) {
    const auto wf = factor_column(t, f);
    for (int64_t j = 0; j < t.k(); ++j)
      mi.at(f, j) = mutual_information(wf, codes[static_cast<size_t>(j)]);
  }
  return mi;
}

// Mean over factors of the normalized gap between the two largest mutual
// informations; factors with zero entropy are excluded.
inline double mig_score(const RepresentationTable& t, int bins = 20) {
  t.validate();
  if (t.num_factors() < 1) throw ValidationError("mig_score: needs at least one factor");
  if (t.k() < 2) throw ValidationError("mig_score: needs at least two latents");
  const NdArray mi = compute_mi_matrix(t, bins);
  double acc = 0.0;
  int used = 0;
  for (int f = 0; f < t.num_factors(); ++f) {
    const double h = discrete_entropy(factor_column(t, f));
    if (h <= 0.0) continue;
    double top = -1.0, second = -1.0;
    for (int64_t j = 0; j < t.k(); ++j) {
      const double v = mi.at(f, j);
      if (v > top) {
        second = top;
        top = v;
      } else if (v > second) {
        second = v;
      }
    }
    acc += (top - second) / h;
    ++used;
  }
  if (used == 0) throw ValidationError("mig_score: every factor is degenerate");
  return acc / static_cast<double>(used);
}

namespace detail {

// R^2 of the 1-D linear regression predicting y from x; squared Pearson
// correlation, 0 when either side has no variance.
inline double regression_r2(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return (sxy * sxy) / (sxx * syy);
}

}  // namespace detail

// Mean over factors of the gap between the best and second-best per-latent
// regression scores.
inline double sap_score(const RepresentationTable& t) {
  t.validate();
  if (t.k() < 2) throw ValidationError("sap_score: needs at least two latents");
  double acc = 0.0;
  for (int f = 0; f < t.num_factors(); ++f) {
    std::vector<double> w(static_cast<size_t>(t.n()));
    for (int64_t i = 0; i < t.n(); ++i)
      w[static_cast<size_t>(i)] = t.factor_value_at(i, f);
    double top = -1.0, second = -1.0;
    for (int64_t j = 0; j < t.k(); ++j) {
      std::vector<double> z(static_cast<size_t>(t.n()));
      for (int64_t i = 0; i < t.n(); ++i) z[static_cast<size_t>(i)] = t.mu.at(i, j);
      const double r2 = detail::regression_r2(z, w);
      if (r2 > top) {
        second = top;
        top = r2;
      } else if (r2 > second) {
        second = r2;
      }
    }
    acc += top - second;
  }
  return acc / static_cast<double>(t.num_factors());
}

// Importance matrix from absolute Spearman correlations; per-latent score is
// one minus the entropy of the normalized importance row (log base N_w),
// weighted by the row's share of total importance.
inline double dci_disentanglement(const RepresentationTable& t) {
  t.validate();
  const int nf = t.num_factors();
  const int64_t k = t.k();
  NdArray R = NdArray::zeros({k, nf});
  for (int f = 0; f < nf; ++f) {
    std::vector<double> w(static_cast<size_t>(t.n()));
    for (int64_t i = 0; i < t.n(); ++i)
      w[static_cast<size_t>(i)] = t.factor_value_at(i, f);
    for (int64_t j = 0; j < k; ++j) {
      std::vector<double> z(static_cast<size_t>(t.n()));
      for (int64_t i = 0; i < t.n(); ++i) z[static_cast<size_t>(i)] = t.mu.at(i, j);
      R.at(j, f) = std::fabs(spearman(z, w));
    }
  }
  double total = 0.0;
  for (double v : R.data) total += v;
  if (total <= 0.0) return 0.0;

  double score = 0.0;
  for (int64_t j = 0; j < k; ++j) {
    double mass = 0.0;
    for (int f = 0; f < nf; ++f) mass += R.at(j, f);
    if (mass <= 0.0) continue;
    double h = 0.0;
    for (int f = 0; f < nf; ++f) {
      const double p = R.at(j, f) / mass;
      if (p > 0.0) h -= p * std::log(p);
    }
    const double d = nf > 1 ? 1.0 - h / std::log(static_cast<double>(nf)) : 1.0;
    score += (mass / total) * d;
  }
  return score;
}

// Majority-vote classifier accuracy: per vote one factor is held fixed, the
// latent with the smallest within-batch variance (after global-std
// normalization) is the vote feature. Collapsed latents (mean sigma^2 at or
// above the prune threshold) are excluded from the argmin unless that would
// exclude everything. The first three quarters of the votes fit the
// classifier, the rest score it.
inline double factorvae_score(const RepresentationTable& t, int votes = 800,
                              int batch = 64, uint64_t seed = 0,
                              double prune_threshold = 0.8) {
  t.validate();
  if (votes < 8) throw ValidationError("factorvae_score: needs at least 8 votes");
  if (batch < 2) throw ValidationError("factorvae_score: batch must be >= 2");
  const int64_t n = t.n(), k = t.k();
  const int nf = t.num_factors();

  std::vector<double> gstd(static_cast<size_t>(k), 0.0);
  for (int64_t j = 0; j < k; ++j) {
    double m = 0.0;
    for (int64_t i = 0; i < n; ++i) m += t.mu.at(i, j);
    m /= static_cast<double>(n);
    double v = 0.0;
    for (int64_t i = 0; i < n; ++i) v += (t.mu.at(i, j) - m) * (t.mu.at(i, j) - m);
    gstd[static_cast<size_t>(j)] = std::sqrt(v / static_cast<double>(n));
  }

  std::vector<int64_t> eligible;
  for (int64_t j = 0; j < k; ++j) {
    double ms = 0.0;
    for (int64_t i = 0; i < n; ++i) ms += t.sigma_sq.at(i, j);
    ms /= static_cast<double>(n);
    if (ms < prune_threshold && gstd[static_cast<size_t>(j)] > 0.0) eligible.push_back(j);
  }
  if (eligible.empty())
    for (int64_t j = 0; j < k; ++j)
      if (gstd[static_cast<size_t>(j)] > 0.0) eligible.push_back(j);
  if (eligible.empty())
    throw ValidationError("factorvae_score: every latent is constant");

  // rows grouped by (factor, level); only levels that actually occur count
  std::vector<std::vector<std::vector<int64_t>>> rows_by_level(static_cast<size_t>(nf));
  std::vector<int> usable_factors;
  for (int f = 0; f < nf; ++f) {
    auto& per_level = rows_by_level[static_cast<size_t>(f)];
    per_level.assign(static_cast<size_t>(t.grid.factors[static_cast<size_t>(f)].levels), {});
    for (int64_t i = 0; i < n; ++i)
      per_level[static_cast<size_t>(t.factor_at(i, f))].push_back(i);
    int nonempty = 0;
    for (const auto& g : per_level) nonempty += g.empty() ? 0 : 1;
    if (nonempty >= 2) usable_factors.push_back(f);
  }
  if (usable_factors.empty())
    throw ValidationError("factorvae_score: no factor varies across the table");

  Rng rng(mix_seed(seed, 0xfac7u));
  std::vector<std::pair<int64_t, int>> cast;  // (feature latent, factor)
  cast.reserve(static_cast<size_t>(votes));
  for (int v = 0; v < votes; ++v) {
    const int f = usable_factors[rng.index(usable_factors.size())];
    const auto& per_level = rows_by_level[static_cast<size_t>(f)];
    const std::vector<int64_t>* group = nullptr;
    while (group == nullptr || group->empty())
      group = &per_level[rng.index(per_level.size())];
    int64_t best_j = -1;
    double best_var = std::numeric_limits<double>::infinity();
    for (int64_t j : eligible) {
      double m = 0.0, sq = 0.0;
      for (int b = 0; b < batch; ++b) {
        const int64_t row = (*group)[rng.index(group->size())];
        const double z = t.mu.at(row, j) / gstd[static_cast<size_t>(j)];
        m += z;
        sq += z * z;
      }
      m /= static_cast<double>(batch);
      const double var = sq / static_cast<double>(batch) - m * m;
      if (var < best_var) {
        best_var = var;
        best_j = j;
      }
    }
    cast.emplace_back(best_j, f);
  }

  const size_t split = cast.size() - cast.size() / 4;
  std::map<int64_t, std::map<int, int64_t>> tally;
  for (size_t v = 0; v < split; ++v) ++tally[cast[v].first][cast[v].second];
  std::map<int64_t, int> predict;
  for (const auto& [feature, by_factor] : tally) {
    int best_f = -1;
    int64_t best_c = -1;
    for (const auto& [f, c] : by_factor)
      if (c > best_c) {
        best_c = c;
        best_f = f;
      }
    predict[feature] = best_f;
  }
  int64_t correct = 0;
  for (size_t v = split; v < cast.size(); ++v) {
    const auto it = predict.find(cast[v].first);
    if (it != predict.end() && it->second == cast[v].second) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(cast.size() - split);
}

// Latents whose mean posterior variance stays below the threshold.
inline int count_active_units(const NdArray& sigma_sq, double threshold = 0.8) {
  if (sigma_sq.rank() != 2)
    throw ValidationError("count_active_units: expects [n, k] input");
  const int64_t n = sigma_sq.shape[0], k = sigma_sq.shape[1];
  int active = 0;
  for (int64_t j = 0; j < k; ++j) {
    double m = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      if (!(sigma_sq.at(i, j) > 0.0))
        throw ValidationError("count_active_units: sigma_sq must be positive");
      m += sigma_sq.at(i, j);
    }
    if (m / static_cast<double>(n) < threshold) ++active;
  }
  return active;
}

struct MetricReport {
  double mig = 0.0;
  double sap = 0.0;
  double dci_d = 0.0;
  double factorvae = 0.0;
  int active_units = 0;
  NdArray mi;  // [N_w, k]
};

inline MetricReport compute_metric_report(const RepresentationTable& t, uint64_t seed,
                                          int bins = 20, int votes = 800,
                                          int batch = 64) {
  MetricReport r;
  r.mig = mig_score(t, bins);
  r.sap = sap_score(t);
  r.dci_d = dci_disentanglement(t);
  r.factorvae = factorvae_score(t, votes, batch, seed);
  r.active_units = count_active_units(t.sigma_sq);
  r.mi = compute_mi_matrix(t, bins);
  return r;
}

inline nlohmann::json metric_report_json(const MetricReport& r) {
  std::vector<std::vector<double>> mi(static_cast<size_t>(r.mi.shape[0]));
  for (int64_t f = 0; f < r.mi.shape[0]; ++f)
    for (int64_t j = 0; j < r.mi.shape[1]; ++j)
      mi[static_cast<size_t>(f)].push_back(r.mi.at(f, j));
  return nlohmann::json{{"mig", r.mig},
                        {"sap", r.sap},
                        {"dci_d", r.dci_d},
                        {"factorvae", r.factorvae},
                        {"active_units", r.active_units},
                        {"mi_matrix", mi}};
}

inline std::string metric_csv_header() {
  return "run_id,seed,beta,provenance,mig,sap,dci_d,factorvae,active_units";
}

inline std::string metric_csv_row(const std::string& run_id, uint64_t seed, double beta,
                                  const std::string& provenance, const MetricReport& r) {
  std::ostringstream os;
  os << run_id << ',' << seed << ',';
  os.setf(std::ios::fixed);
  os.precision(6);
  os << beta << ',' << provenance << ',' << r.mig << ',' << r.sap << ',' << r.dci_d << ','
     << r.factorvae << ',' << r.active_units;
  return os.str();
}

}  // namespace dlab
