#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dlab/factor_grid.hpp"
#include "dlab/ndarray.hpp"
#include "dlab/sprites.hpp"

namespace dlab {

// Entries are snapped to float32 at construction so that serialization
// round-trips bit-exactly.
inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void quantize_f32_inplace(NdArray& a) {
  for (double& v : a.data) v = quantize_f32(v);
}

struct LabeledDataset {
  NdArray images;                        // [n x d]
  std::vector<uint16_t> factor_indices;  // n rows of num_factors entries
  FactorGrid grid;
  int64_t image_side = 0;  // r with d = r*r for image data, 0 for point clouds
  std::string provenance = "original";
  std::string kind;
  uint64_t seed = 0;

  int64_t n() const { return images.shape.empty() ? 0 : images.shape[0]; }
  int64_t dim() const { return images.rank() == 2 ? images.shape[1] : 0; }

  uint16_t factor_at(int64_t row, int f) const {
    return factor_indices[static_cast<size_t>(row * grid.num_factors() + f)];
  }

  void validate() const {
    if (images.rank() != 2) throw ValidationError("dataset: images must be [n x d]");
    const int64_t rows = n();
    const int F = grid.num_factors();
    if (static_cast<int64_t>(factor_indices.size()) != rows * F)
      throw ValidationError("dataset: factor index table has wrong size");
    for (int64_t i = 0; i < rows; ++i)
      for (int f = 0; f < F; ++f)
        if (factor_at(i, f) >= grid.factors[static_cast<size_t>(f)].levels)
          throw ValidationError("dataset: factor index out of grid bounds at row " +
                                std::to_string(i));
    if (image_side > 0 && image_side * image_side != dim())
      throw ValidationError("dataset: image_side^2 != d");
  }
};

// ---------------------------------------------------------------------------
// Generators. Each kind fills the full factor grid deterministically from the
// seed; rows follow grid enumeration order.

struct MinispritesParams {
  FactorGrid grid;
  int64_t image_side = 32;
};

struct GridCloudParams {
  int64_t k = 4;                    // lattice side, k x k cluster centers
  double cluster_half_width = 0.02; // half side of each cluster square
  int64_t points_per_side = 3;      // each cluster holds points_per_side^2 points
  double lattice_lo = 0.1;
  double lattice_hi = 0.9;
};

struct LinearGaussianParams {
  NdArray A;                   // [d x m] mixing matrix
  std::vector<double> lambda;  // factor variances, strictly distinct
  int64_t n = 0;
  int index_bins = 8;  // factor indices are quantized latents, bookkeeping only
};

inline LabeledDataset generate_minisprites(const MinispritesParams& p, uint64_t seed) {
  validate_sprite_grid(p.grid);
  const int64_t n = p.grid.size(), r = p.image_side, d = r * r;
  LabeledDataset ds;
  ds.kind = "minisprites";
  ds.seed = seed;
  ds.grid = p.grid;
  ds.image_side = r;
  ds.images = NdArray::zeros({n, d});
  ds.factor_indices.resize(static_cast<size_t>(n * p.grid.num_factors()));
  for (int64_t row = 0; row < n; ++row) {
    const std::vector<int> idx = p.grid.unravel(row);
    NdArray img = render_minisprite(p.grid.values_at(idx), r);
    for (int64_t e = 0; e < d; ++e)
      ds.images.at(row, e) = quantize_f32(img.data[static_cast<size_t>(e)]);
    for (int f = 0; f < p.grid.num_factors(); ++f)
      ds.factor_indices[static_cast<size_t>(row * p.grid.num_factors() + f)] =
          static_cast<uint16_t>(idx[static_cast<size_t>(f)]);
  }
  return ds;
}

// k x k cluster centers on a 2-D lattice; each cluster is a deterministic
// points_per_side^2 sub-lattice of cell midpoints inside an axis-aligned
// square of half width h. Local variance per axis is h^2/3 * (1 - 1/m^2),
// below the h^2/3 contract surely. One grid cell = one cluster.
inline LabeledDataset generate_grid_cloud(const GridCloudParams& p, uint64_t seed) {
  if (p.k < 2) throw ValidationError("grid_cloud: k must be >= 2");
  if (p.points_per_side < 1) throw ValidationError("grid_cloud: points_per_side must be >= 1");
  if (p.cluster_half_width <= 0.0)
    throw ValidationError("grid_cloud: cluster_half_width must be positive");
  const double spacing = (p.lattice_hi - p.lattice_lo) / static_cast<double>(p.k - 1);
  if (p.cluster_half_width >= 0.5 * spacing)
    throw ValidationError("grid_cloud: clusters would overlap the lattice spacing");

  LabeledDataset ds;
  ds.kind = "grid_cloud";
  ds.seed = seed;
  ds.grid = make_factor_grid({{"pos_x", static_cast<int>(p.k), p.lattice_lo, p.lattice_hi},
                              {"pos_y", static_cast<int>(p.k), p.lattice_lo, p.lattice_hi}});
  const int64_t m = p.points_per_side;
  const int64_t per_cluster = m * m;
  const int64_t n = p.k * p.k * per_cluster;
  ds.images = NdArray::zeros({n, 2});
  ds.factor_indices.resize(static_cast<size_t>(n * 2));
  const double h = p.cluster_half_width;
  int64_t row = 0;
  for (int64_t a = 0; a < p.k; ++a) {
    for (int64_t b = 0; b < p.k; ++b) {
      const double cx = ds.grid.factors[0].values[static_cast<size_t>(a)];
      const double cy = ds.grid.factors[1].values[static_cast<size_t>(b)];
      for (int64_t u = 0; u < m; ++u) {
        for (int64_t v = 0; v < m; ++v) {
          const double ox = -h + (2.0 * static_cast<double>(u) + 1.0) * h / static_cast<double>(m);
          const double oy = -h + (2.0 * static_cast<double>(v) + 1.0) * h / static_cast<double>(m);
          ds.images.at(row, 0) = quantize_f32(cx + ox);
          ds.images.at(row, 1) = quantize_f32(cy + oy);
          ds.factor_indices[static_cast<size_t>(row * 2 + 0)] = static_cast<uint16_t>(a);
          ds.factor_indices[static_cast<size_t>(row * 2 + 1)] = static_cast<uint16_t>(b);
          ++row;
        }
      }
    }
  }
  return ds;
}

// Rows x = A s with s ~ N(0, diag(lambda)), lambda strictly distinct. Factor
// indices are per-dimension equal-width bins of s, recorded for bookkeeping;
// this kind has no complete grid and no [0,1] range contract.
inline LabeledDataset generate_linear_gaussian(const LinearGaussianParams& p, uint64_t seed) {
  if (p.A.rank() != 2) throw ValidationError("linear_gaussian: A must be a matrix");
  const int64_t d = p.A.shape[0], m = p.A.shape[1];
  if (static_cast<int64_t>(p.lambda.size()) != m)
    throw ValidationError("linear_gaussian: lambda size must match cols of A");
  if (p.n < 2) throw ValidationError("linear_gaussian: n must be >= 2");
  if (p.index_bins < 2) throw ValidationError("linear_gaussian: index_bins must be >= 2");
  for (size_t i = 0; i < p.lambda.size(); ++i) {
    if (p.lambda[i] <= 0.0) throw ValidationError("linear_gaussian: lambda must be positive");
    for (size_t j = i + 1; j < p.lambda.size(); ++j)
      if (p.lambda[i] == p.lambda[j])
        throw ValidationError("linear_gaussian: lambda values must be strictly distinct");
  }

  Rng rng(mix_seed(seed, 0x6c696e67));
  NdArray S = NdArray::zeros({p.n, m});
  for (int64_t i = 0; i < p.n; ++i)
    for (int64_t j = 0; j < m; ++j)
      S.at(i, j) = std::sqrt(p.lambda[static_cast<size_t>(j)]) * rng.normal();

  LabeledDataset ds;
  ds.kind = "linear_gaussian";
  ds.seed = seed;
  ds.images = matmul(S, transpose(p.A));
  quantize_f32_inplace(ds.images);

  std::vector<FactorSpec> spec;
  for (int64_t j = 0; j < m; ++j) {
    double lo = S.at(0, j), hi = S.at(0, j);
    for (int64_t i = 1; i < p.n; ++i) {
      lo = std::min(lo, S.at(i, j));
      hi = std::max(hi, S.at(i, j));
    }
    spec.push_back({"s" + std::to_string(j), p.index_bins, lo, hi});
  }
  ds.grid = make_factor_grid(spec);
  ds.factor_indices.resize(static_cast<size_t>(p.n * m));
  for (int64_t i = 0; i < p.n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      const auto& f = ds.grid.factors[static_cast<size_t>(j)];
      const double lo = f.values.front(), hi = f.values.back();
      const double width = (hi - lo) / static_cast<double>(p.index_bins);
      int b = static_cast<int>((S.at(i, j) - lo) / width);
      b = std::max(0, std::min(p.index_bins - 1, b));
      ds.factor_indices[static_cast<size_t>(i * m + j)] = static_cast<uint16_t>(b);
    }
  }
  return ds;
}

}  // namespace dlab
