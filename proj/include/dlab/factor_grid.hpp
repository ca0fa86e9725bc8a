#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dlab/common.hpp"

namespace dlab {

struct Factor {
  std::string name;
  int levels = 0;
  std::vector<double> values;  // strictly increasing
};

// Cartesian product of independent factors. Enumeration is row-major with the
// last factor varying fastest.
struct FactorGrid {
  std::vector<Factor> factors;

  int64_t size() const {
    int64_t s = 1;
    for (const Factor& f : factors) s *= f.levels;
    return s;
  }
  int num_factors() const { return static_cast<int>(factors.size()); }

  std::vector<int> unravel(int64_t flat) const {
    std::vector<int> idx(factors.size(), 0);
    for (int f = num_factors() - 1; f >= 0; --f) {
      const int64_t l = factors[static_cast<size_t>(f)].levels;
      idx[static_cast<size_t>(f)] = static_cast<int>(flat % l);
      flat /= l;
    }
    return idx;
  }

  int64_t ravel(const std::vector<int>& idx) const {
    if (idx.size() != factors.size())
      throw ValidationError("FactorGrid::ravel: index arity mismatch");
    int64_t flat = 0;
    for (size_t f = 0; f < factors.size(); ++f) {
      if (idx[f] < 0 || idx[f] >= factors[f].levels)
        throw ValidationError("FactorGrid::ravel: index out of bounds for factor " +
                              factors[f].name);
      flat = flat * factors[f].levels + idx[f];
    }
    return flat;
  }

  std::vector<double> values_at(const std::vector<int>& idx) const {
    std::vector<double> w(factors.size(), 0.0);
    for (size_t f = 0; f < factors.size(); ++f)
      w[f] = factors[f].values[static_cast<size_t>(idx[f])];
    return w;
  }
};

struct FactorSpec {
  std::string name;
  int levels = 0;
  double lo = 0.0;
  double hi = 0.0;
};

inline FactorGrid make_factor_grid(const std::vector<FactorSpec>& spec) {
  if (spec.empty()) throw ValidationError("make_factor_grid: needs at least one factor");
  FactorGrid grid;
  for (const FactorSpec& s : spec) {
    if (s.levels < 2)
      throw ValidationError("make_factor_grid: factor " + s.name + " needs levels >= 2, got " +
                            std::to_string(s.levels));
    if (!(s.lo < s.hi))
      throw ValidationError("make_factor_grid: factor " + s.name + " needs lo < hi");
    Factor f;
    f.name = s.name;
    f.levels = s.levels;
    f.values.resize(static_cast<size_t>(s.levels));
    for (int i = 0; i < s.levels; ++i)
      f.values[static_cast<size_t>(i)] =
          s.lo + (s.hi - s.lo) * static_cast<double>(i) / static_cast<double>(s.levels - 1);
    grid.factors.push_back(std::move(f));
  }
  return grid;
}

}  // namespace dlab
