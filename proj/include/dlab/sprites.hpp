#pragma once

#include <cmath>
#include <vector>

#include "dlab/factor_grid.hpp"
#include "dlab/ndarray.hpp"

namespace dlab {

// Factor layout for sprite rendering: (shape, scale, pos_x, pos_y[, angle]).
// shape: 0 square, 1 disc, 2 triangle. scale is the side of the bounding box
// in unit coordinates; positions are the object center in [0,1]^2. The
// optional angle (radians) rotates triangles only.

namespace detail {

inline bool point_in_sprite(int shape, double cx, double cy, double s, double angle, double x,
                            double y) {
  double dx = x - cx, dy = y - cy;
  const double h = 0.5 * s;
  switch (shape) {
    case 0:
      return std::fabs(dx) <= h && std::fabs(dy) <= h;
    case 1:
      return dx * dx + dy * dy <= h * h;
    case 2: {
      if (angle != 0.0) {
        const double c = std::cos(angle), sn = std::sin(angle);
        const double rx = c * dx + sn * dy;
        const double ry = -sn * dx + c * dy;
        dx = rx;
        dy = ry;
      }
      // apex up: (0,-h), base corners (-h,h), (h,h)
      if (dy < -h || dy > h) return false;
      const double half_width_at_y = (dy + h) * 0.5;
      return std::fabs(dx) <= half_width_at_y;
    }
    default:
      throw ValidationError("point_in_sprite: shape id " + std::to_string(shape) +
                            " out of range");
  }
}

inline int sprite_shape_id(double raw) {
  const int id = static_cast<int>(std::lround(raw));
  if (id < 0 || id > 2 || std::fabs(raw - id) > 1e-6)
    throw ValidationError("sprite shape value " + std::to_string(raw) +
                          " is not one of 0, 1, 2");
  return id;
}

}  // namespace detail

// Anti-aliased grayscale rendering with 4x4 subsamples per pixel. Pixel (i,j)
// covers [j/r,(j+1)/r] x [i/r,(i+1)/r] of the unit square.
inline NdArray render_minisprite(const std::vector<double>& w, int64_t r) {
  if (w.size() != 4 && w.size() != 5)
    throw ValidationError("render_minisprite: expects 4 or 5 factors, got " +
                          std::to_string(w.size()));
  if (r < 16)
    throw ValidationError("render_minisprite: side must be >= 16, got " + std::to_string(r));
  const int shape = detail::sprite_shape_id(w[0]);
  const double s = w[1], cx = w[2], cy = w[3];
  const double angle = (w.size() == 5 && shape == 2) ? w[4] : 0.0;

  NdArray img = NdArray::zeros({r, r});
  const double inv_r = 1.0 / static_cast<double>(r);
  constexpr int kSub = 4;
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < r; ++j) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        const double y = (static_cast<double>(i) + (sy + 0.5) / kSub) * inv_r;
        for (int sx = 0; sx < kSub; ++sx) {
          const double x = (static_cast<double>(j) + (sx + 0.5) / kSub) * inv_r;
          if (detail::point_in_sprite(shape, cx, cy, s, angle, x, y)) ++hits;
        }
      }
      img.at(i, j) = static_cast<double>(hits) / (kSub * kSub);
    }
  }
  return img;
}

// The default stand-in grid: shape 3, scale 5, pos 8x8, all objects strictly
// inside the canvas.
inline FactorGrid default_minisprite_grid() {
  return make_factor_grid({{"shape", 3, 0.0, 2.0},
                           {"scale", 5, 0.2, 0.45},
                           {"pos_x", 8, 0.25, 0.75},
                           {"pos_y", 8, 0.25, 0.75}});
}

// Every grid point must keep the whole object inside the unit canvas. The
// bounding half-extent sqrt(2)/2 * s covers rotated triangles too.
inline void validate_sprite_grid(const FactorGrid& grid) {
  if (grid.num_factors() != 4 && grid.num_factors() != 5)
    throw ValidationError("sprite grid needs factors (shape, scale, pos_x, pos_y[, angle])");
  for (double raw : grid.factors[0].values) detail::sprite_shape_id(raw);
  const bool rotated = grid.num_factors() == 5;
  const double extent_factor = rotated ? std::sqrt(2.0) / 2.0 : 0.5;
  const double s_max = grid.factors[1].values.back();
  const double half = extent_factor * s_max;
  for (int axis = 2; axis <= 3; ++axis) {
    const auto& vals = grid.factors[static_cast<size_t>(axis)].values;
    if (vals.front() - half <= 0.0 || vals.back() + half >= 1.0)
      throw ValidationError("sprite grid: object exits the canvas along " +
                            grid.factors[static_cast<size_t>(axis)].name + " (half extent " +
                            std::to_string(half) + ")");
  }
}

}  // namespace dlab
