#pragma once

// Factorized affine warps and the bilinear sampler used both by the agent and
// by dataset distortion.
//
// Conventions:
//  * Pixel grids are addressed in normalized coordinates, x (column) and y (row)
//    each spanning [-1, 1] from the first to the last pixel centre. y points
//    down, so the standard rotation matrix turns content clockwise on screen.
//  * A warp moves image content by the affine matrix: the content found at
//    normalized source point q appears at M q in the output. Sampling is done
//    by pulling each output pixel from M^-1 applied to its coordinate.
//  * Samples outside the source grid read as zero.

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "rest/image.hpp"

namespace rest {

/// The 7-parameter action: rotation (degrees), two scale factors, two shear
/// coefficients, two translations (pixels; t1 along columns, t2 along rows).
struct AffineParams {
  double rotation = 0.0;
  double scale1 = 1.0;
  double scale2 = 1.0;
  double shear1 = 0.0;
  double shear2 = 0.0;
  double translate1 = 0.0;
  double translate2 = 0.0;

  static constexpr int kSize = 7;

  static AffineParams identity() { return {}; }

  std::array<double, kSize> to_array() const {
    return {rotation, scale1, scale2, shear1, shear2, translate1, translate2};
  }
  static AffineParams from_array(const std::array<double, kSize>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
  }

  friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

/// Centre and half-width of one action-bound interval.
struct BoundInterval {
  double center;
  double half_width;
  double lower() const { return center - half_width; }
  double upper() const { return center + half_width; }
};

/// Per-component action bounds: rotation [-30,30], scale [0.9,1.1],
/// shear [-0.2,0.2], translation [-4,4].
inline constexpr std::array<BoundInterval, AffineParams::kSize> kActionBounds{{
    {0.0, 30.0}, {1.0, 0.1}, {1.0, 0.1}, {0.0, 0.2}, {0.0, 0.2}, {0.0, 4.0}, {0.0, 4.0},
}};

/// 3x3 homogeneous matrix, row-major: m[3 * row + col].
struct AffineMatrix {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  double operator()(int row, int col) const { return m[3 * row + col]; }
  double& operator()(int row, int col) { return m[3 * row + col]; }

  static AffineMatrix identity() { return {}; }

  friend AffineMatrix operator*(const AffineMatrix& a, const AffineMatrix& b) {
    AffineMatrix out;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += a(r, k) * b(k, c);
        out(r, c) = s;
      }
    }
    return out;
  }

  double determinant() const {
    const auto& a = *this;
    return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
           a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
           a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
  }

  /// Inverse of an affine matrix (bottom row 0 0 1).
  AffineMatrix inverse_affine() const {
    const auto& a = *this;
    const double det = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
    if (!std::isfinite(det) || std::abs(det) < 1e-12) {
      throw std::invalid_argument("AffineMatrix: singular linear part");
    }
    AffineMatrix inv;
    inv(0, 0) = a(1, 1) / det;
    inv(0, 1) = -a(0, 1) / det;
    inv(1, 0) = -a(1, 0) / det;
    inv(1, 1) = a(0, 0) / det;
    inv(0, 2) = -(inv(0, 0) * a(0, 2) + inv(0, 1) * a(1, 2));
    inv(1, 2) = -(inv(1, 0) * a(0, 2) + inv(1, 1) * a(1, 2));
    return inv;
  }
};

inline double degrees_to_radians(double deg) { return deg * std::numbers::pi / 180.0; }

inline void check_finite(const AffineParams& params) {
  for (double v : params.to_array()) {
    if (!std::isfinite(v)) throw std::invalid_argument("AffineParams: non-finite parameter");
  }
}

inline bool within_action_bounds(const AffineParams& params) {
  const auto values = params.to_array();
  for (int i = 0; i < AffineParams::kSize; ++i) {
    if (!(values[i] >= kActionBounds[i].lower() && values[i] <= kActionBounds[i].upper())) {
      return false;
    }
  }
  return true;
}

/// Rotation * Scale * Shear * Translation, multiplied in that order. The
/// translation entries are taken as given; warp_image converts pixels to
/// normalized units before calling this.
inline AffineMatrix compose_affine(const AffineParams& p) {
  check_finite(p);
  const double rad = degrees_to_radians(p.rotation);
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  AffineMatrix rotation{{c, -s, 0, s, c, 0, 0, 0, 1}};
  AffineMatrix scale{{p.scale1, 0, 0, 0, p.scale2, 0, 0, 0, 1}};
  AffineMatrix shear{{1, p.shear1, 0, p.shear2, 1, 0, 0, 0, 1}};
  AffineMatrix translation{{1, 0, p.translate1, 0, 1, p.translate2, 0, 0, 1}};
  return rotation * scale * shear * translation;
}

/// Pixel translations expressed in normalized units for a height x width grid.
inline AffineParams normalize_translation(AffineParams p, int height, int width) {
  p.translate1 = width > 1 ? 2.0 * p.translate1 / (width - 1) : 0.0;
  p.translate2 = height > 1 ? 2.0 * p.translate2 / (height - 1) : 0.0;
  return p;
}

namespace detail {

// Source coordinates this close to a grid point are treated as exact so that
// identity and integer-shift warps reproduce pixels bit for bit.
inline constexpr double kSnapTolerance = 1e-9;

inline double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < kSnapTolerance ? r : v;
}

inline double to_normalized(int index, int size) {
  return size > 1 ? -1.0 + 2.0 * index / (size - 1) : 0.0;
}

inline double to_pixel(double normalized, int size) {
  return size > 1 ? (normalized + 1.0) * 0.5 * (size - 1) : 0.0;
}

}  // namespace detail

/// Bilinear read of channel `c` at fractional pixel (x, y); zero outside the grid.
inline double sample_bilinear(const ImageTensor& image, int c, double x, double y) {
  const double fx0 = std::floor(x);
  const double fy0 = std::floor(y);
  const double wx = x - fx0;
  const double wy = y - fy0;
  const int x0 = static_cast<int>(fx0);
  const int y0 = static_cast<int>(fy0);
  auto read = [&](int yy, int xx) -> double {
    if (xx < 0 || yy < 0 || xx >= image.width || yy >= image.height) return 0.0;
    return image.at(c, yy, xx);
  };
  double top = read(y0, x0);
  double bottom = read(y0 + 1, x0);
  if (wx != 0.0) {
    top = (1.0 - wx) * top + wx * read(y0, x0 + 1);
    bottom = (1.0 - wx) * bottom + wx * read(y0 + 1, x0 + 1);
  }
  return wy != 0.0 ? (1.0 - wy) * top + wy * bottom : top;
}

/// Warps `image` by `params`; output has the same shape.
inline ImageTensor warp_image(const ImageTensor& image, const AffineParams& params) {
  validate_image(image, "warp_image");
  check_finite(params);
  const AffineMatrix forward =
      compose_affine(normalize_translation(params, image.height, image.width));
  const AffineMatrix inv = forward.inverse_affine();

  ImageTensor out(image.height, image.width, image.channels);
  for (int y = 0; y < image.height; ++y) {
    const double yn = detail::to_normalized(y, image.height);
    for (int x = 0; x < image.width; ++x) {
      const double xn = detail::to_normalized(x, image.width);
      const double sxn = inv(0, 0) * xn + inv(0, 1) * yn + inv(0, 2);
      const double syn = inv(1, 0) * xn + inv(1, 1) * yn + inv(1, 2);
      const double sx = detail::snap(detail::to_pixel(sxn, image.width));
      const double sy = detail::snap(detail::to_pixel(syn, image.height));
      for (int c = 0; c < image.channels; ++c) {
        out.at(c, y, x) = std::clamp(sample_bilinear(image, c, sx, sy), 0.0, 1.0);
      }
    }
  }
  return out;
}

/// Maps a tanh-range vector onto the action bounds; 0 maps to each interval's
/// midpoint, so the zero vector is the identity transform.
inline AffineParams params_from_unit(const std::array<double, AffineParams::kSize>& unit) {
  std::array<double, AffineParams::kSize> values{};
  for (int i = 0; i < AffineParams::kSize; ++i) {
    if (!(unit[i] >= -1.0 && unit[i] <= 1.0)) {
      throw std::invalid_argument("params_from_unit: component " + std::to_string(i) +
                                  " outside [-1, 1]");
    }
    values[i] = kActionBounds[i].center + unit[i] * kActionBounds[i].half_width;
  }
  return AffineParams::from_array(values);
}

}  // namespace rest
