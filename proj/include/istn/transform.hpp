#pragma once

// Spatial transformations: bounded affine parameters, the decomposed affine
// matrix, cubic B-spline free-form deformations, dense sampling fields and the
// differentiable bilinear sampler.
//
// Coordinates are normalised to [-1, 1] per axis with pixel centres at
// -1 + (2i + 1) / N. A field stores, for every output pixel, the (x, y)
// location to sample in the moving image (backward warping).

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "istn/common.hpp"
#include "istn/image.hpp"

namespace istn {

using Matrix3 = Eigen::Matrix3d;

enum class TransformModel { affine, bspline };

inline std::string to_string(TransformModel m) { return m == TransformModel::affine ? "affine" : "bspline"; }

inline TransformModel parse_transform_model(const std::string& s) {
  if (s == "affine") return TransformModel::affine;
  if (s == "bspline") return TransformModel::bspline;
  throw UsageError("unknown transform model '" + s + "'");
}

// ---------------------------------------------------------------------------
// Affine parameters

struct AffineParams {
  static constexpr int kCount = 6;

  std::array<double, 2> t{0.0, 0.0};  // translation, normalised units
  double phi = 0.0;                   // rotation, radians
  std::array<double, 2> s{0.0, 0.0};  // log-scale per axis
  double psi = 0.0;                   // shear angle, radians

  /// Fixed order t_x t_y phi s_x s_y psi.
  std::array<double, kCount> to_array() const { return {t[0], t[1], phi, s[0], s[1], psi}; }

  static AffineParams from_array(std::span<const double> v) {
    if (v.size() != kCount) throw DataError("affine parameter vector must have 6 entries");
    return {{v[0], v[1]}, v[2], {v[3], v[4]}, v[5]};
  }

  friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

struct AffineBounds {
  double t_max = 0.5;
  double phi_max = kPi / 4.0;
  double s_max = 0.69314718055994530942;  // ln 2
  double psi_max = kPi / 8.0;

  std::array<double, AffineParams::kCount> per_component() const {
    return {t_max, t_max, phi_max, s_max, s_max, psi_max};
  }

  bool contains(const AffineParams& p) const {
    const auto b = per_component();
    const auto v = p.to_array();
    for (int i = 0; i < AffineParams::kCount; ++i) {
      if (!(std::abs(v[i]) <= b[i])) return false;
    }
    return true;
  }

  /// True when every component bound is <= the matching bound of `limit`.
  bool within(const AffineBounds& limit) const {
    return t_max <= limit.t_max && phi_max <= limit.phi_max && s_max <= limit.s_max &&
           psi_max <= limit.psi_max && t_max >= 0 && phi_max >= 0 && s_max >= 0 && psi_max >= 0;
  }

  friend bool operator==(const AffineBounds&, const AffineBounds&) = default;
};

namespace detail {

/// b * tanh(x / b), kept strictly inside (-b, b) even where tanh rounds to 1.
inline double soft_bound(double x, double b) {
  if (b <= 0.0) return 0.0;
  double y = b * std::tanh(x / b);
  if (std::abs(y) >= b) y = std::copysign(std::nextafter(b, 0.0), y);
  return y;
}

inline double soft_bound_derivative(double x, double b) {
  if (b <= 0.0) return 0.0;
  const double th = std::tanh(x / b);
  return 1.0 - th * th;
}

}  // namespace detail

/// Maps an unbounded raw vector (t_x, t_y, phi, s_x, s_y, psi) into the
/// configured parameter box via b * tanh(x / b).
inline AffineParams bound_affine(std::span<const double> raw, const AffineBounds& bounds = {}) {
  if (raw.size() != AffineParams::kCount) throw DataError("raw affine vector must have 6 entries");
  if (!all_finite(raw)) throw NumericError("non-finite raw parameters");
  const auto b = bounds.per_component();
  std::array<double, AffineParams::kCount> out{};
  for (int i = 0; i < AffineParams::kCount; ++i) out[i] = detail::soft_bound(raw[i], b[i]);
  return AffineParams::from_array(out);
}

/// Chain rule through bound_affine: returns dL/draw given dL/dparams.
inline std::array<double, AffineParams::kCount> bound_affine_backward(
    std::span<const double> raw, std::span<const double> grad_params, const AffineBounds& bounds = {}) {
  const auto b = bounds.per_component();
  std::array<double, AffineParams::kCount> g{};
  for (int i = 0; i < AffineParams::kCount; ++i) g[i] = grad_params[i] * detail::soft_bound_derivative(raw[i], b[i]);
  return g;
}

namespace detail {

struct AffineFactors {
  Matrix3 translation, rotation, shear_inv, scale, shear;
};

inline AffineFactors affine_factors(const AffineParams& p) {
  AffineFactors f;
  f.translation.setIdentity();
  f.translation(0, 2) = p.t[0];
  f.translation(1, 2) = p.t[1];
  const double c = std::cos(p.phi), s = std::sin(p.phi);
  f.rotation << c, -s, 0, s, c, 0, 0, 0, 1;
  const double k = std::tan(p.psi);
  f.shear << 1, k, 0, 0, 1, 0, 0, 0, 1;
  f.shear_inv << 1, -k, 0, 0, 1, 0, 0, 0, 1;
  f.scale.setIdentity();
  f.scale(0, 0) = std::exp(p.s[0]);
  f.scale(1, 1) = std::exp(p.s[1]);
  return f;
}

}  // namespace detail

/// Homogeneous matrix M_t * R_phi * S_psi^-1 * D_s * S_psi with D_s = diag(exp(s)).
inline Matrix3 affine_matrix(const AffineParams& p) {
  const auto f = detail::affine_factors(p);
  return f.translation * f.rotation * f.shear_inv * f.scale * f.shear;
}

/// dL/dparams given dL/dmatrix (only the top two rows carry gradient).
inline std::array<double, AffineParams::kCount> affine_matrix_backward(const AffineParams& p,
                                                                       const Matrix3& grad) {
  const auto f = detail::affine_factors(p);
  const double c = std::cos(p.phi), s = std::sin(p.phi);
  Matrix3 d_rot;
  d_rot << -s, -c, 0, c, -s, 0, 0, 0, 0;
  const double sec2 = 1.0 + std::tan(p.psi) * std::tan(p.psi);
  Matrix3 d_shear = Matrix3::Zero();
  d_shear(0, 1) = sec2;
  const Matrix3 d_shear_inv = -d_shear;
  Matrix3 d_sx = Matrix3::Zero(), d_sy = Matrix3::Zero();
  d_sx(0, 0) = f.scale(0, 0);
  d_sy(1, 1) = f.scale(1, 1);

  const Matrix3 tail = f.shear_inv * f.scale * f.shear;
  const Matrix3 head = f.translation * f.rotation;
  auto dot = [&](const Matrix3& d) { return (grad.array() * d.array()).sum(); };

  std::array<double, AffineParams::kCount> g{};
  g[0] = grad(0, 2);
  g[1] = grad(1, 2);
  g[2] = dot(f.translation * d_rot * tail);
  g[3] = dot(head * f.shear_inv * d_sx * f.shear);
  g[4] = dot(head * f.shear_inv * d_sy * f.shear);
  g[5] = dot(head * (d_shear_inv * f.scale * f.shear + f.shear_inv * f.scale * d_shear));
  return g;
}

// ---------------------------------------------------------------------------
// Dense fields

inline double pixel_to_normalised(int index, int extent) {
  return -1.0 + (2.0 * index + 1.0) / extent;
}

inline double normalised_to_pixel(double coord, int extent) {
  return ((coord + 1.0) * extent - 1.0) * 0.5;
}

/// Per-pixel (x, y) sampling coordinates in normalised units, interleaved.
struct DisplacementField {
  Shape2 shape;
  std::vector<double> coords;

  DisplacementField() = default;
  explicit DisplacementField(Shape2 s) : shape(s), coords(s.size() * 2, 0.0) {}

  double& x(std::size_t i) { return coords[2 * i]; }
  double& y(std::size_t i) { return coords[2 * i + 1]; }
  double x(std::size_t i) const { return coords[2 * i]; }
  double y(std::size_t i) const { return coords[2 * i + 1]; }

  friend bool operator==(const DisplacementField&, const DisplacementField&) = default;
};

inline DisplacementField identity_field(Shape2 shape) {
  DisplacementField f(shape);
  for (int yy = 0; yy < shape.height; ++yy) {
    for (int xx = 0; xx < shape.width; ++xx) {
      const std::size_t i = static_cast<std::size_t>(yy) * shape.width + xx;
      f.x(i) = pixel_to_normalised(xx, shape.width);
      f.y(i) = pixel_to_normalised(yy, shape.height);
    }
  }
  return f;
}

inline DisplacementField affine_to_field(const Matrix3& m, Shape2 shape) {
  DisplacementField f(shape);
  for (int yy = 0; yy < shape.height; ++yy) {
    const double yn = pixel_to_normalised(yy, shape.height);
    for (int xx = 0; xx < shape.width; ++xx) {
      const double xn = pixel_to_normalised(xx, shape.width);
      const std::size_t i = static_cast<std::size_t>(yy) * shape.width + xx;
      f.x(i) = m(0, 0) * xn + m(0, 1) * yn + m(0, 2);
      f.y(i) = m(1, 0) * xn + m(1, 1) * yn + m(1, 2);
    }
  }
  return f;
}

/// dL/dmatrix for affine_to_field, given dL/dcoords.
inline Matrix3 affine_to_field_backward(const DisplacementField& grad) {
  Matrix3 g = Matrix3::Zero();
  const Shape2 shape = grad.shape;
  for (int yy = 0; yy < shape.height; ++yy) {
    const double yn = pixel_to_normalised(yy, shape.height);
    for (int xx = 0; xx < shape.width; ++xx) {
      const double xn = pixel_to_normalised(xx, shape.width);
      const std::size_t i = static_cast<std::size_t>(yy) * shape.width + xx;
      const double gx = grad.x(i), gy = grad.y(i);
      g(0, 0) += gx * xn;
      g(0, 1) += gx * yn;
      g(0, 2) += gx;
      g(1, 0) += gy * xn;
      g(1, 1) += gy * yn;
      g(1, 2) += gy;
    }
  }
  return g;
}

/// Maps every coordinate of `field` through the affine matrix: A(field(x)).
inline DisplacementField compose_affine(const Matrix3& m, const DisplacementField& field) {
  DisplacementField out(field.shape);
  for (std::size_t i = 0; i < field.shape.size(); ++i) {
    const double x = field.x(i), y = field.y(i);
    out.x(i) = m(0, 0) * x + m(0, 1) * y + m(0, 2);
    out.y(i) = m(1, 0) * x + m(1, 1) * y + m(1, 2);
  }
  return out;
}

/// dL/dfield for compose_affine with a fixed matrix.
inline DisplacementField compose_affine_backward(const Matrix3& m, const DisplacementField& grad) {
  DisplacementField out(grad.shape);
  for (std::size_t i = 0; i < grad.shape.size(); ++i) {
    const double gx = grad.x(i), gy = grad.y(i);
    out.x(i) = m(0, 0) * gx + m(1, 0) * gy;
    out.y(i) = m(0, 1) * gx + m(1, 1) * gy;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cubic B-spline free-form deformation

inline constexpr int kMinControlSpacing = 4;

/// Uniform cubic B-spline basis B_0..B_3 at fractional offset f in [0, 1).
inline std::array<double, 4> cubic_bspline_basis(double f) {
  const double f2 = f * f, f3 = f2 * f;
  const double omf = 1.0 - f;
  return {omf * omf * omf / 6.0, (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0, (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
          f3 / 6.0};
}

/// Control points sit at pixel positions (g - 1) * spacing, g = 0 .. n - 1, so
/// there is one control point of border before the first pixel and the cubic
/// support of the last pixel is covered.
inline int bspline_grid_extent(int image_extent, int spacing) { return (image_extent - 1) / spacing + 4; }

struct BSplineParams {
  std::array<int, 2> spacing{8, 8};  // (y, x), pixels
  int grid_height = 0;
  int grid_width = 0;
  std::vector<double> displacement;  // grid_height x grid_width x (dx, dy), pixels
  Matrix3 prealign = Matrix3::Identity();

  std::size_t control_count() const { return static_cast<std::size_t>(grid_height) * grid_width; }
  double& dx(int gy, int gx) { return displacement[2 * (static_cast<std::size_t>(gy) * grid_width + gx)]; }
  double& dy(int gy, int gx) { return displacement[2 * (static_cast<std::size_t>(gy) * grid_width + gx) + 1]; }

  friend bool operator==(const BSplineParams& a, const BSplineParams& b) {
    return a.spacing == b.spacing && a.grid_height == b.grid_height && a.grid_width == b.grid_width &&
           a.displacement == b.displacement && a.prealign == b.prealign;
  }
};

/// Zero-displacement grid sized for `image`.
inline BSplineParams make_bspline(Shape2 image, std::array<int, 2> spacing) {
  if (spacing[0] < kMinControlSpacing || spacing[1] < kMinControlSpacing) {
    throw DataError("B-spline control spacing must be >= " + std::to_string(kMinControlSpacing) + " pixels");
  }
  BSplineParams p;
  p.spacing = spacing;
  p.grid_height = bspline_grid_extent(image.height, spacing[0]);
  p.grid_width = bspline_grid_extent(image.width, spacing[1]);
  p.displacement.assign(p.control_count() * 2, 0.0);
  return p;
}

inline void check_bspline_consistency(const BSplineParams& p, Shape2 image) {
  if (p.spacing[0] < kMinControlSpacing || p.spacing[1] < kMinControlSpacing) {
    throw DataError("B-spline control spacing must be >= " + std::to_string(kMinControlSpacing) + " pixels");
  }
  if (p.grid_height != bspline_grid_extent(image.height, p.spacing[0]) ||
      p.grid_width != bspline_grid_extent(image.width, p.spacing[1]) ||
      p.displacement.size() != p.control_count() * 2) {
    throw DataError("B-spline grid inconsistent with spacing and target shape " + to_string(image));
  }
}

namespace detail {

struct BSplineStencil {
  int first;  // index of the first of four control points
  std::array<double, 4> weights;
};

inline std::vector<BSplineStencil> bspline_stencils(int extent, int spacing) {
  std::vector<BSplineStencil> out(extent);
  for (int i = 0; i < extent; ++i) {
    const int cell = i / spacing;
    const double f = static_cast<double>(i - cell * spacing) / spacing;
    out[i] = {cell, cubic_bspline_basis(f)};
  }
  return out;
}

}  // namespace detail

/// Identity grid plus the tensor-product cubic B-spline interpolation of the
/// control-point displacements, then mapped through `prealign`.
inline DisplacementField bspline_to_field(const BSplineParams& p, Shape2 shape) {
  check_bspline_consistency(p, shape);
  const auto sy = detail::bspline_stencils(shape.height, p.spacing[0]);
  const auto sx = detail::bspline_stencils(shape.width, p.spacing[1]);
  DisplacementField f(shape);
  for (int yy = 0; yy < shape.height; ++yy) {
    for (int xx = 0; xx < shape.width; ++xx) {
      double dx = 0.0, dy = 0.0;
      for (int m = 0; m < 4; ++m) {
        const std::size_t row = static_cast<std::size_t>(sy[yy].first + m) * p.grid_width;
        for (int n = 0; n < 4; ++n) {
          const double w = sy[yy].weights[m] * sx[xx].weights[n];
          const std::size_t k = 2 * (row + sx[xx].first + n);
          dx += w * p.displacement[k];
          dy += w * p.displacement[k + 1];
        }
      }
      const std::size_t i = static_cast<std::size_t>(yy) * shape.width + xx;
      f.x(i) = pixel_to_normalised(xx, shape.width) + dx * 2.0 / shape.width;
      f.y(i) = pixel_to_normalised(yy, shape.height) + dy * 2.0 / shape.height;
    }
  }
  if (p.prealign != Matrix3::Identity()) return compose_affine(p.prealign, f);
  return f;
}

/// Displacement (pixels) at a continuous pixel position; positions slightly
/// outside the lattice use the polynomial extension of the edge cell.
inline std::array<double, 2> bspline_displacement_at(const BSplineParams& p, double px, double py) {
  auto stencil = [](double pos, int spacing, int extent) {
    const int cell = std::clamp(static_cast<int>(std::floor(pos / spacing)), 0, extent - 4);
    return detail::BSplineStencil{cell, cubic_bspline_basis(pos / spacing - cell)};
  };
  const auto sy = stencil(py, p.spacing[0], p.grid_height);
  const auto sx = stencil(px, p.spacing[1], p.grid_width);
  double dx = 0.0, dy = 0.0;
  for (int m = 0; m < 4; ++m) {
    for (int n = 0; n < 4; ++n) {
      const double w = sy.weights[m] * sx.weights[n];
      const std::size_t k = 2 * (static_cast<std::size_t>(sy.first + m) * p.grid_width + sx.first + n);
      dx += w * p.displacement[k];
      dy += w * p.displacement[k + 1];
    }
  }
  return {dx, dy};
}

/// dL/d(control displacements) for bspline_to_field.
inline std::vector<double> bspline_to_field_backward(const BSplineParams& p, const DisplacementField& grad) {
  const Shape2 shape = grad.shape;
  check_bspline_consistency(p, shape);
  const DisplacementField g =
      p.prealign != Matrix3::Identity() ? compose_affine_backward(p.prealign, grad) : grad;
  const auto sy = detail::bspline_stencils(shape.height, p.spacing[0]);
  const auto sx = detail::bspline_stencils(shape.width, p.spacing[1]);
  std::vector<double> out(p.displacement.size(), 0.0);
  const double kx = 2.0 / shape.width, ky = 2.0 / shape.height;
  for (int yy = 0; yy < shape.height; ++yy) {
    for (int xx = 0; xx < shape.width; ++xx) {
      const std::size_t i = static_cast<std::size_t>(yy) * shape.width + xx;
      const double gx = g.x(i) * kx, gy = g.y(i) * ky;
      for (int m = 0; m < 4; ++m) {
        const std::size_t row = static_cast<std::size_t>(sy[yy].first + m) * p.grid_width;
        for (int n = 0; n < 4; ++n) {
          const double w = sy[yy].weights[m] * sx[xx].weights[n];
          const std::size_t k = 2 * (row + sx[xx].first + n);
          out[k] += w * gx;
          out[k + 1] += w * gy;
        }
      }
    }
  }
  return out;
}

/// Discrete bending energy of the control grid: mean squared second
/// differences (xx, yy and twice the mixed term). Optional regulariser.
inline double bending_energy(const BSplineParams& p, std::vector<double>* grad = nullptr) {
  const int gh = p.grid_height, gw = p.grid_width;
  if (grad) grad->assign(p.displacement.size(), 0.0);
  if (gh < 3 || gw < 3) return 0.0;
  auto at = [&](int y, int x, int c) { return p.displacement[2 * (static_cast<std::size_t>(y) * gw + x) + c]; };
  auto acc = [&](int y, int x, int c, double v) {
    if (grad) (*grad)[2 * (static_cast<std::size_t>(y) * gw + x) + c] += v;
  };
  double energy = 0.0;
  const double norm = 1.0 / (static_cast<double>(gh - 2) * (gw - 2));
  for (int y = 1; y + 1 < gh; ++y) {
    for (int x = 1; x + 1 < gw; ++x) {
      for (int c = 0; c < 2; ++c) {
        const double dxx = at(y, x - 1, c) - 2.0 * at(y, x, c) + at(y, x + 1, c);
        const double dyy = at(y - 1, x, c) - 2.0 * at(y, x, c) + at(y + 1, x, c);
        const double dxy = 0.25 * (at(y + 1, x + 1, c) - at(y + 1, x - 1, c) - at(y - 1, x + 1, c) + at(y - 1, x - 1, c));
        energy += norm * (dxx * dxx + dyy * dyy + 2.0 * dxy * dxy);
        if (grad) {
          const double a = 2.0 * norm * dxx, b = 2.0 * norm * dyy, m = 4.0 * norm * dxy * 0.25;
          acc(y, x - 1, c, a);
          acc(y, x + 1, c, a);
          acc(y, x, c, -2.0 * a);
          acc(y - 1, x, c, b);
          acc(y + 1, x, c, b);
          acc(y, x, c, -2.0 * b);
          acc(y + 1, x + 1, c, m);
          acc(y - 1, x - 1, c, m);
          acc(y + 1, x - 1, c, -m);
          acc(y - 1, x + 1, c, -m);
        }
      }
    }
  }
  return energy;
}

// ---------------------------------------------------------------------------
// Transform parameters of either model

using TransformParams = std::variant<AffineParams, BSplineParams>;

inline TransformModel model_of(const TransformParams& p) {
  return std::holds_alternative<AffineParams>(p) ? TransformModel::affine : TransformModel::bspline;
}

inline DisplacementField to_field(const TransformParams& p, Shape2 shape) {
  if (const auto* a = std::get_if<AffineParams>(&p)) return affine_to_field(affine_matrix(*a), shape);
  return bspline_to_field(std::get<BSplineParams>(p), shape);
}

// ---------------------------------------------------------------------------
// Bilinear sampler

struct ResampleGrad {
  Image image;              // dL/dimg
  DisplacementField field;  // dL/dcoords
};

namespace detail {

struct BilinearTap {
  int x0, y0;
  double fx, fy;
};

inline BilinearTap bilinear_tap(double xn, double yn, Shape2 shape) {
  const double px = normalised_to_pixel(xn, shape.width);
  const double py = normalised_to_pixel(yn, shape.height);
  const double x0 = std::floor(px), y0 = std::floor(py);
  return {static_cast<int>(x0), static_cast<int>(y0), px - x0, py - y0};
}

}  // namespace detail

/// Bilinear interpolation of img at the field coordinates; samples falling
/// outside the image take `padding`.
inline Image resample(const Image& img, const DisplacementField& field, double padding = 0.0) {
  const Shape2 in = img.shape();
  Image out(field.shape);
  out.set_spacing(img.spacing());
  auto value = [&](int y, int x) {
    return (x >= 0 && x < in.width && y >= 0 && y < in.height) ? img(y, x) : padding;
  };
  for (std::size_t i = 0; i < field.shape.size(); ++i) {
    const auto t = detail::bilinear_tap(field.x(i), field.y(i), in);
    const double v00 = value(t.y0, t.x0), v01 = value(t.y0, t.x0 + 1);
    const double v10 = value(t.y0 + 1, t.x0), v11 = value(t.y0 + 1, t.x0 + 1);
    out[i] = (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) + t.fy * ((1 - t.fx) * v10 + t.fx * v11);
  }
  return out;
}

/// Gradients of resample with respect to the image intensities and the field
/// coordinates, given dL/dout.
inline ResampleGrad resample_backward(const Image& img, const DisplacementField& field, const Image& grad_out,
                                      double padding = 0.0, bool need_image_grad = true) {
  const Shape2 in = img.shape();
  ResampleGrad g{need_image_grad ? Image(in) : Image(), DisplacementField(field.shape)};
  auto inside = [&](int y, int x) { return x >= 0 && x < in.width && y >= 0 && y < in.height; };
  auto value = [&](int y, int x) { return inside(y, x) ? img(y, x) : padding; };
  const double sx = 0.5 * in.width, sy = 0.5 * in.height;
  for (std::size_t i = 0; i < field.shape.size(); ++i) {
    const double go = grad_out[i];
    if (go == 0.0) continue;
    const auto t = detail::bilinear_tap(field.x(i), field.y(i), in);
    const double v00 = value(t.y0, t.x0), v01 = value(t.y0, t.x0 + 1);
    const double v10 = value(t.y0 + 1, t.x0), v11 = value(t.y0 + 1, t.x0 + 1);
    const double dfx = (1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
    const double dfy = (1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
    g.field.x(i) = go * dfx * sx;
    g.field.y(i) = go * dfy * sy;
    if (need_image_grad) {
      auto add = [&](int y, int x, double w) {
        if (inside(y, x)) g.image(y, x) += go * w;
      };
      add(t.y0, t.x0, (1 - t.fy) * (1 - t.fx));
      add(t.y0, t.x0 + 1, (1 - t.fy) * t.fx);
      add(t.y0 + 1, t.x0, t.fy * (1 - t.fx));
      add(t.y0 + 1, t.x0 + 1, t.fy * t.fx);
    }
  }
  return g;
}

}  // namespace istn
