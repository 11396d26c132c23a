#pragma once

// Synthetic toy pairs in the spirit of "vessel trees on a white box": a thin
// dark branching structure (the SoI) drawn inside a large bright distractor
// rectangle. Conflict pairs move the two with independent affine transforms,
// plain pairs move the whole scene with one transform.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/LU>

#include "istn/common.hpp"
#include "istn/distance.hpp"
#include "istn/image.hpp"
#include "istn/transform.hpp"

namespace istn {

enum class SoIEncoding { binary_mask, distance_map, centroid_map };

inline std::string to_string(SoIEncoding e) {
  switch (e) {
    case SoIEncoding::binary_mask: return "binary_mask";
    case SoIEncoding::distance_map: return "distance_map";
    case SoIEncoding::centroid_map: return "centroid_map";
  }
  return "?";
}

inline SoIEncoding parse_encoding(const std::string& s) {
  if (s == "binary_mask") return SoIEncoding::binary_mask;
  if (s == "distance_map") return SoIEncoding::distance_map;
  if (s == "centroid_map") return SoIEncoding::centroid_map;
  throw UsageError("unknown SoI encoding '" + s + "'");
}

struct SoIEncodingKind {
  SoIEncoding kind = SoIEncoding::binary_mask;
  double sigma = 1.5;  // pixels, centroid maps only

  friend bool operator==(const SoIEncodingKind&, const SoIEncodingKind&) = default;
};

/// Value range of each encoding, also the 16-bit raster range.
inline RasterRange encoding_range(SoIEncoding e) {
  return e == SoIEncoding::distance_map ? RasterRange{-1.0, 1.0} : RasterRange{0.0, 1.0};
}

/// Landmark position in pixel units (x = column, y = row).
struct Landmark {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Landmark&, const Landmark&) = default;
};

namespace detail {

inline void check_encoding(const SoIEncodingKind& kind) {
  if (kind.kind == SoIEncoding::centroid_map && !(kind.sigma > 0.0)) {
    throw UsageError("centroid_map encoding needs sigma > 0");
  }
}

inline SoIMap centroid_map(std::span<const Landmark> points, Shape2 shape, double sigma) {
  SoIMap out(shape);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int y = 0; y < shape.height; ++y) {
    for (int x = 0; x < shape.width; ++x) {
      double v = 0.0;
      for (const auto& p : points) {
        const double dx = x - p.x, dy = y - p.y;
        v += std::exp(-(dx * dx + dy * dy) * inv);
      }
      out(y, x) = v;
    }
  }
  double peak = 0.0;
  for (double v : out.values()) peak = std::max(peak, v);
  if (peak > 0.0) {
    for (auto& v : out.values()) v /= peak;
  }
  return out;
}

inline SoIMap signed_distance_map(const std::vector<bool>& inside, Shape2 shape) {
  std::vector<bool> outside(inside.size());
  for (std::size_t i = 0; i < inside.size(); ++i) outside[i] = !inside[i];
  const Image d_out = distance_to(inside, shape);
  const Image d_in = distance_to(outside, shape);
  const double diag = std::hypot(shape.height, shape.width);
  SoIMap out(shape);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const double v = inside[i] ? -std::min(d_in[i], diag) : d_out[i];
    out[i] = std::clamp(v / diag, -1.0, 1.0);
  }
  return out;
}

}  // namespace detail

/// Encodes a binary mask. centroid_map places one Gaussian at the mask centroid.
inline SoIMap encode_soi(const Image& mask, const SoIEncodingKind& kind) {
  detail::check_encoding(kind);
  std::vector<bool> inside(mask.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0 && mask[i] != 1.0) throw DataError("SoI mask must be binary");
    inside[i] = mask[i] == 1.0;
    count += inside[i];
  }
  if (count == 0) throw DataError("empty SoI");
  switch (kind.kind) {
    case SoIEncoding::binary_mask: return mask;
    case SoIEncoding::distance_map: return detail::signed_distance_map(inside, mask.shape());
    case SoIEncoding::centroid_map: {
      Landmark c;
      for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
          if (inside[static_cast<std::size_t>(y) * mask.width() + x]) {
            c.x += x;
            c.y += y;
          }
        }
      }
      c.x /= static_cast<double>(count);
      c.y /= static_cast<double>(count);
      return detail::centroid_map(std::span<const Landmark>(&c, 1), mask.shape(), kind.sigma);
    }
  }
  return mask;
}

/// Encodes landmarks. Masks and distance maps use the nearest pixel of each landmark.
inline SoIMap encode_soi(std::span<const Landmark> landmarks, Shape2 shape, const SoIEncodingKind& kind) {
  detail::check_encoding(kind);
  if (landmarks.empty()) throw DataError("empty SoI");
  for (const auto& p : landmarks) {
    if (!(p.x >= -0.5 && p.x <= shape.width - 0.5 && p.y >= -0.5 && p.y <= shape.height - 0.5)) {
      throw DataError("landmark outside the image domain");
    }
  }
  if (kind.kind == SoIEncoding::centroid_map) return detail::centroid_map(landmarks, shape, kind.sigma);
  Image mask(shape);
  for (const auto& p : landmarks) {
    const int x = std::clamp(static_cast<int>(std::lround(p.x)), 0, shape.width - 1);
    const int y = std::clamp(static_cast<int>(std::lround(p.y)), 0, shape.height - 1);
    mask(y, x) = 1.0;
  }
  return encode_soi(mask, kind);
}

// ---------------------------------------------------------------------------
// Scene geometry

struct SynthConfig {
  int image_size = 32;
  AffineBounds soi_bounds{0.15, 0.25, 0.1, 0.08};
  /// Distractor transform bounds relative to soi_bounds (conflict pairs only).
  double distractor_scale = 1.5;
  double stroke_width = 4.5;  // pixels
  int tree_levels = 3;
  double background = 0.0;
  double box_intensity = 1.0;
  double vessel_intensity = 0.6;
  double noise_std = 0.02;
  int supersample = 4;
  SoIEncodingKind encoding;
  /// Random B-spline deformation for plain pairs (max control displacement in
  /// pixels, 0 disables it).
  double deform_max_displacement = 0.0;
  std::array<int, 2> deform_spacing{8, 8};

  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

struct ToySample {
  std::uint64_t seed = 0;
  Image moving;       // M
  Image fixed;        // F
  SoIMap soi_moving;  // S_M (encoded)
  SoIMap soi_fixed;   // S_F (encoded)
  Image mask_moving;  // binary SoI masks for evaluation
  Image mask_fixed;
  AffineParams gt_params;                   // SoI transform: F(x) ~ M(T(x))
  std::optional<BSplineParams> gt_deform;   // plain pairs with deformation (prealign = gt affine)
  std::vector<Landmark> landmarks_moving;   // branch endpoints
  std::vector<Landmark> landmarks_fixed;

  DisplacementField gt_field() const {
    if (gt_deform) return bspline_to_field(*gt_deform, moving.shape());
    return affine_to_field(affine_matrix(gt_params), moving.shape());
  }

  friend bool operator==(const ToySample&, const ToySample&) = default;
};

namespace detail {

struct Segment {
  double x0, y0, x1, y1;
};

struct Scene {
  std::vector<Segment> tree;  // normalised coordinates
  std::vector<std::array<double, 2>> leaves;
  double half_width = 0.0;  // normalised
  double box_x0 = 0, box_x1 = 0, box_y0 = 0, box_y1 = 0;

  bool in_tree(double x, double y) const {
    const double r2 = half_width * half_width;
    for (const auto& s : tree) {
      const double ex = s.x1 - s.x0, ey = s.y1 - s.y0;
      const double len2 = ex * ex + ey * ey;
      double t = len2 > 0 ? ((x - s.x0) * ex + (y - s.y0) * ey) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double dx = x - (s.x0 + t * ex), dy = y - (s.y0 + t * ey);
      if (dx * dx + dy * dy <= r2) return true;
    }
    return false;
  }

  bool in_box(double x, double y) const { return x >= box_x0 && x <= box_x1 && y >= box_y0 && y <= box_y1; }
};

inline Scene make_scene(Rng& rng, const SynthConfig& cfg) {
  Scene sc;
  const double area = rng.uniform(0.4, 0.7) * 4.0;
  const double aspect = rng.uniform(0.8, 1.25);
  const double bw = std::min(1.95, std::sqrt(area * aspect));
  const double bh = std::min(1.95, std::sqrt(area / aspect));
  const double cx = rng.uniform(-(1.0 - bw / 2), 1.0 - bw / 2);
  const double cy = rng.uniform(-(1.0 - bh / 2), 1.0 - bh / 2);
  sc.box_x0 = cx - bw / 2;
  sc.box_x1 = cx + bw / 2;
  sc.box_y0 = cy - bh / 2;
  sc.box_y1 = cy + bh / 2;

  // Tree in box-local coordinates [-1, 1]^2, growing upwards from the bottom.
  std::vector<Segment> local;
  std::vector<std::array<double, 2>> leaves;
  struct Branch {
    double x, y, angle, length;
    int level;
  };
  std::vector<Branch> stack{{rng.uniform(-0.2, 0.2), 0.9, -kPi / 2 + rng.uniform(-0.2, 0.2), rng.uniform(0.5, 0.65), 0}};
  while (!stack.empty()) {
    const Branch b = stack.back();
    stack.pop_back();
    const double ex = b.x + b.length * std::cos(b.angle);
    const double ey = b.y + b.length * std::sin(b.angle);
    local.push_back({b.x, b.y, ex, ey});
    if (b.level + 1 < cfg.tree_levels) {
      for (double side : {-1.0, 1.0}) {
        stack.push_back({ex, ey, b.angle + side * rng.uniform(0.45, 0.85), b.length * rng.uniform(0.75, 0.9),
                         b.level + 1});
      }
    } else {
      leaves.push_back({ex, ey});
    }
  }
  double lo_x = 1e9, hi_x = -1e9, lo_y = 1e9, hi_y = -1e9;
  for (const auto& s : local) {
    lo_x = std::min({lo_x, s.x0, s.x1});
    hi_x = std::max({hi_x, s.x0, s.x1});
    lo_y = std::min({lo_y, s.y0, s.y1});
    hi_y = std::max({hi_y, s.y0, s.y1});
  }
  const double margin = 0.7;
  const double fit = std::min({1.0, 2 * margin / (hi_x - lo_x), 2 * margin / (hi_y - lo_y)});
  const double mx = 0.5 * (lo_x + hi_x), my = 0.5 * (lo_y + hi_y);
  auto to_image = [&](double u, double v) -> std::array<double, 2> {
    return {cx + (u - mx) * fit * bw / 2, cy + (v - my) * fit * bh / 2};
  };
  for (const auto& s : local) {
    const auto a = to_image(s.x0, s.y0);
    const auto b = to_image(s.x1, s.y1);
    sc.tree.push_back({a[0], a[1], b[0], b[1]});
  }
  for (const auto& l : leaves) sc.leaves.push_back(to_image(l[0], l[1]));
  sc.half_width = cfg.stroke_width / cfg.image_size;
  return sc;
}

inline AffineParams random_affine(Rng& rng, const AffineBounds& b) {
  AffineParams p;
  p.t = {rng.uniform(-b.t_max, b.t_max), rng.uniform(-b.t_max, b.t_max)};
  p.phi = rng.uniform(-b.phi_max, b.phi_max);
  p.s = {rng.uniform(-b.s_max, b.s_max), rng.uniform(-b.s_max, b.s_max)};
  p.psi = rng.uniform(-b.psi_max, b.psi_max);
  return p;
}

/// Maps a normalised point of the output grid to scene coordinates.
using PointMap = std::function<std::array<double, 2>(double, double)>;

/// Coverage-thresholded masks for the tree and the box under separate maps.
inline std::pair<Image, Image> rasterise(const Scene& sc, const SynthConfig& cfg, const PointMap& tree_map,
                                         const PointMap& box_map) {
  const int n = cfg.image_size, ss = cfg.supersample;
  Image tree(n, n), box(n, n);
  const double half = 0.5 * ss * ss;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      int hits_tree = 0, hits_box = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double xn = -1.0 + 2.0 * (x + (sx + 0.5) / ss) / n;
          const double yn = -1.0 + 2.0 * (y + (sy + 0.5) / ss) / n;
          const auto pt = tree_map(xn, yn);
          const auto pb = box_map(xn, yn);
          hits_tree += sc.in_tree(pt[0], pt[1]);
          hits_box += sc.in_box(pb[0], pb[1]);
        }
      }
      tree(y, x) = hits_tree >= half ? 1.0 : 0.0;
      box(y, x) = hits_box >= half ? 1.0 : 0.0;
    }
  }
  return {tree, box};
}

inline Image compose_intensities(const Image& tree, const Image& box, const SynthConfig& cfg, Rng& rng) {
  Image img(tree.shape());
  for (std::size_t i = 0; i < img.size(); ++i) {
    double v = tree[i] > 0.5 ? cfg.vessel_intensity : (box[i] > 0.5 ? cfg.box_intensity : cfg.background);
    if (cfg.noise_std > 0.0) v += cfg.noise_std * rng.normal();
    img[i] = std::clamp(v, 0.0, 1.0);
  }
  return snap_to_raster(img, {0.0, 1.0});
}

inline PointMap affine_point_map(const Matrix3& m) {
  return [m](double x, double y) -> std::array<double, 2> {
    return {m(0, 0) * x + m(0, 1) * y + m(0, 2), m(1, 0) * x + m(1, 1) * y + m(1, 2)};
  };
}

inline PointMap identity_point_map() {
  return [](double x, double y) -> std::array<double, 2> { return {x, y}; };
}

inline Landmark to_pixel(double xn, double yn, int n) {
  return {normalised_to_pixel(xn, n), normalised_to_pixel(yn, n)};
}

inline void check_config(const SynthConfig& cfg) {
  if (cfg.image_size < 32) throw UsageError("image_size must be >= 32");
  if (!cfg.soi_bounds.within(AffineBounds{})) throw UsageError("transform bounds exceed the module defaults");
  if (cfg.distractor_scale < 0.0) throw UsageError("distractor_scale must be >= 0");
  if (cfg.supersample < 1) throw UsageError("supersample must be >= 1");
  if (cfg.tree_levels < 1) throw UsageError("tree_levels must be >= 1");
}

inline AffineBounds scaled_bounds(const AffineBounds& b, double k) {
  const AffineBounds lim;
  return {std::min(lim.t_max, b.t_max * k), std::min(lim.phi_max, b.phi_max * k), std::min(lim.s_max, b.s_max * k),
          std::min(lim.psi_max, b.psi_max * k)};
}

// Fixed-image landmark positions: solve map(q) = l by fixed-point iteration
// from the inverse of the affine part.
inline void finish_sample(ToySample& s, const Scene& sc, const SynthConfig& cfg, const Matrix3& soi_matrix,
                          const PointMap& soi_map) {
  const int n = cfg.image_size;
  const Matrix3 inv = soi_matrix.inverse();
  const Eigen::Matrix2d inv_lin = inv.topLeftCorner<2, 2>();
  for (const auto& l : sc.leaves) {
    s.landmarks_moving.push_back(to_pixel(l[0], l[1], n));
    Eigen::Vector3d q = inv * Eigen::Vector3d(l[0], l[1], 1.0);
    for (int it = 0; it < 50; ++it) {
      const auto m = soi_map(q.x(), q.y());
      const Eigen::Vector2d step = inv_lin * Eigen::Vector2d(l[0] - m[0], l[1] - m[1]);
      q.x() += step.x();
      q.y() += step.y();
      if (step.norm() < 1e-12) break;
    }
    s.landmarks_fixed.push_back(to_pixel(q.x(), q.y(), n));
  }
  const RasterRange range = encoding_range(cfg.encoding.kind);
  s.soi_moving = snap_to_raster(encode_soi(s.mask_moving, cfg.encoding), range);
  s.soi_fixed = snap_to_raster(encode_soi(s.mask_fixed, cfg.encoding), range);
  if (cfg.encoding.kind == SoIEncoding::centroid_map) {
    // Landmark maps mark branch endpoints rather than the mask centroid.
    s.soi_moving = snap_to_raster(detail::centroid_map(s.landmarks_moving, s.moving.shape(), cfg.encoding.sigma), range);
    s.soi_fixed = snap_to_raster(detail::centroid_map(s.landmarks_fixed, s.moving.shape(), cfg.encoding.sigma), range);
  }
}

}  // namespace detail

/// Conflict pair: the SoI and the distractor move with independent affines, so
/// the intensity-optimal and SoI-optimal alignments differ.
inline ToySample generate_conflict_pair(std::uint64_t seed, const SynthConfig& cfg) {
  detail::check_config(cfg);
  Rng rng(seed);
  ToySample s;
  s.seed = seed;
  const detail::Scene sc = detail::make_scene(rng, cfg);
  s.gt_params = detail::random_affine(rng, cfg.soi_bounds);
  const AffineParams box_params = detail::random_affine(rng, detail::scaled_bounds(cfg.soi_bounds, cfg.distractor_scale));
  const Matrix3 soi_m = affine_matrix(s.gt_params);
  const Matrix3 box_m = affine_matrix(box_params);

  auto [tree_m, box_mask_m] = detail::rasterise(sc, cfg, detail::identity_point_map(), detail::identity_point_map());
  auto [tree_f, box_mask_f] = detail::rasterise(sc, cfg, detail::affine_point_map(soi_m), detail::affine_point_map(box_m));
  s.mask_moving = tree_m;
  s.mask_fixed = tree_f;
  s.moving = detail::compose_intensities(tree_m, box_mask_m, cfg, rng);
  s.fixed = detail::compose_intensities(tree_f, box_mask_f, cfg, rng);
  detail::finish_sample(s, sc, cfg, soi_m, detail::affine_point_map(soi_m));
  return s;
}

inline ToySample generate_conflict_pair(std::uint64_t seed, int image_size, const AffineBounds& bounds) {
  SynthConfig cfg;
  cfg.image_size = image_size;
  cfg.soi_bounds = bounds;
  return generate_conflict_pair(seed, cfg);
}

/// Plain pair: one transform (optionally followed by a bounded B-spline
/// deformation) moves the whole scene, so intensity and SoI objectives agree.
inline ToySample generate_plain_pair(std::uint64_t seed, const SynthConfig& cfg) {
  detail::check_config(cfg);
  if (cfg.deform_max_displacement < 0.0) throw UsageError("deform_max_displacement must be >= 0");
  Rng rng(seed);
  ToySample s;
  s.seed = seed;
  const detail::Scene sc = detail::make_scene(rng, cfg);
  s.gt_params = detail::random_affine(rng, cfg.soi_bounds);
  const Matrix3 m = affine_matrix(s.gt_params);
  detail::PointMap map = detail::affine_point_map(m);
  if (cfg.deform_max_displacement > 0.0) {
    BSplineParams d = make_bspline({cfg.image_size, cfg.image_size}, cfg.deform_spacing);
    for (auto& v : d.displacement) v = rng.uniform(-cfg.deform_max_displacement, cfg.deform_max_displacement);
    d.prealign = m;
    s.gt_deform = d;
    const int n = cfg.image_size;
    map = [d, m, n](double x, double y) -> std::array<double, 2> {
      const auto disp = bspline_displacement_at(d, normalised_to_pixel(x, n), normalised_to_pixel(y, n));
      const double u = x + disp[0] * 2.0 / n, v = y + disp[1] * 2.0 / n;
      return {m(0, 0) * u + m(0, 1) * v + m(0, 2), m(1, 0) * u + m(1, 1) * v + m(1, 2)};
    };
  }
  auto [tree_m, box_mask_m] = detail::rasterise(sc, cfg, detail::identity_point_map(), detail::identity_point_map());
  auto [tree_f, box_mask_f] = detail::rasterise(sc, cfg, map, map);
  s.mask_moving = tree_m;
  s.mask_fixed = tree_f;
  s.moving = detail::compose_intensities(tree_m, box_mask_m, cfg, rng);
  s.fixed = detail::compose_intensities(tree_f, box_mask_f, cfg, rng);
  detail::finish_sample(s, sc, cfg, m, map);
  return s;
}

inline ToySample generate_plain_pair(std::uint64_t seed, int image_size, const AffineBounds& bounds) {
  SynthConfig cfg;
  cfg.image_size = image_size;
  cfg.soi_bounds = bounds;
  return generate_plain_pair(seed, cfg);
}

enum class PairKind { conflict, plain };

inline std::string to_string(PairKind k) { return k == PairKind::conflict ? "conflict" : "plain"; }

inline PairKind parse_pair_kind(const std::string& s) {
  if (s == "conflict") return PairKind::conflict;
  if (s == "plain") return PairKind::plain;
  throw UsageError("unknown pair kind '" + s + "'");
}

inline ToySample generate_pair(PairKind kind, std::uint64_t seed, const SynthConfig& cfg) {
  return kind == PairKind::conflict ? generate_conflict_pair(seed, cfg) : generate_plain_pair(seed, cfg);
}

}  // namespace istn
