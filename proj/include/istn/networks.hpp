#pragma once

// Image Transformer Network (image -> image of the same size) and Spatial
// Transformer Network (image pair -> raw transformation parameters), plus the
// ModelBundle pairing them with a variant and transformation model.

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "istn/common.hpp"
#include "istn/image.hpp"
#include "istn/nn.hpp"
#include "istn/transform.hpp"

namespace istn {

enum class Variant { stn_u, stn_s, istn_e, istn_i };

inline constexpr std::array<Variant, 4> kAllVariants = {Variant::stn_u, Variant::stn_s, Variant::istn_e,
                                                        Variant::istn_i};

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::stn_u: return "STN-u";
    case Variant::stn_s: return "STN-s";
    case Variant::istn_e: return "ISTN-e";
    case Variant::istn_i: return "ISTN-i";
  }
  return "?";
}

inline Variant parse_variant(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (char& c : s) {
    if (c == '_') c = '-';
  }
  if (s == "stn-u") return Variant::stn_u;
  if (s == "stn-s") return Variant::stn_s;
  if (s == "istn-e") return Variant::istn_e;
  if (s == "istn-i") return Variant::istn_i;
  throw UsageError("unknown variant '" + s + "' (expected STN-u, STN-s, ISTN-e or ISTN-i)");
}

inline bool uses_itn(Variant v) { return v == Variant::istn_e || v == Variant::istn_i; }
inline bool needs_soi(Variant v) { return v != Variant::stn_u; }

// ---------------------------------------------------------------------------
// ITN

struct ItnConfig {
  std::array<int, 3> widths{16, 32, 16};
  bool zero_init_final = true;
};

/// Four 3x3 convolutions with leaky-ReLU between them and an additive identity
/// skip from input to output. A default-constructed Itn is the identity map.
class Itn {
 public:
  struct Cache {
    std::array<nn::ConvCache, 4> conv;
    std::array<nn::FeatureMap, 3> hidden;
  };

  Itn() = default;

  Itn(const ItnConfig& cfg, Shape2 shape, std::uint64_t seed) : shape_(shape), widths_(cfg.widths) {
    const std::array<int, 5> ch = {1, cfg.widths[0], cfg.widths[1], cfg.widths[2], 1};
    for (int l = 0; l < 4; ++l) {
      layers_[l] = nn::Conv2d::create(params_, "itn.conv" + std::to_string(l + 1), ch[l], ch[l + 1], 1);
    }
    Rng rng(seed);
    for (int l = 0; l < 4; ++l) {
      const auto& c = layers_[l];
      if (l == 3 && cfg.zero_init_final) continue;
      nn::init_kaiming(params_.values(), c.weight, c.weight_count(), c.in_channels * 9, rng);
    }
    active_ = true;
    const Image probe(shape);
    if (forward(probe).shape() != shape) throw DataError("ITN output shape differs from its input shape");
  }

  bool is_identity() const { return !active_; }
  Shape2 shape() const { return shape_; }
  const std::array<int, 3>& widths() const { return widths_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  Image forward(const Image& img, Cache* cache = nullptr) const {
    if (!active_) return img;
    if (img.shape() != shape_) {
      throw DataError("ITN input " + to_string(img.shape()) + " does not match build shape " + to_string(shape_));
    }
    Cache local;
    Cache& c = cache ? *cache : local;
    const auto p = params_.values();
    nn::FeatureMap x = nn::FeatureMap::from_image(img);
    for (int l = 0; l < 3; ++l) {
      x = nn::conv2d_forward(layers_[l], p, x, c.conv[l]);
      nn::leaky_relu_inplace(x.data);
      c.hidden[l] = x;
    }
    nn::FeatureMap y = nn::conv2d_forward(layers_[3], p, x, c.conv[3]);
    Image out = y.channel_image(0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += img[i];
    out.set_spacing(img.spacing());
    return out;
  }

  /// Accumulates dL/dparams into `grads` (same layout as params()).
  void backward(const Cache& c, const Image& grad_out, std::span<double> grads) const {
    if (!active_) return;
    const auto p = params_.values();
    nn::FeatureMap g = nn::FeatureMap::from_image(grad_out);
    for (int l = 3; l >= 0; --l) {
      g = nn::conv2d_backward(layers_[l], p, c.conv[l], g, grads, l > 0);
      if (l > 0) nn::leaky_relu_backward_inplace(c.hidden[l - 1].data, g.data);
    }
  }

 private:
  bool active_ = false;
  Shape2 shape_;
  std::array<int, 3> widths_{0, 0, 0};
  nn::ParamSet params_;
  std::array<nn::Conv2d, 4> layers_{};
};

// ---------------------------------------------------------------------------
// STN

struct StnConfig {
  std::array<int, 3> conv_widths{16, 32, 64};
  int hidden = 64;
};

/// Three stride-2 convolutions over the channel stack (a, b), global average
/// pooling and two fully connected layers. The last layer starts at zero so an
/// untrained network predicts the identity transform.
class Stn {
 public:
  struct Cache {
    std::array<nn::ConvCache, 3> conv;
    std::array<nn::FeatureMap, 3> features;
    std::vector<double> pooled;
    std::vector<double> hidden;
  };

  Stn() = default;

  Stn(const StnConfig& cfg, Shape2 shape, int output_count, std::uint64_t seed)
      : shape_(shape), config_(cfg), output_count_(output_count) {
    const std::array<int, 4> ch = {2, cfg.conv_widths[0], cfg.conv_widths[1], cfg.conv_widths[2]};
    for (int l = 0; l < 3; ++l) {
      convs_[l] = nn::Conv2d::create(params_, "stn.conv" + std::to_string(l + 1), ch[l], ch[l + 1], 2);
    }
    fc1_ = nn::Linear::create(params_, "stn.fc1", ch[3], cfg.hidden);
    fc2_ = nn::Linear::create(params_, "stn.fc2", cfg.hidden, output_count);
    Rng rng(seed);
    for (const auto& c : convs_) nn::init_kaiming(params_.values(), c.weight, c.weight_count(), c.in_channels * 9, rng);
    nn::init_kaiming(params_.values(), fc1_.weight, static_cast<std::size_t>(cfg.hidden) * ch[3], ch[3], rng);
  }

  Shape2 shape() const { return shape_; }
  int output_count() const { return output_count_; }
  const StnConfig& config() const { return config_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  std::vector<double> forward(const Image& a, const Image& b, Cache* cache = nullptr) const {
    require_same_shape(a, b, "STN inputs");
    if (a.shape() != shape_) {
      throw DataError("STN input " + to_string(a.shape()) + " does not match build shape " + to_string(shape_));
    }
    Cache local;
    Cache& c = cache ? *cache : local;
    const auto p = params_.values();
    nn::FeatureMap x = nn::FeatureMap::stack(a, b);
    for (int l = 0; l < 3; ++l) {
      x = nn::conv2d_forward(convs_[l], p, x, c.conv[l]);
      nn::leaky_relu_inplace(x.data);
      c.features[l] = x;
    }
    c.pooled = nn::global_average_pool(x);
    c.hidden = nn::linear_forward(fc1_, p, c.pooled);
    nn::leaky_relu_inplace(c.hidden);
    return nn::linear_forward(fc2_, p, c.hidden);
  }

  /// Accumulates parameter gradients; returns dL/da and dL/db when requested.
  std::optional<std::pair<Image, Image>> backward(const Cache& c, std::span<const double> grad_raw,
                                                  std::span<double> grads, bool need_input_grad) const {
    const auto p = params_.values();
    std::vector<double> g = nn::linear_backward(fc2_, p, c.hidden, grad_raw, grads);
    nn::leaky_relu_backward_inplace(c.hidden, g);
    g = nn::linear_backward(fc1_, p, c.pooled, g, grads);
    const auto& last = c.features[2];
    nn::FeatureMap gf = nn::global_average_pool_backward(g, last.channels, last.height, last.width);
    for (int l = 2; l >= 0; --l) {
      nn::leaky_relu_backward_inplace(c.features[l].data, gf.data);
      gf = nn::conv2d_backward(convs_[l], p, c.conv[l], gf, grads, l > 0 || need_input_grad);
    }
    if (!need_input_grad) return std::nullopt;
    return std::make_pair(gf.channel_image(0), gf.channel_image(1));
  }

 private:
  Shape2 shape_;
  StnConfig config_;
  int output_count_ = 0;
  nn::ParamSet params_;
  std::array<nn::Conv2d, 3> convs_{};
  nn::Linear fc1_{}, fc2_{};
};

// ---------------------------------------------------------------------------
// Model bundle

struct BSplineSettings {
  std::array<int, 2> spacing{8, 8};
  double max_displacement = 4.0;  // pixels, tanh bound on control displacements
};

struct BundleSpec {
  Variant variant = Variant::istn_e;
  TransformModel transform_model = TransformModel::affine;
  Shape2 shape{32, 32};
  AffineBounds affine_bounds;
  BSplineSettings bspline;
  ItnConfig itn;
  StnConfig stn;
};

struct ModelBundle {
  BundleSpec spec;
  Itn itn;  // identity for STN-u / STN-s
  Stn stn;
  /// Frozen affine model that pre-aligns pairs for B-spline bundles.
  std::shared_ptr<const ModelBundle> prealign;
};

inline int raw_parameter_count(const BundleSpec& spec) {
  if (spec.transform_model == TransformModel::affine) return AffineParams::kCount;
  const int gh = bspline_grid_extent(spec.shape.height, spec.bspline.spacing[0]);
  const int gw = bspline_grid_extent(spec.shape.width, spec.bspline.spacing[1]);
  return gh * gw * 2;
}

inline void validate(const ModelBundle& b) {
  if (uses_itn(b.spec.variant) && b.itn.is_identity()) {
    throw DataError(to_string(b.spec.variant) + " bundle must carry an ITN");
  }
  if (b.stn.output_count() != raw_parameter_count(b.spec)) {
    throw DataError("STN output length does not match the transformation model");
  }
  if (b.spec.transform_model == TransformModel::bspline) {
    (void)make_bspline(b.spec.shape, b.spec.bspline.spacing);
    if (b.prealign && b.prealign->spec.transform_model != TransformModel::affine) {
      throw DataError("pre-alignment model must be affine");
    }
  }
}

/// Fresh bundle: identity ITN for STN-u/s, zero-initialised STN head.
inline ModelBundle make_bundle(const BundleSpec& spec, std::uint64_t seed) {
  if (spec.shape.height < 8 || spec.shape.width < 8) throw DataError("image shape must be at least 8x8");
  ModelBundle b;
  b.spec = spec;
  if (uses_itn(spec.variant)) b.itn = Itn(spec.itn, spec.shape, derive_seed(seed, 1));
  b.stn = Stn(spec.stn, spec.shape, raw_parameter_count(spec), derive_seed(seed, 2));
  validate(b);
  return b;
}

inline std::vector<double> stn_forward(const ModelBundle& b, const Image& a, const Image& f) {
  return b.stn.forward(a, f);
}

inline Image itn_forward(const ModelBundle& b, const Image& img) { return b.itn.forward(img); }

// ---------------------------------------------------------------------------
// Raw STN output -> transformation parameters

/// Bounds the raw vector and wraps it as transform parameters for the bundle's
/// model. `prealign` is attached to B-spline parameters.
inline TransformParams params_from_raw(const BundleSpec& spec, std::span<const double> raw,
                                       const Matrix3& prealign = Matrix3::Identity()) {
  if (spec.transform_model == TransformModel::affine) return bound_affine(raw, spec.affine_bounds);
  if (!all_finite(raw)) throw NumericError("non-finite raw parameters");
  BSplineParams p = make_bspline(spec.shape, spec.bspline.spacing);
  if (raw.size() != p.displacement.size()) throw DataError("raw B-spline vector has the wrong length");
  for (std::size_t i = 0; i < raw.size(); ++i) {
    p.displacement[i] = detail::soft_bound(raw[i], spec.bspline.max_displacement);
  }
  p.prealign = prealign;
  return p;
}

/// dL/draw given dL/dfield, through field construction and bounding.
inline std::vector<double> raw_gradient(const BundleSpec& spec, std::span<const double> raw,
                                        const TransformParams& params, const DisplacementField& grad_field) {
  if (const auto* a = std::get_if<AffineParams>(&params)) {
    const Matrix3 gm = affine_to_field_backward(grad_field);
    const auto gp = affine_matrix_backward(*a, gm);
    const auto gr = bound_affine_backward(raw, gp, spec.affine_bounds);
    return {gr.begin(), gr.end()};
  }
  const auto& bs = std::get<BSplineParams>(params);
  std::vector<double> g = bspline_to_field_backward(bs, grad_field);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= detail::soft_bound_derivative(raw[i], spec.bspline.max_displacement);
  return g;
}

/// Identity parameters of the bundle's transformation model.
inline TransformParams identity_params(const BundleSpec& spec) {
  if (spec.transform_model == TransformModel::affine) return AffineParams{};
  return make_bspline(spec.shape, spec.bspline.spacing);
}

}  // namespace istn
