#pragma once

// Forward and backward passes of the full registration pipeline for one image
// pair: ITN on both images, STN on the variant's input pair, bounded transform,
// dense field, warp and the variant's loss. Shared by training, prediction and
// test-time refinement.

#include <optional>
#include <span>
#include <vector>

#include "istn/losses.hpp"
#include "istn/networks.hpp"
#include "istn/transform.hpp"

namespace istn {

struct Prediction {
  TransformParams params;
  Image itn_moving;  // M'
  Image itn_fixed;   // F'
};

/// Affine matrix predicted by the bundle's frozen pre-alignment model (identity
/// when the bundle has none).
inline Matrix3 prealign_matrix(const ModelBundle& b, const Image& moving, const Image& fixed) {
  if (!b.prealign) return Matrix3::Identity();
  const ModelBundle& pre = *b.prealign;
  const Image mp = pre.itn.forward(moving);
  const Image fp = pre.itn.forward(fixed);
  const auto raw = pre.stn.forward(mp, fp);
  return affine_matrix(std::get<AffineParams>(params_from_raw(pre.spec, raw)));
}

/// STN moving input: M' resampled through the pre-alignment (or M' itself).
inline Image prealigned(const Image& img, const Matrix3& prealign) {
  if (prealign == Matrix3::Identity()) return img;
  return resample(img, affine_to_field(prealign, img.shape()));
}

/// One-pass prediction: single forward pass, bounded parameters, ITN outputs.
inline Prediction predict(const ModelBundle& b, const Image& moving, const Image& fixed) {
  require_same_shape(moving, fixed, "predict");
  if (moving.shape() != b.spec.shape) {
    throw DataError("input " + to_string(moving.shape()) + " does not match model resolution " +
                    to_string(b.spec.shape));
  }
  const Matrix3 pre = prealign_matrix(b, moving, fixed);
  Prediction p;
  p.itn_moving = b.itn.forward(moving);
  p.itn_fixed = b.itn.forward(fixed);
  const auto raw = b.stn.forward(prealigned(p.itn_moving, pre), p.itn_fixed);
  p.params = params_from_raw(b.spec, raw, pre);
  return p;
}

struct PairSample {
  const Image* moving = nullptr;
  const Image* fixed = nullptr;
  const SoIMap* soi_moving = nullptr;
  const SoIMap* soi_fixed = nullptr;
  Matrix3 prealign = Matrix3::Identity();
};

struct Gradients {
  std::vector<double> itn;
  std::vector<double> stn;

  static Gradients zeros_like(const ModelBundle& b) {
    return {std::vector<double>(b.itn.params().size(), 0.0), std::vector<double>(b.stn.params().size(), 0.0)};
  }

  void add(const Gradients& o) {
    for (std::size_t i = 0; i < itn.size(); ++i) itn[i] += o.itn[i];
    for (std::size_t i = 0; i < stn.size(); ++i) stn[i] += o.stn[i];
  }
};

namespace detail {

inline void add_into(Image& acc, const Image& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

inline void add_into(DisplacementField& acc, const DisplacementField& g) {
  for (std::size_t i = 0; i < acc.coords.size(); ++i) acc.coords[i] += g.coords[i];
}

/// Adds weighted bending energy to the report and its raw-parameter gradient.
inline void add_bending(const BundleSpec& spec, const TransformParams& params, std::span<const double> raw,
                        double weight, LossReport& report, std::vector<double>* grad_raw) {
  if (weight <= 0.0) return;
  const auto* bs = std::get_if<BSplineParams>(&params);
  if (!bs) return;
  std::vector<double> g;
  const double e = bending_energy(*bs, grad_raw ? &g : nullptr);
  report.components["bending"] = weight * e;
  report.total += weight * e;
  if (grad_raw) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      (*grad_raw)[i] += weight * g[i] * soft_bound_derivative(raw[i], spec.bspline.max_displacement);
    }
  }
}

}  // namespace detail

/// Computes the variant's training loss for one pair and, when `grads` is
/// given, accumulates dL/d(all trainable parameters) into it.
inline LossReport pipeline_loss(const ModelBundle& b, const PairSample& pair, const TermWeights& w,
                                Gradients* grads = nullptr) {
  const Variant v = b.spec.variant;
  if (needs_soi(v) && (!pair.soi_moving || !pair.soi_fixed)) {
    throw DataError(to_string(v) + " requires SoI maps for training");
  }
  const Image& moving = *pair.moving;
  const Image& fixed = *pair.fixed;

  Itn::Cache itn_cache_m, itn_cache_f;
  const Image mp = b.itn.forward(moving, grads ? &itn_cache_m : nullptr);
  const Image fp = b.itn.forward(fixed, grads ? &itn_cache_f : nullptr);
  const bool has_pre = pair.prealign != Matrix3::Identity();
  const DisplacementField pre_field = has_pre ? affine_to_field(pair.prealign, mp.shape()) : DisplacementField{};
  const Image stn_moving = has_pre ? resample(mp, pre_field) : mp;

  Stn::Cache stn_cache;
  const auto raw = b.stn.forward(stn_moving, fp, grads ? &stn_cache : nullptr);
  const TransformParams params = params_from_raw(b.spec, raw, pair.prealign);
  const DisplacementField field = to_field(params, mp.shape());

  LossReport report;
  DisplacementField grad_field(field.shape);
  Image grad_mp(mp.shape()), grad_fp(fp.shape());

  auto warp_term = [&](const Image& source, const Image& target, double weight, const char* name,
                       bool source_trainable, bool target_trainable) -> Image {
    const Image warped = resample(source, field);
    report.components[name] = weight * mse(warped, target);
    if (grads && weight != 0.0) {
      const Image g = mse_grad(warped, target, weight);
      const auto rg = resample_backward(source, field, g, 0.0, source_trainable);
      detail::add_into(grad_field, rg.field);
      if (source_trainable) detail::add_into(grad_mp, rg.image);
      if (target_trainable) {
        for (std::size_t i = 0; i < g.size(); ++i) grad_fp[i] -= g[i];
      }
    }
    return warped;
  };
  auto direct_term = [&](const Image& output, const Image& target, double weight, const char* name, Image& grad) {
    report.components[name] = weight * mse(output, target);
    if (grads && weight != 0.0) detail::add_into(grad, mse_grad(output, target, weight));
  };

  switch (v) {
    case Variant::stn_u:
      warp_term(mp, fp, w.stn_u, "stn_u", false, false);
      break;
    case Variant::stn_s:
      warp_term(*pair.soi_moving, *pair.soi_fixed, w.stn_s, "stn_s", false, false);
      break;
    case Variant::istn_e:
      direct_term(mp, *pair.soi_moving, w.itn_m, "itn_m", grad_mp);
      direct_term(fp, *pair.soi_fixed, w.itn_f, "itn_f", grad_fp);
      warp_term(*pair.soi_moving, *pair.soi_fixed, w.stn_s, "stn_s", false, false);
      break;
    case Variant::istn_i:
      warp_term(mp, *pair.soi_fixed, w.stn_i_m, "stn_i_m", true, false);
      warp_term(*pair.soi_moving, fp, w.stn_i_f, "stn_i_f", false, true);
      warp_term(*pair.soi_moving, *pair.soi_fixed, w.stn_s, "stn_s", false, false);
      break;
  }
  for (const auto& [_, value] : report.components) report.total += value;

  std::vector<double> grad_raw;
  if (grads) grad_raw = raw_gradient(b.spec, raw, params, grad_field);
  detail::add_bending(b.spec, params, raw, w.bending, report, grads ? &grad_raw : nullptr);
  if (!std::isfinite(report.total)) throw NumericError("non-finite loss");
  if (!grads) return report;

  const bool itn_trainable = !b.itn.is_identity();
  auto input_grads = b.stn.backward(stn_cache, grad_raw, grads->stn, itn_trainable);
  if (itn_trainable) {
    auto& [g_stn_moving, g_stn_fixed] = *input_grads;
    if (has_pre) {
      detail::add_into(grad_mp, resample_backward(mp, pre_field, g_stn_moving).image);
    } else {
      detail::add_into(grad_mp, g_stn_moving);
    }
    detail::add_into(grad_fp, g_stn_fixed);
    b.itn.backward(itn_cache_m, grad_mp, grads->itn);
    b.itn.backward(itn_cache_f, grad_fp, grads->itn);
  }
  return report;
}

/// Refinement objective L_STN-r(M'_theta, F') for fixed ITN outputs; the STN
/// sees (stn_moving, itn_fixed). Accumulates STN gradients when requested.
struct RefineEvaluation {
  double loss = 0.0;
  TransformParams params;
};

inline RefineEvaluation refine_objective(const BundleSpec& spec, const Stn& stn, const Image& itn_moving,
                                         const Image& stn_moving, const Image& itn_fixed, const Matrix3& prealign,
                                         double bending_weight, std::vector<double>* stn_grads) {
  Stn::Cache cache;
  const auto raw = stn.forward(stn_moving, itn_fixed, stn_grads ? &cache : nullptr);
  RefineEvaluation out{0.0, params_from_raw(spec, raw, prealign)};
  const DisplacementField field = to_field(out.params, itn_moving.shape());
  const Image warped = resample(itn_moving, field);
  LossReport report;
  report.total = loss_refine(warped, itn_fixed);
  std::vector<double> grad_raw;
  if (stn_grads) {
    const auto rg = resample_backward(itn_moving, field, mse_grad(warped, itn_fixed), 0.0, false);
    grad_raw = raw_gradient(spec, raw, out.params, rg.field);
  }
  detail::add_bending(spec, out.params, raw, bending_weight, report, stn_grads ? &grad_raw : nullptr);
  out.loss = report.total;
  if (stn_grads && std::isfinite(out.loss)) stn.backward(cache, grad_raw, *stn_grads, false);
  return out;
}

}  // namespace istn
