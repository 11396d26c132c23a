#pragma once

// Test-time refinement. refine() updates a copy of the STN weights against
// L_STN-r(M'_theta, F') with the ITN frozen; refine_external() optimises the
// raw transformation parameters directly, with restarts.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "istn/common.hpp"
#include "istn/losses.hpp"
#include "istn/networks.hpp"
#include "istn/nn.hpp"
#include "istn/pipeline.hpp"

namespace istn {

struct RefineConfig {
  int max_iters = 500;
  double learning_rate = 1e-3;
  double convergence_tol = 1e-6;  // relative loss change over `window` iterations
  int window = 10;
  int log_every = 0;               // 0: no logging
  double bending_weight = 0.0;

  void check() const {
    if (max_iters < 1) throw UsageError("refine max_iters must be >= 1");
    if (!(convergence_tol >= 0.0)) throw UsageError("refine convergence_tol must be >= 0");
    if (!(learning_rate >= 0.0)) throw UsageError("refine learning_rate must be >= 0");
    if (window < 1) throw UsageError("refine window must be >= 1");
  }
};

struct RefineTrace {
  std::vector<double> losses;  // one per iteration
  TransformParams initial;
  TransformParams final;
  int iterations_run = 0;
  bool converged = false;
  int best_iteration = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::string diagnostic;  // set when refinement stopped on a non-finite loss
};

struct RefineResult {
  TransformParams params;
  RefineTrace trace;
};

namespace detail {

/// Relative change of the loss over the last `window` iterations below tol.
inline bool window_converged(const std::vector<double>& losses, int window, double tol) {
  if (losses.back() == 0.0) return true;
  if (static_cast<int>(losses.size()) <= window) return false;
  const double prev = losses[losses.size() - 1 - window];
  const double cur = losses.back();
  return std::abs(prev - cur) <= tol * std::max(std::abs(prev), std::numeric_limits<double>::min());
}

}  // namespace detail

/// Refines one pair. The bundle is not modified.
inline RefineResult refine(const ModelBundle& bundle, const Image& moving, const Image& fixed, const RefineConfig& cfg,
                           std::ostream* log = nullptr) {
  cfg.check();
  const Prediction pred = predict(bundle, moving, fixed);
  const Matrix3 pre = prealign_matrix(bundle, moving, fixed);
  const Image stn_moving = prealigned(pred.itn_moving, pre);

  Stn stn = bundle.stn;
  nn::Adam adam(stn.params().size(), nn::AdamConfig{cfg.learning_rate});
  std::vector<double> grads(stn.params().size());

  RefineResult out;
  out.trace.initial = pred.params;
  out.params = pred.params;
  for (int it = 0; it < cfg.max_iters; ++it) {
    std::fill(grads.begin(), grads.end(), 0.0);
    RefineEvaluation ev;
    try {
      ev = refine_objective(bundle.spec, stn, pred.itn_moving, stn_moving, pred.itn_fixed, pre, cfg.bending_weight,
                            &grads);
    } catch (const NumericError& e) {
      out.trace.diagnostic = "iteration " + std::to_string(it) + ": " + e.what();
      break;
    }
    if (!std::isfinite(ev.loss) || !all_finite(grads)) {
      out.trace.diagnostic = "iteration " + std::to_string(it) + ": non-finite loss or gradient";
      break;
    }
    out.trace.losses.push_back(ev.loss);
    out.trace.iterations_run = it + 1;
    if (ev.loss < out.trace.best_loss) {
      out.trace.best_loss = ev.loss;
      out.trace.best_iteration = it;
      out.params = ev.params;
    }
    if (log && cfg.log_every > 0 && it % cfg.log_every == 0) *log << "refine iter " << it << " loss " << ev.loss << "\n";
    if (detail::window_converged(out.trace.losses, cfg.window, cfg.convergence_tol)) {
      out.trace.converged = true;
      break;
    }
    adam.step(stn.params().values(), grads);
  }
  if (out.trace.iterations_run == 0) throw NumericError("refinement failed: " + out.trace.diagnostic);
  out.trace.final = out.params;
  return out;
}

// ---------------------------------------------------------------------------
// Direct optimisation of transformation parameters

struct ExternalConfig {
  int iters = 300;
  double learning_rate = 0.02;  // Adam step on raw parameters
  int random_restarts = 8;      // affine only
  double restart_fraction = 0.6;  // random starts cover this fraction of each bound
  bool translation_grid = true;   // extra starts on a 3x3 translation grid
  double convergence_tol = 1e-7;
  std::uint64_t seed = 7;
};

struct ExternalResult {
  TransformParams params;
  double loss = 0.0;
  std::vector<double> raw;
};

namespace detail {

inline double theta_objective(const BundleSpec& spec, std::span<const double> raw, const Image& moving,
                              const Image& fixed, const Matrix3& prealign, std::vector<double>* grad,
                              TransformParams* params_out) {
  TransformParams params = params_from_raw(spec, raw, prealign);
  const DisplacementField field = to_field(params, moving.shape());
  const Image warped = resample(moving, field);
  const double loss = loss_refine(warped, fixed);
  if (grad) {
    const auto rg = resample_backward(moving, field, mse_grad(warped, fixed), 0.0, false);
    *grad = raw_gradient(spec, raw, params, rg.field);
  }
  if (params_out) *params_out = std::move(params);
  return loss;
}

inline std::vector<double> affine_raw_from_params(const AffineParams& p, const AffineBounds& b) {
  const auto v = p.to_array();
  const auto lim = b.per_component();
  std::vector<double> raw(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (lim[i] <= 0.0) continue;
    const double u = std::clamp(v[i] / lim[i], -1.0 + 1e-12, 1.0 - 1e-12);
    raw[i] = lim[i] * std::atanh(u);
  }
  return raw;
}

}  // namespace detail

/// Minimises the MSE between `moving` warped by theta and `fixed` over the raw
/// parameters, from every start in `starts` (and the restarts of `cfg`). The
/// first start is the reference returned when learning_rate is 0.
inline ExternalResult optimise_theta(const BundleSpec& spec, const Image& moving, const Image& fixed,
                                     const Matrix3& prealign, std::vector<std::vector<double>> starts,
                                     const ExternalConfig& cfg) {
  require_same_shape(moving, fixed, "optimise_theta");
  if (!(cfg.learning_rate >= 0.0) || cfg.iters < 0) throw UsageError("invalid external optimiser settings");
  const std::size_t n = static_cast<std::size_t>(raw_parameter_count(spec));
  if (starts.empty()) starts.emplace_back(n, 0.0);
  for (const auto& s : starts) {
    if (s.size() != n) throw DataError("start vector has the wrong length");
  }
  if (cfg.learning_rate == 0.0 || cfg.iters == 0) {
    ExternalResult r;
    r.raw = starts.front();
    r.loss = detail::theta_objective(spec, r.raw, moving, fixed, prealign, nullptr, &r.params);
    return r;
  }
  if (spec.transform_model == TransformModel::affine) {
    const auto lim = spec.affine_bounds.per_component();
    if (cfg.translation_grid) {
      for (double ty : {-1.0, 0.0, 1.0}) {
        for (double tx : {-1.0, 0.0, 1.0}) {
          if (tx == 0.0 && ty == 0.0) continue;
          AffineParams p;
          p.t = {tx * cfg.restart_fraction * lim[0], ty * cfg.restart_fraction * lim[1]};
          starts.push_back(detail::affine_raw_from_params(p, spec.affine_bounds));
        }
      }
    }
    Rng rng(cfg.seed);
    for (int r = 0; r < cfg.random_restarts; ++r) {
      std::array<double, AffineParams::kCount> v{};
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng.uniform(-1.0, 1.0) * cfg.restart_fraction * lim[i];
      starts.push_back(detail::affine_raw_from_params(AffineParams::from_array(v), spec.affine_bounds));
    }
  }

  ExternalResult best;
  best.loss = std::numeric_limits<double>::infinity();
  std::vector<double> grad;
  for (const auto& start : starts) {
    std::vector<double> raw = start;
    nn::Adam adam(n, nn::AdamConfig{cfg.learning_rate});
    std::vector<double> history;
    for (int it = 0; it <= cfg.iters; ++it) {
      TransformParams params;
      double loss;
      try {
        loss = detail::theta_objective(spec, raw, moving, fixed, prealign, &grad, &params);
      } catch (const NumericError&) {
        break;
      }
      if (!std::isfinite(loss) || !all_finite(grad)) break;
      if (loss < best.loss) {
        best.loss = loss;
        best.params = std::move(params);
        best.raw = raw;
      }
      history.push_back(loss);
      if (it == cfg.iters || detail::window_converged(history, 10, cfg.convergence_tol)) break;
      adam.step(raw, grad);
    }
  }
  if (!std::isfinite(best.loss)) throw NumericError("external refinement produced no finite loss");
  return best;
}

/// refine_external: direct parameter optimisation of L_STN-r on the frozen ITN
/// outputs, starting from the one-pass prediction and the identity.
inline ExternalResult refine_external(const ModelBundle& bundle, const Image& moving, const Image& fixed,
                                      const ExternalConfig& cfg = {}) {
  const Prediction pred = predict(bundle, moving, fixed);
  const Matrix3 pre = prealign_matrix(bundle, moving, fixed);
  const auto raw = bundle.stn.forward(prealigned(pred.itn_moving, pre), pred.itn_fixed);
  const std::size_t n = raw.size();
  return optimise_theta(bundle.spec, pred.itn_moving, pred.itn_fixed, pre, {raw, std::vector<double>(n, 0.0)}, cfg);
}

}  // namespace istn
