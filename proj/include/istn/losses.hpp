#pragma once

// Mean-squared-error losses for every training objective and for test-time
// refinement. All reductions are means over pixels.

#include <map>
#include <string>

#include "istn/common.hpp"
#include "istn/image.hpp"

namespace istn {

struct LossReport {
  double total = 0.0;
  std::map<std::string, double> components;  // weighted contributions; they sum to total
};

/// Per-term weights; the defaults give the unweighted sums.
struct TermWeights {
  double itn_m = 1.0;    // L_ITN(S_M, M')
  double itn_f = 1.0;    // L_ITN(S_F, F')
  double stn_s = 1.0;    // L_STN-s(S_{M;theta}, S_F)
  double stn_i_m = 1.0;  // L^M_STN-i(M'_theta, S_F)
  double stn_i_f = 1.0;  // L^F_STN-i(S_{M;theta}, F')
  double stn_u = 1.0;    // L_STN-u(M_theta, F)
  double bending = 0.0;  // optional B-spline bending energy, off by default

  friend bool operator==(const TermWeights&, const TermWeights&) = default;
};

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  if (a.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// d mse(a, b) / da, scaled by `weight`. The gradient with respect to b is the negation.
inline Image mse_grad(const Image& a, const Image& b, double weight = 1.0) {
  require_same_shape(a, b, "mse");
  Image g(a.shape());
  const double k = 2.0 * weight / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = k * (a[i] - b[i]);
  return g;
}

inline double loss_stn_u(const Image& moving_warped, const Image& fixed) { return mse(moving_warped, fixed); }

inline double loss_stn_s(const SoIMap& soi_moving_warped, const SoIMap& soi_fixed) {
  return mse(soi_moving_warped, soi_fixed);
}

inline double loss_itn(const SoIMap& soi, const Image& itn_output) { return mse(itn_output, soi); }

inline double loss_refine(const Image& itn_moving_warped, const Image& itn_fixed) {
  return mse(itn_moving_warped, itn_fixed);
}

/// L_ISTN-e = L^M_ITN + L^F_ITN + L_STN-s.
inline LossReport loss_istn_explicit(const Image& itn_moving, const Image& itn_fixed, const SoIMap& soi_moving,
                                     const SoIMap& soi_fixed, const SoIMap& soi_moving_warped,
                                     const TermWeights& w = {}) {
  LossReport r;
  r.components["itn_m"] = w.itn_m * loss_itn(soi_moving, itn_moving);
  r.components["itn_f"] = w.itn_f * loss_itn(soi_fixed, itn_fixed);
  r.components["stn_s"] = w.stn_s * loss_stn_s(soi_moving_warped, soi_fixed);
  for (const auto& [_, v] : r.components) r.total += v;
  return r;
}

/// L_ISTN-i = L^M_STN-i(M'_theta, S_F) + L^F_STN-i(S_{M;theta}, F') + L_STN-s.
inline LossReport loss_istn_implicit(const Image& itn_moving_warped, const Image& itn_fixed,
                                     const SoIMap& soi_moving_warped, const SoIMap& soi_fixed,
                                     const TermWeights& w = {}) {
  LossReport r;
  r.components["stn_i_m"] = w.stn_i_m * mse(itn_moving_warped, soi_fixed);
  r.components["stn_i_f"] = w.stn_i_f * mse(soi_moving_warped, itn_fixed);
  r.components["stn_s"] = w.stn_s * loss_stn_s(soi_moving_warped, soi_fixed);
  for (const auto& [_, v] : r.components) r.total += v;
  return r;
}

}  // namespace istn
