#pragma once

// Dice and average surface distance, and the method comparison: identity,
// every model before and after refinement, and two oracles (direct parameter
// optimisation on the SoI maps and on the raw intensities).

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "istn/dataset.hpp"
#include "istn/distance.hpp"
#include "istn/plot.hpp"
#include "istn/refine.hpp"

namespace istn {

/// Single binarisation threshold used for every mask comparison.
inline constexpr double kMaskThreshold = 0.5;

inline std::vector<bool> binarise(const Image& m) {
  std::vector<bool> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] >= kMaskThreshold;
  return out;
}

inline double dice(const Image& a, const Image& b) {
  require_same_shape(a, b, "dice");
  std::size_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] >= kMaskThreshold, y = b[i] >= kMaskThreshold;
    inter += x && y;
    sa += x;
    sb += y;
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

/// Mask pixels with at least one 4-neighbour outside the mask (the image
/// exterior counts as outside).
inline std::vector<bool> mask_boundary(const std::vector<bool>& m, Shape2 s) {
  std::vector<bool> out(m.size(), false);
  auto at = [&](int y, int x) {
    return y >= 0 && y < s.height && x >= 0 && x < s.width && m[static_cast<std::size_t>(y) * s.width + x];
  };
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      if (!at(y, x)) continue;
      out[static_cast<std::size_t>(y) * s.width + x] = !at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1);
    }
  }
  return out;
}

/// Symmetric average surface distance in pixels (times `spacing`): the mean
/// over a's boundary of the distance to b's boundary, averaged with the
/// reverse direction.
inline double asd(const Image& a, const Image& b, double spacing = 1.0) {
  require_same_shape(a, b, "asd");
  const auto ma = binarise(a), mb = binarise(b);
  if (std::find(ma.begin(), ma.end(), true) == ma.end() || std::find(mb.begin(), mb.end(), true) == mb.end()) {
    throw DataError("empty mask for ASD");
  }
  const auto ba = mask_boundary(ma, a.shape()), bb = mask_boundary(mb, b.shape());
  const Image da = distance_to(ba, a.shape()), db = distance_to(bb, b.shape());
  auto directed = [](const std::vector<bool>& from, const Image& dist_to_other) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < from.size(); ++i) {
      if (from[i]) {
        sum += dist_to_other[i];
        ++n;
      }
    }
    return sum / static_cast<double>(n);
  };
  return 0.5 * (directed(ba, db) + directed(bb, da)) * spacing;
}

inline Image warp_mask(const Image& mask, const TransformParams& params) {
  const Image w = resample(mask, to_field(params, mask.shape()));
  Image out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] >= kMaskThreshold ? 1.0 : 0.0;
  return out;
}

struct PairMetric {
  double dice = 0.0;
  double asd = 0.0;
  bool asd_defined = true;
};

/// Metrics of the moving SoI mask warped by `params` against the fixed mask.
/// A warp that empties the mask gets the image diagonal as its ASD.
inline PairMetric pair_metric(const ToySample& s, const TransformParams& params, double spacing = 1.0) {
  const Image w = warp_mask(s.mask_moving, params);
  PairMetric m;
  m.dice = dice(w, s.mask_fixed);
  try {
    m.asd = asd(w, s.mask_fixed, spacing);
  } catch (const DataError&) {
    m.asd = std::hypot(w.height(), w.width()) * spacing;
    m.asd_defined = false;
  }
  return m;
}

struct MetricRow {
  std::string method;
  std::string transform_model;
  std::string phase;  // before | after
  double dice_mean = 0.0;
  double dice_std = 0.0;
  double asd_mean = 0.0;
  double asd_std = 0.0;
  int n_pairs = 0;
  int asd_undefined = 0;
};

inline constexpr const char* kIdentityRow = "Id";
inline constexpr const char* kSoiOracleRow = "SoI-oracle";
inline constexpr const char* kIntensityOracleRow = "Intensity-oracle";

struct SuiteMethod {
  std::string name;
  const ModelBundle* bundle = nullptr;
};

struct SuiteConfig {
  RefineConfig refine;
  ExternalConfig external;
  bool soi_oracle = true;
  bool intensity_oracle = true;
  double spacing = 1.0;
  unsigned threads = 0;
};

struct SuiteResult {
  std::vector<MetricRow> rows;
  /// Per-pair metrics keyed by "method/phase", in dataset order.
  std::map<std::string, std::vector<PairMetric>> pairs;
  std::vector<std::uint64_t> seeds;

  const MetricRow& row(const std::string& method, const std::string& phase) const {
    for (const auto& r : rows) {
      if (r.method == method && r.phase == phase) return r;
    }
    throw DataError("no metric row " + method + "/" + phase);
  }
};

inline MetricRow summarise(const std::string& method, const std::string& model, const std::string& phase,
                           const std::vector<PairMetric>& m) {
  MetricRow r{method, model, phase};
  r.n_pairs = static_cast<int>(m.size());
  if (m.empty()) return r;
  double sd = 0, sa = 0;
  for (const auto& p : m) {
    sd += p.dice;
    sa += p.asd;
    r.asd_undefined += !p.asd_defined;
  }
  r.dice_mean = sd / m.size();
  r.asd_mean = sa / m.size();
  double vd = 0, va = 0;
  for (const auto& p : m) {
    vd += (p.dice - r.dice_mean) * (p.dice - r.dice_mean);
    va += (p.asd - r.asd_mean) * (p.asd - r.asd_mean);
  }
  r.dice_std = std::sqrt(vd / m.size());
  r.asd_std = std::sqrt(va / m.size());
  return r;
}

/// Runs every method on every test pair, before and after refinement.
inline SuiteResult evaluate_suite(const std::vector<SuiteMethod>& methods, const std::vector<ToySample>& test,
                                  const SuiteConfig& cfg) {
  if (methods.empty()) throw UsageError("evaluate_suite needs at least one model");
  if (test.empty()) throw DataError("empty test set");
  const BundleSpec& ref = methods.front().bundle->spec;
  for (const auto& m : methods) {
    if (m.bundle->spec.transform_model != ref.transform_model || m.bundle->spec.shape != ref.shape) {
      throw UsageError("all models must share the transformation model and resolution");
    }
  }
  const std::string model_name = to_string(ref.transform_model);
  const std::size_t n = test.size(), k = methods.size();
  std::vector<std::vector<PairMetric>> before(k, std::vector<PairMetric>(n)), after = before;
  std::vector<PairMetric> ident(n), soi(n), inten(n);

  parallel_for(n, [&](std::size_t i) {
    const ToySample& s = test[i];
    ident[i] = pair_metric(s, identity_params(ref), cfg.spacing);
    for (std::size_t j = 0; j < k; ++j) {
      const ModelBundle& b = *methods[j].bundle;
      const Prediction p = predict(b, s.moving, s.fixed);
      before[j][i] = pair_metric(s, p.params, cfg.spacing);
      after[j][i] = pair_metric(s, refine(b, s.moving, s.fixed, cfg.refine).params, cfg.spacing);
    }
    const Matrix3 pre = prealign_matrix(*methods.front().bundle, s.moving, s.fixed);
    const std::size_t np = static_cast<std::size_t>(raw_parameter_count(ref));
    if (cfg.soi_oracle) {
      const auto r = optimise_theta(ref, s.soi_moving, s.soi_fixed, pre, {std::vector<double>(np, 0.0)}, cfg.external);
      soi[i] = pair_metric(s, r.params, cfg.spacing);
    }
    if (cfg.intensity_oracle) {
      const auto r = optimise_theta(ref, s.moving, s.fixed, pre, {std::vector<double>(np, 0.0)}, cfg.external);
      inten[i] = pair_metric(s, r.params, cfg.spacing);
    }
  }, cfg.threads);

  SuiteResult out;
  for (const auto& s : test) out.seeds.push_back(s.seed);
  auto add = [&](const std::string& method, const std::string& phase, std::vector<PairMetric> m) {
    out.rows.push_back(summarise(method, model_name, phase, m));
    out.pairs[method + "/" + phase] = std::move(m);
  };
  add(kIdentityRow, "before", ident);
  for (std::size_t j = 0; j < k; ++j) {
    add(methods[j].name, "before", before[j]);
    add(methods[j].name, "after", after[j]);
  }
  if (cfg.soi_oracle) add(kSoiOracleRow, "after", soi);
  if (cfg.intensity_oracle) add(kIntensityOracleRow, "after", inten);
  return out;
}

// ---------------------------------------------------------------------------
// Output

inline Json to_json(const MetricRow& r) {
  return {{"method", r.method},       {"transform_model", r.transform_model},
          {"phase", r.phase},         {"dice_mean", r.dice_mean},
          {"dice_std", r.dice_std},   {"asd_mean", r.asd_mean},
          {"asd_std", r.asd_std},     {"n_pairs", r.n_pairs},
          {"asd_undefined", r.asd_undefined}};
}

inline MetricRow metric_row_from_json(const Json& j) {
  MetricRow r;
  r.method = j.at("method").get<std::string>();
  r.transform_model = j.at("transform_model").get<std::string>();
  r.phase = j.at("phase").get<std::string>();
  r.dice_mean = j.at("dice_mean").get<double>();
  r.dice_std = j.at("dice_std").get<double>();
  r.asd_mean = j.at("asd_mean").get<double>();
  r.asd_std = j.at("asd_std").get<double>();
  r.n_pairs = j.at("n_pairs").get<int>();
  r.asd_undefined = j.value("asd_undefined", 0);
  return r;
}

inline Json to_json(const SuiteResult& s) {
  Json rows = Json::array();
  for (const auto& r : s.rows) rows.push_back(to_json(r));
  Json pairs = Json::object();
  for (const auto& [key, v] : s.pairs) {
    Json d = Json::array(), a = Json::array();
    for (const auto& p : v) {
      d.push_back(p.dice);
      a.push_back(p.asd);
    }
    pairs[key] = {{"dice", d}, {"asd", a}};
  }
  return {{"rows", rows}, {"seeds", s.seeds}, {"pairs", pairs}};
}

inline std::string table_csv(const std::vector<MetricRow>& rows) {
  std::string out = "method,transform_model,phase,dice_mean,dice_std,asd_mean,asd_std,n_pairs,asd_undefined\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%.6f,%.6f,%.6f,%.6f,%d,%d\n", r.method.c_str(), r.transform_model.c_str(),
                  r.phase.c_str(), r.dice_mean, r.dice_std, r.asd_mean, r.asd_std, r.n_pairs, r.asd_undefined);
    out += buf;
  }
  return out;
}

inline std::string table_text(const std::vector<MetricRow>& rows) {
  std::string out = "method            phase    dice             asd (px)\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-17s %-8s %.3f +- %.3f    %.3f +- %.3f\n", r.method.c_str(), r.phase.c_str(),
                  r.dice_mean, r.dice_std, r.asd_mean, r.asd_std);
    out += buf;
  }
  return out;
}

/// Grouped bars, one group per method, bars for before/after refinement.
inline std::string comparison_svg(const std::string& title, const std::vector<MetricRow>& rows, bool use_asd) {
  std::vector<BarGroup> groups;
  double y_max = use_asd ? 0.0 : 1.0;
  for (const auto& r : rows) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const BarGroup& g) { return g.label == r.method; });
    if (it == groups.end()) {
      groups.push_back({r.method, {NAN, NAN}, {NAN, NAN}});
      it = groups.end() - 1;
    }
    const int slot = r.phase == "after" ? 1 : 0;
    it->values[slot] = use_asd ? r.asd_mean : r.dice_mean;
    it->errors[slot] = use_asd ? r.asd_std : r.dice_std;
    if (use_asd) y_max = std::max(y_max, r.asd_mean + r.asd_std);
  }
  if (use_asd) y_max = std::max(1.0, std::ceil(y_max));
  return bar_chart_svg(title, {"one-pass / none", "refined / optimised"}, groups, use_asd ? "ASD (px)" : "Dice", y_max);
}

inline void write_suite(const SuiteResult& s, const std::filesystem::path& table_dir,
                        const std::filesystem::path& plot_dir, const std::string& stem, const std::string& title) {
  std::filesystem::create_directories(table_dir);
  std::filesystem::create_directories(plot_dir);
  write_text_atomic(table_dir / (stem + ".json"), to_json(s).dump(1) + "\n");
  write_text_atomic(table_dir / (stem + ".csv"), table_csv(s.rows));
  write_text_atomic(table_dir / (stem + ".txt"), table_text(s.rows));
  write_text_atomic(plot_dir / (stem + "_dice.svg"), comparison_svg(title + ": Dice", s.rows, false));
  write_text_atomic(plot_dir / (stem + "_asd.svg"), comparison_svg(title + ": ASD", s.rows, true));
}

}  // namespace istn
