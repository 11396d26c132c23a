// Acceptance run: prints one PASS/FAIL line per criterion, exits non-zero on any FAIL.
// usage: acceptance <work-dir>

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "istn.hpp"

using namespace istn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& label, const Outcome& o, double seconds) {
  std::cout << label << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  (" << std::fixed
            << std::setprecision(1) << seconds << " s)" << std::endl;
}

template <class F>
void criterion(int n, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = f();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report("CRITERION " + std::to_string(n), o, s);
  failures += !o.pass;
}

// extra checks are reported but do not decide the exit code
template <class F>
void check(const std::string& name, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = f();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report("CHECK " + name, o, s);
}

std::string fmt(double v, int p = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(p) << v;
  return os.str();
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); }

// ---------------------------------------------------------------------------

Outcome sampler_gradients() {
  constexpr int N = 16;
  constexpr double h = 1e-4;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0), frac(0.05, 0.95), cell(-1.5, N + 0.5);
  double worst_field = 0.0, worst_image = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Image img(N, N), w(N, N);
    for (std::size_t i = 0; i < img.size(); ++i) {
      img[i] = u(rng);
      w[i] = u(rng) - 0.5;
    }
    // sample points kept away from pixel-grid kinks
    DisplacementField f({N, N});
    for (std::size_t i = 0; i < f.shape.size(); ++i) {
      const double px = std::floor(cell(rng)) + frac(rng), py = std::floor(cell(rng)) + frac(rng);
      f.x(i) = (2.0 * px + 1.0) / N - 1.0;
      f.y(i) = (2.0 * py + 1.0) / N - 1.0;
    }
    auto loss = [&](const Image& im, const DisplacementField& fd) {
      const Image o = resample(im, fd);
      double acc = 0.0;
      for (std::size_t i = 0; i < o.size(); ++i) acc += w[i] * o[i];
      return acc;
    };
    const ResampleGrad g = resample_backward(img, f, w);
    for (std::size_t k = 0; k < f.coords.size(); ++k) {
      DisplacementField a = f, b = f;
      a.coords[k] += h;
      b.coords[k] -= h;
      const double fd = (loss(img, a) - loss(img, b)) / (2 * h);
      worst_field = std::max(worst_field, rel_err(g.field.coords[k], fd));
    }
    for (std::size_t k = 0; k < img.size(); ++k) {
      Image a = img, b = img;
      a[k] += h;
      b[k] -= h;
      const double fd = (loss(a, f) - loss(b, f)) / (2 * h);
      worst_image = std::max(worst_image, rel_err(g.image[k], fd));
    }
  }
  const bool ok = worst_field < 1e-3 && worst_image < 1e-3;
  return {ok, "max rel err field " + fmt(worst_field, 8) + ", image " + fmt(worst_image, 8) + " over 20 instances"};
}

Outcome transform_algebra() {
  const std::array<double, 6> zeros{};
  const Matrix3 m = affine_matrix(bound_affine(zeros));
  const double id_err = (m - Matrix3::Identity()).cwiseAbs().maxCoeff();

  double pou_err = 0.0;
  for (int i = 0; i <= 1000; ++i) {
    const auto b = cubic_bspline_basis(i / 1000.0);
    pou_err = std::max(pou_err, std::abs(b[0] + b[1] + b[2] + b[3] - 1.0));
  }
  // constant control displacement reproduces itself everywhere
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 31.0);
  for (int spacing : {4, 5, 8}) {
    BSplineParams p = make_bspline({32, 32}, {spacing, spacing});
    for (int gy = 0; gy < p.grid_height; ++gy)
      for (int gx = 0; gx < p.grid_width; ++gx) {
        p.dx(gy, gx) = 1.25;
        p.dy(gy, gx) = -0.75;
      }
    for (int k = 0; k < 200; ++k) {
      const auto d = bspline_displacement_at(p, u(rng), u(rng));
      pou_err = std::max({pou_err, std::abs(d[0] - 1.25), std::abs(d[1] + 0.75)});
    }
  }

  const AffineBounds bounds;
  const auto lim = bounds.per_component();
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> e(-6.0, 6.0);
  int outside = 0;
  for (int k = 0; k < 1000; ++k) {
    std::array<double, 6> raw;
    for (auto& r : raw) r = n(rng) * std::pow(10.0, e(rng));
    const auto v = bound_affine(raw, bounds).to_array();
    for (int i = 0; i < 6; ++i) outside += !(std::abs(v[i]) < lim[i]);
  }
  const bool ok = id_err <= 1e-12 && pou_err <= 1e-6 && outside == 0;
  return {ok, "identity err " + fmt(id_err, 16) + ", partition-of-unity err " + fmt(pou_err, 12) + ", " +
                  std::to_string(outside) + " of 6000 bounded components outside"};
}

double mse_loop(const Image& a, const Image& b) {
  double s = 0.0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) s += (a(y, x) - b(y, x)) * (a(y, x) - b(y, x));
  return s / (a.height() * a.width());
}

Outcome loss_wiring() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto rnd = [&] {
    Image m(24, 24);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = u(rng);
    return m;
  };
  double sum_err = 0.0;
  for (int k = 0; k < 50; ++k) {
    const Image a = rnd(), b = rnd(), c = rnd(), d = rnd(), e = rnd();
    const auto ex = loss_istn_explicit(a, b, c, d, e);
    sum_err = std::max(sum_err, std::abs(ex.total - (mse_loop(a, c) + mse_loop(b, d) + mse_loop(e, d))));
    const auto im = loss_istn_implicit(a, b, c, d);
    sum_err = std::max(sum_err, std::abs(im.total - (mse_loop(a, d) + mse_loop(c, b) + mse_loop(c, d))));
  }
  // perfect ITN and perfect alignment: S_F is defined as the warped S_M
  const auto s = generate_conflict_pair(11, SynthConfig{});
  const auto field = s.gt_field();
  const Image soi_mw = resample(s.soi_moving, field);
  const Image soi_f = soi_mw;
  const double e0 = loss_istn_explicit(s.soi_moving, soi_f, s.soi_moving, soi_f, soi_mw).total;
  const double i0 = loss_istn_implicit(resample(s.soi_moving, field), soi_f, soi_mw, soi_f).total;
  const bool ok = sum_err <= 1e-6 && e0 == 0.0 && i0 == 0.0;
  return {ok, "max |total - summed terms| " + fmt(sum_err, 12) + ", perfect explicit " + fmt(e0, 12) +
                  ", perfect implicit " + fmt(i0, 12)};
}

// ---------------------------------------------------------------------------

double dice_of(const SuiteResult& r, const std::string& m, const std::string& phase) {
  return r.row(m, phase).dice_mean;
}

const ModelBundle& model_for(const ExperimentResult& r, Variant v) {
  for (const auto& m : r.models)
    if (m.spec.variant == v) return m;
  throw DataError("no model for " + to_string(v));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: acceptance <work-dir>\n";
    return 2;
  }
  const fs::path work = argv[1];
  fs::remove_all(work);
  fs::create_directories(work);
  std::cout << "istn " << ISTN_VERSION << " acceptance, work dir " << work << std::endl;

  criterion(1, sampler_gradients);
  criterion(2, transform_algebra);
  criterion(3, loss_wiring);

  // shared experiment run for 4-8
  constexpr std::uint64_t kConflictSeed = 1000, kPlainSeed = 5000;
  const fs::path conflict = work / "data" / "conflict", plain = work / "data" / "plain";
  ExperimentConfig cfg = experiment_config_from_json(read_json(ISTN_EXPERIMENT_CONFIG));
  cfg.conflict_data = conflict.string();
  cfg.plain_data = plain.string();
  cfg.max_test_pairs = 0;

  Json conflict_manifest, plain_manifest;
  ExperimentResult res;
  double experiment_seconds = 0.0;
  std::string setup_error;
  try {
    const auto t0 = std::chrono::steady_clock::now();
    conflict_manifest = generate_splits(conflict, PairKind::conflict, SynthConfig{}, kConflictSeed, SplitSizes{});
    plain_manifest = generate_splits(plain, PairKind::plain, SynthConfig{}, kPlainSeed, SplitSizes{});
    res = run_experiment(cfg, work / "results", {"acceptance"});
    experiment_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "experiment: " << cfg.train.epochs << " epochs, " << res.conflict.seeds.size()
              << " conflict test pairs, " << res.plain.seeds.size() << " plain test pairs, " << fmt(experiment_seconds, 1)
              << " s\nconflict test\n"
              << table_text(res.conflict.rows) << "plain test\n"
              << table_text(res.plain.rows) << std::flush;
  } catch (const std::exception& e) {
    setup_error = e.what();
    std::cout << "experiment failed: " << setup_error << std::endl;
  }
  auto need_run = [&] {
    if (!setup_error.empty()) throw DataError("experiment did not run: " + setup_error);
  };

  criterion(4, [&]() -> Outcome {
    need_run();
    const double u = dice_of(res.conflict, "STN-u", "after");
    const double e = dice_of(res.conflict, "ISTN-e", "after"), i = dice_of(res.conflict, "ISTN-i", "after");
    const bool sized = res.conflict.seeds.size() == 100;
    const bool ok = sized && e >= u + 0.10 && i >= u + 0.10 && experiment_seconds < 1800;
    return {ok, "conflict after refine: ISTN-e " + fmt(e) + ", ISTN-i " + fmt(i) + ", STN-u " + fmt(u) +
                    " (need ISTN >= STN-u + 0.10); run " + fmt(experiment_seconds, 0) + " s"};
  });

  criterion(5, [&]() -> Outcome {
    need_run();
    bool ok = true;
    std::string d = "plain after-before:";
    for (auto v : kAllVariants) {
      const std::string n = to_string(v);
      const double gap = dice_of(res.plain, n, "after") - dice_of(res.plain, n, "before");
      ok = ok && gap >= 0.0 && (!uses_itn(v) || gap >= 0.03);
      d += " " + n + " " + fmt(gap);
    }
    return {ok, d};
  });

  criterion(6, [&]() -> Outcome {
    need_run();
    bool ok = true;
    double worst = 1e9;
    for (const SuiteResult* r : {&res.conflict, &res.plain}) {
      const double oracle = dice_of(*r, kSoiOracleRow, "after");
      for (const auto& row : r->rows) {
        if (row.method != kSoiOracleRow) worst = std::min(worst, oracle - row.dice_mean);
        ok = ok && oracle >= row.dice_mean - 0.02;
      }
    }
    return {ok, "min (SoI-oracle - method) over both sets and phases " + fmt(worst)};
  });

  criterion(7, [&]() -> Outcome {
    need_run();
    const double u = dice_of(res.conflict, "STN-u", "after"), s = dice_of(res.conflict, "STN-s", "after");
    const double o = dice_of(res.conflict, kIntensityOracleRow, "after");
    const bool ok = std::abs(u - s) < 0.05 && std::abs(u - o) < 0.05 && std::abs(s - o) < 0.05;
    return {ok, "conflict after refine: STN-u " + fmt(u) + ", STN-s " + fmt(s) + ", intensity oracle " + fmt(o)};
  });

  criterion(8, [&]() -> Outcome {
    need_run();
    const ModelBundle m = load_checkpoint(work / "results" / "checkpoints" / "ISTN-e.ckpt");
    const Dataset val = read_dataset(conflict / "val");
    double acc = 0.0;
    for (const auto& s : val.samples) acc += mse(predict(m, s.moving, s.fixed).itn_moving, s.soi_moving);
    acc /= val.samples.size();
    std::string montage;
    for (const auto& r : res.records)
      if (r.checkpoint_path.find("ISTN-e") != std::string::npos) montage = r.montage_path;
    const bool ok = val.info.config.encoding.kind == SoIEncoding::binary_mask && acc < 0.01 && !montage.empty() &&
                    fs::exists(montage) && fs::file_size(montage) > 0;
    return {ok, "ISTN-e validation MSE(M', S_M) " + fmt(acc, 5) + ", montage " + (montage.empty() ? "-" : montage)};
  });

  criterion(9, [&]() -> Outcome {
    need_run();
    const Json c2 = generate_splits(work / "regen" / "conflict", PairKind::conflict, SynthConfig{}, kConflictSeed, {});
    const Json p2 = generate_splits(work / "regen" / "plain", PairKind::plain, SynthConfig{}, kPlainSeed, {});
    const bool data_ok = c2.at("content_hash") == conflict_manifest.at("content_hash") &&
                         p2.at("content_hash") == plain_manifest.at("content_hash");
    fs::remove_all(work / "regen");

    const Dataset test = read_dataset(conflict / "test");
    bool ckpt_ok = true;
    for (auto v : kAllVariants) {
      const ModelBundle& m = model_for(res, v);
      const ModelBundle back = load_checkpoint(work / "results" / "checkpoints" / (to_string(v) + ".ckpt"));
      for (std::size_t i = 0; i < 20; ++i) {
        const auto& s = test.samples[i];
        const auto a = predict(m, s.moving, s.fixed), b = predict(back, s.moving, s.fixed);
        ckpt_ok = ckpt_ok && a.params == b.params && a.itn_moving == b.itn_moving && a.itn_fixed == b.itn_fixed;
      }
    }

    const auto [rerun, cmp] = rerun_from_manifest(work / "results" / "manifest.json", work / "rerun");
    const bool ok = data_ok && ckpt_ok && cmp.within(0.01);
    return {ok, std::string("dataset hashes ") + (data_ok ? "identical" : "DIFFER") + ", checkpoint predict " +
                    (ckpt_ok ? "bit-identical" : "DIFFERS") + ", rerun max |dice diff| " +
                    fmt(cmp.max_abs_dice_diff, 6)};
  });

  if (setup_error.empty()) {
    check("training-loss-decreases", [&]() -> Outcome {
      bool ok = true;
      std::string d;
      for (std::size_t k = 0; k < res.records.size(); ++k) {
        std::vector<double> t;
        for (const auto& e : res.records[k].epochs) t.push_back(e.train.total);
        const auto [first, last] = detail::smoothed_ends(t, 10);
        ok = ok && last < first;
        d += to_string(res.models[k].spec.variant) + " " + fmt(first) + "->" + fmt(last) + " ";
      }
      return {ok, d};
    });

    check("identical-pair-is-noop", [&]() -> Outcome {
      const ModelBundle& m = model_for(res, Variant::istn_e);
      const Dataset test = read_dataset(conflict / "test");
      double worst = 1.0;
      for (std::size_t i = 0; i < 10; ++i) {
        const auto& s = test.samples[i];
        const auto r = refine(m, s.moving, s.moving, cfg.refine);
        worst = std::min(worst, dice(warp_mask(s.mask_moving, r.params), s.mask_moving));
      }
      return {worst >= 0.95, "min Dice(warped S_M, S_M) after refining M onto itself " + fmt(worst)};
    });

    check("external-refine-agrees", [&]() -> Outcome {
      const ModelBundle& m = model_for(res, Variant::istn_e);
      const Dataset test = read_dataset(conflict / "test");
      double a = 0.0, b = 0.0;
      const int n = 20;
      for (int i = 0; i < n; ++i) {
        const auto& s = test.samples[i];
        a += pair_metric(s, refine(m, s.moving, s.fixed, cfg.refine).params).dice / n;
        b += pair_metric(s, refine_external(m, s.moving, s.fixed, cfg.external).params).dice / n;
      }
      return {std::abs(a - b) <= 0.05, "ISTN-e Dice refine " + fmt(a) + ", external optimiser " + fmt(b)};
    });

    check("stn-u-learns-plain-pairs", [&]() -> Outcome {
      TrainConfig tc = cfg.train;
      tc.variant = Variant::stn_u;
      const Dataset tr = read_dataset(plain / "train"), va = read_dataset(plain / "val"), te = read_dataset(plain / "test");
      const auto o = train_on(tc, tr.samples, va.samples);
      double id = 0.0, pred = 0.0;
      for (const auto& s : te.samples) {
        id += pair_metric(s, AffineParams{}).dice / te.samples.size();
        pred += pair_metric(s, predict(o.bundle, s.moving, s.fixed).params).dice / te.samples.size();
      }
      return {pred >= id + 0.15, "plain test one-pass Dice " + fmt(pred) + " vs identity " + fmt(id)};
    });
  }

  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : std::to_string(failures) + " CRITERIA FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
