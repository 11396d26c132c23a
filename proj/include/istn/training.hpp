#pragma once

// End-to-end training of one model variant: mini-batch Adam on all trainable
// parameters, best-validation-Dice checkpointing, loss curves and ITN
// representation montages.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "istn/checkpoint.hpp"
#include "istn/dataset.hpp"
#include "istn/eval.hpp"
#include "istn/nn.hpp"
#include "istn/pipeline.hpp"
#include "istn/plot.hpp"

namespace istn {

struct TrainConfig {
  Variant variant = Variant::istn_e;
  TransformModel transform_model = TransformModel::affine;
  int epochs = 60;
  int batch_size = 8;
  double learning_rate = 1e-3;
  TermWeights term_weights;
  std::uint64_t seed = 1;
  std::string dataset_dir;     // root with train/ and val/ splits
  std::string checkpoint_dir;  // empty: keep the model in memory only
  std::string plot_dir;        // curves and montage; defaults to checkpoint_dir
  std::string record_dir;      // TrainRecord JSON; defaults to checkpoint_dir
  AffineBounds affine_bounds;
  BSplineSettings bspline;
  std::string prealign_checkpoint;  // affine model for B-spline runs
  std::optional<SoIEncoding> encoding;  // when set, must match the dataset
  int montage_snapshots = 6;
  unsigned threads = 0;
  bool verbose = false;

  void check() const {
    if (epochs < 1) throw UsageError("epochs must be >= 1");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be > 0");
  }
};

inline Json to_json(const TermWeights& w) {
  return {{"itn_m", w.itn_m},     {"itn_f", w.itn_f}, {"stn_s", w.stn_s},     {"stn_i_m", w.stn_i_m},
          {"stn_i_f", w.stn_i_f}, {"stn_u", w.stn_u}, {"bending", w.bending}};
}

inline TermWeights term_weights_from_json(const Json& j, TermWeights w = {}) {
  w.itn_m = j.value("itn_m", w.itn_m);
  w.itn_f = j.value("itn_f", w.itn_f);
  w.stn_s = j.value("stn_s", w.stn_s);
  w.stn_i_m = j.value("stn_i_m", w.stn_i_m);
  w.stn_i_f = j.value("stn_i_f", w.stn_i_f);
  w.stn_u = j.value("stn_u", w.stn_u);
  w.bending = j.value("bending", w.bending);
  return w;
}

inline Json to_json(const TrainConfig& c) {
  Json j = {{"variant", to_string(c.variant)},
            {"transform_model", to_string(c.transform_model)},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"term_weights", to_json(c.term_weights)},
            {"seed", c.seed},
            {"dataset_dir", c.dataset_dir},
            {"checkpoint_dir", c.checkpoint_dir},
            {"plot_dir", c.plot_dir},
            {"record_dir", c.record_dir},
            {"affine_bounds", to_json(c.affine_bounds)},
            {"bspline", {{"spacing", c.bspline.spacing}, {"max_displacement", c.bspline.max_displacement}}},
            {"prealign_checkpoint", c.prealign_checkpoint},
            {"montage_snapshots", c.montage_snapshots}};
  if (c.encoding) j["encoding"] = to_string(*c.encoding);
  return j;
}

inline TrainConfig train_config_from_json(const Json& j, TrainConfig c = {}) {
  try {
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("transform_model")) c.transform_model = parse_transform_model(j.at("transform_model").get<std::string>());
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("term_weights")) c.term_weights = term_weights_from_json(j.at("term_weights"), c.term_weights);
    c.seed = j.value("seed", c.seed);
    c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.plot_dir = j.value("plot_dir", c.plot_dir);
    c.record_dir = j.value("record_dir", c.record_dir);
    if (j.contains("affine_bounds")) c.affine_bounds = affine_bounds_from_json(j.at("affine_bounds"), c.affine_bounds);
    if (j.contains("bspline")) {
      c.bspline.spacing = j.at("bspline").value("spacing", c.bspline.spacing);
      c.bspline.max_displacement = j.at("bspline").value("max_displacement", c.bspline.max_displacement);
    }
    c.prealign_checkpoint = j.value("prealign_checkpoint", c.prealign_checkpoint);
    if (j.contains("encoding")) c.encoding = parse_encoding(j.at("encoding").get<std::string>());
    c.montage_snapshots = j.value("montage_snapshots", c.montage_snapshots);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad training config: ") + e.what());
  }
  c.check();
  return c;
}

struct EpochRecord {
  LossReport train;       // mean over the epoch's pairs
  double val_dice = 0.0;  // mean SoI Dice of one-pass predictions
  LossReport val;         // mean validation loss
  double val_itn_mse = 0.0;  // mean MSE(M', S_M) over validation pairs
  double seconds = 0.0;
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  int best_epoch = -1;
  double best_val_dice = -1.0;
  double wall_clock = 0.0;
  std::string checkpoint_path;
  std::string montage_path;
  std::string curve_path;
};

inline Json to_json(const LossReport& r) { return {{"total", r.total}, {"components", r.components}}; }

inline Json to_json(const TrainRecord& r) {
  Json epochs = Json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"train", to_json(e.train)},
                      {"val", to_json(e.val)},
                      {"val_dice", e.val_dice},
                      {"val_itn_mse", e.val_itn_mse},
                      {"seconds", e.seconds}});
  }
  return {{"epochs", epochs},
          {"step_losses", r.step_losses},
          {"best_epoch", r.best_epoch},
          {"best_val_dice", r.best_val_dice},
          {"wall_clock", r.wall_clock},
          {"checkpoint", r.checkpoint_path},
          {"montage", r.montage_path},
          {"loss_curve", r.curve_path}};
}

struct TrainOutcome {
  ModelBundle bundle;  // best-validation weights
  TrainRecord record;
};

namespace detail {

inline void accumulate(LossReport& acc, const LossReport& r, double scale) {
  acc.total += scale * r.total;
  for (const auto& [k, v] : r.components) acc.components[k] += scale * v;
}

inline PairSample make_pair_sample(const ToySample& s, Variant v, const Matrix3& pre) {
  PairSample p;
  p.moving = &s.moving;
  p.fixed = &s.fixed;
  if (needs_soi(v)) {
    p.soi_moving = &s.soi_moving;
    p.soi_fixed = &s.soi_fixed;
  }
  p.prealign = pre;
  return p;
}

/// Mean of the first and last `window` entries.
inline std::pair<double, double> smoothed_ends(const std::vector<double>& v, std::size_t window) {
  const std::size_t w = std::min(window, v.size());
  if (w == 0) return {0.0, 0.0};
  const double first = std::accumulate(v.begin(), v.begin() + w, 0.0) / w;
  const double last = std::accumulate(v.end() - w, v.end(), 0.0) / w;
  return {first, last};
}

}  // namespace detail

inline BundleSpec bundle_spec_for(const TrainConfig& c, Shape2 shape) {
  BundleSpec s;
  s.variant = c.variant;
  s.transform_model = c.transform_model;
  s.shape = shape;
  s.affine_bounds = c.affine_bounds;
  s.bspline = c.bspline;
  return s;
}

/// Trains on in-memory splits. `prealign` is required for B-spline models.
inline TrainOutcome train_on(const TrainConfig& cfg, const std::vector<ToySample>& train_set,
                             const std::vector<ToySample>& val_set,
                             std::shared_ptr<const ModelBundle> prealign = nullptr, std::ostream* log = nullptr) {
  cfg.check();
  if (train_set.empty() || val_set.empty()) throw DataError("training needs non-empty train and val splits");
  const Shape2 shape = train_set.front().moving.shape();
  if (cfg.transform_model == TransformModel::bspline && !prealign) {
    throw UsageError("B-spline training needs a pre-alignment model");
  }
  if (prealign && prealign->spec.transform_model != TransformModel::affine) {
    throw UsageError("pre-alignment model must be affine");
  }
  const auto t0 = std::chrono::steady_clock::now();

  ModelBundle bundle = make_bundle(bundle_spec_for(cfg, shape), derive_seed(cfg.seed, 11));
  if (cfg.transform_model == TransformModel::bspline) bundle.prealign = prealign;

  auto prealigns = [&](const std::vector<ToySample>& set) {
    std::vector<Matrix3> out(set.size(), Matrix3::Identity());
    if (bundle.prealign) {
      parallel_for(set.size(), [&](std::size_t i) { out[i] = prealign_matrix(bundle, set[i].moving, set[i].fixed); },
                   cfg.threads);
    }
    return out;
  };
  const auto train_pre = prealigns(train_set);
  const auto val_pre = prealigns(val_set);

  nn::Adam adam_itn(bundle.itn.params().size(), nn::AdamConfig{cfg.learning_rate});
  nn::Adam adam_stn(bundle.stn.params().size(), nn::AdamConfig{cfg.learning_rate});
  Rng rng(derive_seed(cfg.seed, 12));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainOutcome out;
  out.bundle = bundle;
  const bool montage = !bundle.itn.is_identity() && cfg.montage_snapshots > 0;
  std::vector<int> snapshot_epochs;
  for (int k = 0; k < cfg.montage_snapshots; ++k) {
    const int e = cfg.montage_snapshots == 1 ? cfg.epochs : static_cast<int>(std::lround(
        std::pow(static_cast<double>(cfg.epochs), static_cast<double>(k) / (cfg.montage_snapshots - 1))));
    if (snapshot_epochs.empty() || snapshot_epochs.back() != e) snapshot_epochs.push_back(e);
  }
  std::vector<std::pair<int, std::array<Image, 2>>> snapshots;
  if (montage) snapshots.push_back({0, {bundle.itn.forward(val_set[0].moving), bundle.itn.forward(val_set[0].fixed)}});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto e0 = std::chrono::steady_clock::now();
    rng.shuffle(order);
    EpochRecord rec;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::size_t nb = end - start;
      std::vector<Gradients> grads(nb, Gradients::zeros_like(bundle));
      std::vector<LossReport> reports(nb);
      parallel_for(nb, [&](std::size_t i) {
        const std::size_t idx = order[start + i];
        reports[i] = pipeline_loss(bundle, detail::make_pair_sample(train_set[idx], cfg.variant, train_pre[idx]),
                                   cfg.term_weights, &grads[i]);
      }, cfg.threads);
      Gradients total = Gradients::zeros_like(bundle);
      LossReport batch;
      for (std::size_t i = 0; i < nb; ++i) {
        total.add(grads[i]);
        detail::accumulate(batch, reports[i], 1.0 / nb);
        detail::accumulate(rec.train, reports[i], 1.0 / order.size());
      }
      for (auto& g : total.itn) g /= static_cast<double>(nb);
      for (auto& g : total.stn) g /= static_cast<double>(nb);
      if (!all_finite(total.itn) || !all_finite(total.stn)) {
        throw NumericError("non-finite gradient at epoch " + std::to_string(epoch));
      }
      out.record.step_losses.push_back(batch.total);
      if (!total.itn.empty()) adam_itn.step(bundle.itn.params().values(), total.itn);
      adam_stn.step(bundle.stn.params().values(), total.stn);
    }

    std::vector<double> vd(val_set.size()), vi(val_set.size());
    std::vector<LossReport> vl(val_set.size());
    parallel_for(val_set.size(), [&](std::size_t i) {
      const ToySample& s = val_set[i];
      const Prediction p = predict(bundle, s.moving, s.fixed);
      vd[i] = pair_metric(s, p.params).dice;
      vi[i] = mse(p.itn_moving, s.soi_moving);
      vl[i] = pipeline_loss(bundle, detail::make_pair_sample(s, cfg.variant, val_pre[i]), cfg.term_weights);
    }, cfg.threads);
    for (std::size_t i = 0; i < val_set.size(); ++i) {
      rec.val_dice += vd[i] / val_set.size();
      rec.val_itn_mse += vi[i] / val_set.size();
      detail::accumulate(rec.val, vl[i], 1.0 / val_set.size());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - e0).count();
    out.record.epochs.push_back(rec);
    if (rec.val_dice > out.record.best_val_dice) {
      out.record.best_val_dice = rec.val_dice;
      out.record.best_epoch = epoch;
      out.bundle = bundle;
    }
    if (montage && std::find(snapshot_epochs.begin(), snapshot_epochs.end(), epoch) != snapshot_epochs.end()) {
      snapshots.push_back({epoch, {bundle.itn.forward(val_set[0].moving), bundle.itn.forward(val_set[0].fixed)}});
    }
    if (log) {
      *log << to_string(cfg.variant) << " epoch " << epoch << " loss " << rec.train.total << " val_dice "
           << rec.val_dice << " val_itn_mse " << rec.val_itn_mse << " (" << rec.seconds << " s)\n";
    }
  }
  out.record.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!cfg.checkpoint_dir.empty()) {
    const std::filesystem::path ckpt_dir = cfg.checkpoint_dir;
    const std::filesystem::path dir = cfg.plot_dir.empty() ? ckpt_dir : std::filesystem::path(cfg.plot_dir);
    const std::filesystem::path rec_dir = cfg.record_dir.empty() ? ckpt_dir : std::filesystem::path(cfg.record_dir);
    std::filesystem::create_directories(ckpt_dir);
    std::filesystem::create_directories(dir);
    std::filesystem::create_directories(rec_dir);
    const std::string stem = to_string(cfg.variant);
    out.record.checkpoint_path = (ckpt_dir / (stem + ".ckpt")).string();
    save_checkpoint(out.record.checkpoint_path, out.bundle, to_json(cfg));

    std::vector<Series> curves;
    Series total{"train total", {}}, val_total{"val total", {}}, dice{"val Dice", {}};
    std::map<std::string, Series> comps;
    for (const auto& e : out.record.epochs) {
      total.y.push_back(e.train.total);
      val_total.y.push_back(e.val.total);
      dice.y.push_back(e.val_dice);
      for (const auto& [k, v] : e.train.components) {
        comps[k].name = "train " + k;
        comps[k].y.push_back(v);
      }
    }
    curves.push_back(total);
    curves.push_back(val_total);
    if (comps.size() > 1) {
      for (auto& [_, s] : comps) curves.push_back(s);
    }
    out.record.curve_path = (dir / (stem + "_loss.svg")).string();
    write_text_atomic(out.record.curve_path, line_plot_svg(stem + " training", curves, "epoch", "loss", true));
    write_text_atomic(dir / (stem + "_val_dice.svg"), line_plot_svg(stem + " validation", {dice}, "epoch", "Dice"));

    if (montage) {
      // Rows: moving and fixed. Columns: input, SoI target, ITN output per snapshot epoch.
      std::vector<std::vector<Image>> tiles(2);
      const ToySample& s = val_set[0];
      tiles[0] = {s.moving, s.soi_moving};
      tiles[1] = {s.fixed, s.soi_fixed};
      for (const auto& [e, imgs] : snapshots) {
        tiles[0].push_back(imgs[0]);
        tiles[1].push_back(imgs[1]);
      }
      const RasterRange r = encoding_range(SoIEncoding::binary_mask);
      double lo = r.lo, hi = r.hi;
      for (const auto& row : tiles) {
        for (const auto& t : row) {
          for (double v : t.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
        }
      }
      out.record.montage_path = (dir / (stem + "_itn_montage.png")).string();
      write_montage(out.record.montage_path, tiles, lo, hi);
      Json epochs = Json::array();
      for (const auto& [e, _] : snapshots) epochs.push_back(e);
      write_text_atomic(dir / (stem + "_itn_montage.json"),
                        Json{{"columns", "input, SoI target, ITN output after each listed epoch"},
                             {"epochs", epochs},
                             {"rows", {"moving", "fixed"}},
                             {"range", {lo, hi}}}
                                .dump(1) + "\n");
    }
    write_text_atomic(rec_dir / (stem + "_record.json"), to_json(out.record).dump(1) + "\n");
  }
  return out;
}

/// Trains from the dataset directory named in the config.
inline TrainOutcome train(const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.check();
  if (cfg.dataset_dir.empty()) throw UsageError("training config needs dataset_dir");
  const Dataset tr = read_dataset(std::filesystem::path(cfg.dataset_dir) / "train");
  const Dataset va = read_dataset(std::filesystem::path(cfg.dataset_dir) / "val");
  if (cfg.encoding && *cfg.encoding != tr.info.config.encoding.kind) {
    throw DataError("dataset SoI encoding is " + to_string(tr.info.config.encoding.kind) + ", config asks for " +
                    to_string(*cfg.encoding));
  }
  std::shared_ptr<const ModelBundle> pre;
  if (!cfg.prealign_checkpoint.empty()) pre = std::make_shared<const ModelBundle>(load_checkpoint(cfg.prealign_checkpoint));
  return train_on(cfg, tr.samples, va.samples, pre, log);
}

}  // namespace istn
