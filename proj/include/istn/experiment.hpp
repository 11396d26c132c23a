#pragma once

// The four-way comparison: train STN-u, STN-s, ISTN-e and ISTN-i on the
// conflict training split, evaluate one-pass and refined predictions on the
// conflict and plain test splits, write tables, plots, checkpoints and a
// manifest that is sufficient to rerun the whole experiment.
//
// Results directory:
//   manifest.json
//   tables/       metric tables (json, csv, txt) and training records
//   plots/        comparison bars, loss curves, ITN montages
//   checkpoints/  one .ckpt per variant

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "istn/checkpoint.hpp"
#include "istn/dataset.hpp"
#include "istn/eval.hpp"
#include "istn/hash.hpp"
#include "istn/refine.hpp"
#include "istn/training.hpp"

namespace istn {

struct ExperimentConfig {
  std::string conflict_data;  // dataset root (train/val/test)
  std::string plain_data;     // dataset root; only its test split is used
  std::vector<Variant> variants{kAllVariants.begin(), kAllVariants.end()};
  TrainConfig train;          // variant, dataset_dir and output dirs are set per run
  RefineConfig refine;
  ExternalConfig external;
  int max_test_pairs = 0;     // 0: whole test split
};

inline Json to_json(const RefineConfig& r) {
  return {{"max_iters", r.max_iters},           {"learning_rate", r.learning_rate}, {"convergence_tol", r.convergence_tol},
          {"window", r.window},                 {"log_every", r.log_every},         {"bending_weight", r.bending_weight}};
}

inline RefineConfig refine_config_from_json(const Json& j, RefineConfig r = {}) {
  r.max_iters = j.value("max_iters", r.max_iters);
  r.learning_rate = j.value("learning_rate", r.learning_rate);
  r.convergence_tol = j.value("convergence_tol", r.convergence_tol);
  r.window = j.value("window", r.window);
  r.log_every = j.value("log_every", r.log_every);
  r.bending_weight = j.value("bending_weight", r.bending_weight);
  r.check();
  return r;
}

inline Json to_json(const ExternalConfig& e) {
  return {{"iters", e.iters},
          {"learning_rate", e.learning_rate},
          {"random_restarts", e.random_restarts},
          {"restart_fraction", e.restart_fraction},
          {"translation_grid", e.translation_grid},
          {"convergence_tol", e.convergence_tol},
          {"seed", e.seed}};
}

inline ExternalConfig external_config_from_json(const Json& j, ExternalConfig e = {}) {
  e.iters = j.value("iters", e.iters);
  e.learning_rate = j.value("learning_rate", e.learning_rate);
  e.random_restarts = j.value("random_restarts", e.random_restarts);
  e.restart_fraction = j.value("restart_fraction", e.restart_fraction);
  e.translation_grid = j.value("translation_grid", e.translation_grid);
  e.convergence_tol = j.value("convergence_tol", e.convergence_tol);
  e.seed = j.value("seed", e.seed);
  return e;
}

inline Json to_json(const ExperimentConfig& c) {
  Json variants = Json::array();
  for (auto v : c.variants) variants.push_back(to_string(v));
  Json train = to_json(c.train);
  for (const char* k : {"variant", "dataset_dir", "checkpoint_dir", "plot_dir", "record_dir"}) train.erase(k);
  return {{"conflict_data", c.conflict_data}, {"plain_data", c.plain_data},   {"variants", variants},
          {"train", train},                   {"refine", to_json(c.refine)}, {"external", to_json(c.external)},
          {"max_test_pairs", c.max_test_pairs}};
}

inline ExperimentConfig experiment_config_from_json(const Json& j, ExperimentConfig c = {}) {
  try {
    c.conflict_data = j.value("conflict_data", c.conflict_data);
    c.plain_data = j.value("plain_data", c.plain_data);
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j.at("variants")) c.variants.push_back(parse_variant(v.get<std::string>()));
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
    if (j.contains("refine")) c.refine = refine_config_from_json(j.at("refine"), c.refine);
    if (j.contains("external")) c.external = external_config_from_json(j.at("external"), c.external);
    c.max_test_pairs = j.value("max_test_pairs", c.max_test_pairs);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad experiment config: ") + e.what());
  }
  if (c.variants.empty()) throw UsageError("experiment needs at least one variant");
  if (c.max_test_pairs < 0) throw UsageError("max_test_pairs must be >= 0");
  return c;
}

struct ExperimentResult {
  SuiteResult conflict;
  SuiteResult plain;
  std::vector<TrainRecord> records;
  std::vector<ModelBundle> models;
  Json manifest;
};

/// Stages the experiment would run, in order.
inline std::vector<std::string> experiment_plan(const ExperimentConfig& c, const std::filesystem::path& out) {
  std::vector<std::string> plan;
  plan.push_back("read dataset " + c.conflict_data + " (train, val, test)");
  if (!c.plain_data.empty()) plan.push_back("read dataset " + c.plain_data + " (test)");
  for (auto v : c.variants) {
    plan.push_back("train " + to_string(v) + " (" + std::to_string(c.train.epochs) + " epochs) -> " +
                   (out / "checkpoints" / (to_string(v) + ".ckpt")).string());
  }
  plan.push_back("evaluate conflict test split before/after refinement (" + std::to_string(c.refine.max_iters) +
                 " iterations) with SoI and intensity oracles");
  if (!c.plain_data.empty()) plan.push_back("evaluate plain test split before/after refinement");
  plan.push_back("write tables, plots and " + (out / "manifest.json").string());
  return plan;
}

namespace detail {

/// Runs one stage; failures keep their error kind and name the stage.
template <class F>
auto stage(const std::string& name, std::ostream* log, F&& fn) -> decltype(fn()) {
  if (log) *log << "[stage] " << name << "\n";
  try {
    return fn();
  } catch (const UsageError& e) {
    throw UsageError("stage '" + name + "': " + e.what());
  } catch (const DataError& e) {
    throw DataError("stage '" + name + "': " + e.what());
  } catch (const NumericError& e) {
    throw NumericError("stage '" + name + "': " + e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    throw DataError("stage '" + name + "': " + e.what());
  }
}

inline Json dataset_fingerprint(const std::filesystem::path& root) {
  const Json m = read_json(root / "manifest.json");
  Json out = {{"root_hash", m.at("content_hash")}};
  for (const char* split : kSplitNames) {
    if (std::filesystem::exists(root / split / "manifest.json")) {
      out[split] = read_dataset_info(root / split).content_hash;
    }
  }
  return out;
}

inline std::vector<ToySample> head(std::vector<ToySample> v, int n) {
  if (n > 0 && static_cast<std::size_t>(n) < v.size()) v.resize(static_cast<std::size_t>(n));
  return v;
}

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                       const std::vector<std::string>& command = {}, std::ostream* log = nullptr) {
  if (cfg.conflict_data.empty()) throw UsageError("experiment config needs conflict_data");
  ExperimentResult res;
  const auto tables = out / "tables", plots = out / "plots", ckpts = out / "checkpoints";

  const Json conflict_fp = detail::stage("hash datasets", log, [&] {
    std::filesystem::create_directories(tables);
    std::filesystem::create_directories(plots);
    std::filesystem::create_directories(ckpts);
    return detail::dataset_fingerprint(cfg.conflict_data);
  });
  const Json plain_fp = cfg.plain_data.empty() ? Json(nullptr) : detail::stage("hash datasets", log, [&] {
    return detail::dataset_fingerprint(cfg.plain_data);
  });
  const auto root = std::filesystem::path(cfg.conflict_data);
  const Dataset train_set = detail::stage("read conflict train", log, [&] { return read_dataset(root / "train"); });
  const Dataset val_set = detail::stage("read conflict val", log, [&] { return read_dataset(root / "val"); });
  const Dataset test_set = detail::stage("read conflict test", log, [&] { return read_dataset(root / "test"); });
  std::optional<Dataset> plain_test;
  if (!cfg.plain_data.empty()) {
    plain_test = detail::stage("read plain test", log, [&] {
      return read_dataset(std::filesystem::path(cfg.plain_data) / "test");
    });
  }

  std::shared_ptr<const ModelBundle> pre;
  if (cfg.train.transform_model == TransformModel::bspline) {
    pre = detail::stage("load pre-alignment model", log, [&] {
      if (cfg.train.prealign_checkpoint.empty()) throw UsageError("B-spline experiments need prealign_checkpoint");
      return std::make_shared<const ModelBundle>(load_checkpoint(cfg.train.prealign_checkpoint));
    });
  }

  Json checkpoints = Json::object();
  for (auto v : cfg.variants) {
    TrainConfig tc = cfg.train;
    tc.variant = v;
    tc.dataset_dir = cfg.conflict_data;
    tc.checkpoint_dir = ckpts.string();
    tc.plot_dir = plots.string();
    tc.record_dir = tables.string();
    auto o = detail::stage("train " + to_string(v), log, [&] {
      return train_on(tc, train_set.samples, val_set.samples, pre, log);
    });
    checkpoints[to_string(v)] = {{"file", "checkpoints/" + to_string(v) + ".ckpt"},
                                 {"sha256", sha256_file(o.record.checkpoint_path)}};
    res.records.push_back(std::move(o.record));
    res.models.push_back(std::move(o.bundle));
  }

  std::vector<SuiteMethod> methods;
  for (const auto& m : res.models) methods.push_back({to_string(m.spec.variant), &m});
  SuiteConfig sc;
  sc.refine = cfg.refine;
  sc.external = cfg.external;
  res.conflict = detail::stage("evaluate conflict test", log, [&] {
    auto r = evaluate_suite(methods, detail::head(test_set.samples, cfg.max_test_pairs), sc);
    write_suite(r, tables, plots, "conflict", "conflict test");
    return r;
  });
  if (log) *log << "conflict test\n" << table_text(res.conflict.rows);
  if (plain_test) {
    res.plain = detail::stage("evaluate plain test", log, [&] {
      auto r = evaluate_suite(methods, detail::head(plain_test->samples, cfg.max_test_pairs), sc);
      write_suite(r, tables, plots, "plain", "plain test");
      return r;
    });
    if (log) *log << "plain test\n" << table_text(res.plain.rows);
  }

  detail::stage("write manifest", log, [&] {
    const Json config = to_json(cfg);
    Sha256 h;
    h.update(config.dump());
    h.update(conflict_fp.dump());
    h.update(plain_fp.dump());
    Json rows_c = Json::array(), rows_p = Json::array();
    for (const auto& r : res.conflict.rows) rows_c.push_back(to_json(r));
    for (const auto& r : res.plain.rows) rows_p.push_back(to_json(r));
    res.manifest = {{"format", "istn-experiment/1"},
                    {"tool_version", ISTN_VERSION},
                    {"config", config},
                    {"datasets", {{"conflict", conflict_fp}, {"plain", plain_fp}}},
                    {"inputs_hash", h.hex()},
                    {"checkpoints", checkpoints},
                    {"commands", command},
                    {"results", {{"conflict", rows_c}, {"plain", rows_p}}}};
    write_text_atomic(out / "manifest.json", res.manifest.dump(2) + "\n");
    return 0;
  });
  return res;
}

struct RerunComparison {
  double max_abs_dice_diff = 0.0;
  std::vector<std::string> differences;  // rows beyond tolerance
  bool within(double tol) const { return max_abs_dice_diff <= tol; }
};

/// Compares dice means of two manifests' result rows.
inline RerunComparison compare_results(const Json& a, const Json& b, double tol = 0.01) {
  RerunComparison c;
  for (const char* set : {"conflict", "plain"}) {
    const auto& ra = a.at("results").at(set);
    const auto& rb = b.at("results").at(set);
    if (ra.size() != rb.size()) {
      c.max_abs_dice_diff = std::numeric_limits<double>::infinity();
      c.differences.push_back(std::string(set) + ": different number of rows");
      continue;
    }
    for (std::size_t i = 0; i < ra.size(); ++i) {
      const MetricRow x = metric_row_from_json(ra[i]), y = metric_row_from_json(rb[i]);
      const double d = (x.method == y.method && x.phase == y.phase) ? std::abs(x.dice_mean - y.dice_mean)
                                                                    : std::numeric_limits<double>::infinity();
      c.max_abs_dice_diff = std::max(c.max_abs_dice_diff, d);
      if (d > tol) c.differences.push_back(std::string(set) + " " + x.method + "/" + x.phase);
    }
  }
  return c;
}

/// Re-runs an experiment from its manifest. Dataset hashes must match.
inline std::pair<ExperimentResult, RerunComparison> rerun_from_manifest(const std::filesystem::path& manifest_path,
                                                                        const std::filesystem::path& out,
                                                                        std::ostream* log = nullptr) {
  const Json m = read_json(manifest_path);
  ExperimentConfig cfg;
  try {
    if (m.at("format").get<std::string>() != "istn-experiment/1") throw DataError("not an experiment manifest");
    cfg = experiment_config_from_json(m.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt experiment manifest: " + std::string(e.what()));
  }
  if (detail::dataset_fingerprint(cfg.conflict_data) != m.at("datasets").at("conflict")) {
    throw DataError("conflict dataset no longer matches the manifest: " + cfg.conflict_data);
  }
  if (!cfg.plain_data.empty() && detail::dataset_fingerprint(cfg.plain_data) != m.at("datasets").at("plain")) {
    throw DataError("plain dataset no longer matches the manifest: " + cfg.plain_data);
  }
  auto res = run_experiment(cfg, out, {"rerun --from-manifest " + manifest_path.string()}, log);
  auto cmp = compare_results(m, res.manifest);
  return {std::move(res), cmp};
}

}  // namespace istn
