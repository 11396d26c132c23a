// istn command-line tool: generate | train | register | evaluate | experiment.
//
// Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure. Errors are
// printed as one line "ERR_<KIND>: message" on stderr.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "istn.hpp"

namespace fs = std::filesystem;
using namespace istn;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  bool force = false;
  bool dry_run = false;
};

Json load_config(const std::string& path) { return path.empty() ? Json::object() : read_json(path); }

/// Output directory must be absent or empty unless --force.
void prepare_out(const Globals& g, const fs::path& dir) {
  if (dir.empty()) throw UsageError("--out is required");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!g.force) throw UsageError("output directory is not empty: " + dir.string() + " (use --force)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void print_plan(const std::vector<std::string>& plan) {
  std::cout << "dry run, planned stages:\n";
  for (std::size_t i = 0; i < plan.size(); ++i) std::cout << "  " << i + 1 << ". " << plan[i] << "\n";
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string kind = "conflict";
  int pairs = -1;  // train and test pairs
  int train = 100, val = 10, test = 100;
};

int cmd_generate(const Globals& g, const GenerateArgs& a) {
  const PairKind kind = parse_pair_kind(a.kind);
  const SynthConfig cfg = synth_config_from_json(load_config(g.config));
  SplitSizes sizes{a.train, a.val, a.test};
  if (a.pairs >= 0) sizes.train = sizes.test = a.pairs;
  if (sizes.train < 1 || sizes.val < 1 || sizes.test < 1) throw UsageError("pair counts must be >= 1");
  const std::uint64_t seed = g.seed.value_or(1000);
  if (g.dry_run) {
    print_plan({"generate " + to_string(kind) + " pairs (" + std::to_string(sizes.train) + "/" +
                    std::to_string(sizes.val) + "/" + std::to_string(sizes.test) + ") with base seed " +
                    std::to_string(seed),
                "write " + (fs::path(g.out) / "{train,val,test}").string() + " and manifest.json"});
    return 0;
  }
  prepare_out(g, g.out);
  const Json m = generate_splits(g.out, kind, cfg, seed, sizes);
  std::cout << "dataset " << g.out << " content_hash " << m.at("content_hash").get<std::string>() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, variant, model;
  int epochs = 0;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  TrainConfig cfg = train_config_from_json(load_config(g.config));
  if (!a.data.empty()) cfg.dataset_dir = a.data;
  if (!a.variant.empty()) cfg.variant = parse_variant(a.variant);
  if (!a.model.empty()) cfg.transform_model = parse_transform_model(a.model);
  if (a.epochs > 0) cfg.epochs = a.epochs;
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.checkpoint_dir = g.out;
  if (cfg.checkpoint_dir.empty()) throw UsageError("--out (or checkpoint_dir in the config) is required");
  cfg.check();
  if (g.dry_run) {
    print_plan({"read " + cfg.dataset_dir + "/{train,val}",
                "train " + to_string(cfg.variant) + " " + to_string(cfg.transform_model) + " for " +
                    std::to_string(cfg.epochs) + " epochs",
                "write " + (fs::path(cfg.checkpoint_dir) / (to_string(cfg.variant) + ".ckpt")).string() +
                    ", training record and plots"});
    return 0;
  }
  const auto o = train(cfg, &std::cerr);
  std::cout << "checkpoint " << o.record.checkpoint_path << " best_epoch " << o.record.best_epoch << " val_dice "
            << o.record.best_val_dice << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct RegisterArgs {
  std::string model, moving, fixed;
  bool refine = false, external = false;
  int iters = 0;
};

int cmd_register(const Globals& g, const RegisterArgs& a) {
  const Json conf = load_config(g.config);
  RefineConfig rc = conf.contains("refine") ? refine_config_from_json(conf.at("refine")) : RefineConfig{};
  ExternalConfig ec = conf.contains("external") ? external_config_from_json(conf.at("external")) : ExternalConfig{};
  if (a.iters > 0) rc.max_iters = ec.iters = a.iters;
  if (g.seed) ec.seed = *g.seed;
  if (g.dry_run) {
    print_plan({"load " + a.model, "predict on " + a.moving + " -> " + a.fixed,
                a.refine ? (a.external ? "refine transformation parameters directly" : "refine STN weights (" +
                                                                                           std::to_string(rc.max_iters) + " iterations)")
                         : "no refinement",
                "write params, warped image and trace to " + g.out});
    return 0;
  }
  const ModelBundle b = load_checkpoint(a.model);
  const Image m = read_raster(a.moving), f = read_raster(a.fixed);
  prepare_out(g, g.out);
  const fs::path out = g.out;
  TransformParams params = predict(b, m, f).params;
  Json trace = {{"refined", a.refine}};
  if (a.refine && a.external) {
    const auto r = refine_external(b, m, f, ec);
    params = r.params;
    trace["method"] = "external";
    trace["final_loss"] = r.loss;
  } else if (a.refine) {
    const auto r = refine(b, m, f, rc, &std::cerr);
    params = r.params;
    trace["method"] = "stn-weights";
    trace["losses"] = r.trace.losses;
    trace["iterations_run"] = r.trace.iterations_run;
    trace["converged"] = r.trace.converged;
    trace["best_iteration"] = r.trace.best_iteration;
    trace["best_loss"] = r.trace.best_loss;
    if (!r.trace.diagnostic.empty()) trace["diagnostic"] = r.trace.diagnostic;
    write_text_atomic(out / "convergence.svg",
                      line_plot_svg("refinement", {{"L_STN-r", r.trace.losses}}, "iteration", "loss", true));
  }
  if (const auto* ap = std::get_if<AffineParams>(&params)) {
    write_text(out / "params.txt", format_params(*ap));
  } else {
    write_text(out / "params.json", to_json(std::get<BSplineParams>(params)).dump(1) + "\n");
  }
  write_raster(out / "warped.pgm", resample(m, to_field(params, m.shape())), RasterRange{0.0, 1.0});
  write_text(out / "trace.json", trace.dump(1) + "\n");
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::vector<std::string> models;
  std::string data;
  int max_pairs = 0;
};

int cmd_evaluate(const Globals& g, const EvaluateArgs& a) {
  const Json conf = load_config(g.config);
  SuiteConfig sc;
  if (conf.contains("refine")) sc.refine = refine_config_from_json(conf.at("refine"));
  if (conf.contains("external")) sc.external = external_config_from_json(conf.at("external"));
  if (g.seed) sc.external.seed = *g.seed;
  fs::path data = a.data;
  if (fs::exists(data / "test" / "manifest.json")) data /= "test";
  if (g.dry_run) {
    print_plan({"load " + std::to_string(a.models.size()) + " model(s)", "read " + data.string(),
                "evaluate before/after refinement with SoI and intensity oracles",
                "write tables and plots to " + g.out});
    return 0;
  }
  std::vector<ModelBundle> models;
  for (const auto& p : a.models) models.push_back(load_checkpoint(p));
  auto ds = read_dataset(data);
  if (a.max_pairs > 0 && static_cast<std::size_t>(a.max_pairs) < ds.samples.size()) ds.samples.resize(a.max_pairs);
  std::vector<SuiteMethod> methods;
  for (std::size_t i = 0; i < models.size(); ++i) {
    methods.push_back({to_string(models[i].spec.variant), &models[i]});
  }
  prepare_out(g, g.out);
  const auto r = evaluate_suite(methods, ds.samples, sc);
  write_suite(r, g.out, g.out, "table", to_string(ds.info.kind) + " test");
  std::cout << table_text(r.rows);
  return 0;
}

// ---------------------------------------------------------------------------

struct ExperimentArgs {
  std::string from_manifest;
  std::string conflict_data, plain_data;
  int epochs = 0;
  int max_test_pairs = -1;
};

int cmd_experiment(const Globals& g, const ExperimentArgs& a, const std::vector<std::string>& argv) {
  if (!a.from_manifest.empty()) {
    const Json m = read_json(a.from_manifest);
    if (g.dry_run) {
      print_plan(experiment_plan(experiment_config_from_json(m.at("config")), g.out));
      return 0;
    }
    prepare_out(g, g.out);
    const auto [res, cmp] = rerun_from_manifest(a.from_manifest, g.out, &std::cerr);
    std::cout << "rerun max |delta dice| " << cmp.max_abs_dice_diff << (cmp.within(0.01) ? " (within 0.01)\n" : "\n");
    for (const auto& d : cmp.differences) std::cout << "  differs: " << d << "\n";
    return cmp.within(0.01) ? 0 : 4;
  }
  ExperimentConfig cfg = experiment_config_from_json(load_config(g.config));
  if (!a.conflict_data.empty()) cfg.conflict_data = a.conflict_data;
  if (!a.plain_data.empty()) cfg.plain_data = a.plain_data;
  if (a.epochs > 0) cfg.train.epochs = a.epochs;
  if (a.max_test_pairs >= 0) cfg.max_test_pairs = a.max_test_pairs;
  if (g.seed) cfg.train.seed = *g.seed;
  if (g.out.empty()) throw UsageError("--out is required");
  if (g.dry_run) {
    print_plan(experiment_plan(cfg, g.out));
    return 0;
  }
  prepare_out(g, g.out);
  const auto res = run_experiment(cfg, g.out, argv, &std::cerr);
  std::cout << "conflict test\n" << table_text(res.conflict.rows);
  if (!res.plain.rows.empty()) std::cout << "plain test\n" << table_text(res.plain.rows);
  return 0;
}

int exit_code(Error::Kind k) {
  switch (k) {
    case Error::Kind::usage: return 2;
    case Error::Kind::data: return 3;
    case Error::Kind::numeric: return 4;
  }
  return 3;
}

const char* error_prefix(Error::Kind k) {
  switch (k) {
    case Error::Kind::usage: return "ERR_USAGE";
    case Error::Kind::data: return "ERR_DATA";
    case Error::Kind::numeric: return "ERR_NUMERIC";
  }
  return "ERR_DATA";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image-and-spatial transformer networks for structure-guided registration", "istn"};
  app.set_version_flag("--version", ISTN_VERSION);
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "base random seed");
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--out", g.out, "output directory");
  app.add_flag("--force", g.force, "overwrite a non-empty output directory");
  app.add_flag("--dry-run", g.dry_run, "print the planned stages and write nothing");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "generate a synthetic dataset (train/val/test)");
  gen->add_option("--kind", ga.kind, "conflict | plain")->capture_default_str();
  gen->add_option("--pairs", ga.pairs, "pairs in the train and test splits");
  gen->add_option("--train", ga.train, "train pairs")->capture_default_str();
  gen->add_option("--val", ga.val, "validation pairs")->capture_default_str();
  gen->add_option("--test", ga.test, "test pairs")->capture_default_str();
  gen->fallthrough();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train one model variant");
  tr->add_option("--data", ta.data, "dataset root (overrides dataset_dir)");
  tr->add_option("--variant", ta.variant, "STN-u | STN-s | ISTN-e | ISTN-i");
  tr->add_option("--model", ta.model, "affine | bspline");
  tr->add_option("--epochs", ta.epochs, "epoch budget");
  tr->fallthrough();

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "register one image pair with a trained model");
  reg->add_option("--model", ra.model, "checkpoint")->required();
  reg->add_option("--moving", ra.moving, "moving image (PGM)")->required();
  reg->add_option("--fixed", ra.fixed, "fixed image (PGM)")->required();
  reg->add_flag("--refine", ra.refine, "test-time refinement");
  reg->add_flag("--external", ra.external, "refine parameters directly instead of STN weights");
  reg->add_option("--iters", ra.iters, "refinement iterations");
  reg->fallthrough();

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "evaluate models on a test split");
  ev->add_option("--models", ea.models, "checkpoints")->required()->expected(1, -1);
  ev->add_option("--data", ea.data, "dataset root or split directory")->required();
  ev->add_option("--max-pairs", ea.max_pairs, "evaluate only the first N pairs");
  ev->fallthrough();

  ExperimentArgs xa;
  auto* ex = app.add_subcommand("experiment", "train all variants and compare them");
  ex->add_option("--from-manifest", xa.from_manifest, "rerun from a results manifest");
  ex->add_option("--conflict-data", xa.conflict_data, "conflict dataset root");
  ex->add_option("--plain-data", xa.plain_data, "plain dataset root");
  ex->add_option("--epochs", xa.epochs, "epoch budget per variant");
  ex->add_option("--max-test-pairs", xa.max_test_pairs, "limit the test split");
  ex->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "ERR_USAGE: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*gen) return cmd_generate(g, ga);
    if (*tr) return cmd_train(g, ta);
    if (*reg) return cmd_register(g, ra);
    if (*ev) return cmd_evaluate(g, ea);
    if (*ex) return cmd_experiment(g, xa, std::vector<std::string>(argv, argv + argc));
  } catch (const Error& e) {
    std::cerr << error_prefix(e.kind()) << ": " << one_line(e.what()) << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "ERR_DATA: " << one_line(e.what()) << "\n";
    return 3;
  }
  return 2;
}
