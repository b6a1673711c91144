// extrap: command-line front end for the experiment harness.
//
// Every subcommand takes --config FILE (JSON, see README) plus flag
// overrides. Exit status: 0 ok, 1 invalid input, 2 runtime abort.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "extrap/adapt.hpp"
#include "extrap/estimator.hpp"
#include "extrap/harness.hpp"
#include "extrap/metrics.hpp"
#include "extrap/oracle.hpp"
#include "extrap/synthgen.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace extrap;

namespace {

// Shared config flags. Values are only applied when the flag was given, so
// file values survive unless overridden.
struct ConfigFlags {
  std::string config_path;
  std::string mode, task, method;
  std::uint64_t seed = 0;
  std::size_t runs = 0, n_source = 0;
  int parallelism = 0, epochs = 0;
  std::vector<double> distances;
  double kl = 0.0;
  CLI::Option *o_mode, *o_task, *o_method, *o_seed, *o_runs, *o_source, *o_par, *o_epochs, *o_dist, *o_kl, *o_fresh;
  bool fresh = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    o_mode = app->add_option("--mode", mode, "dense|sparse");
    o_task = app->add_option("--task", task, "classification|regression");
    o_method = app->add_option("--method", method, "ours|source_only");
    o_seed = app->add_option("--seed", seed, "base seed");
    o_runs = app->add_option("--runs", runs, "runs per cell");
    o_source = app->add_option("--n-source", n_source, "source samples per run");
    o_par = app->add_option("--parallelism", parallelism, "worker threads");
    o_epochs = app->add_option("--epochs", epochs, "training epochs");
    o_dist = app->add_option("--distances", distances, "target distances |s_tgt|")->delimiter(',');
    o_kl = app->add_option("--kl", kl, "KL weight");
    o_fresh = app->add_flag("--fresh-generator-per-run", fresh, "draw a new generator for every run");
  }

  ExperimentConfig resolve(ExperimentConfig base) const {
    if (!config_path.empty()) base = load_config(config_path);
    json patch = json::object();
    if (o_mode->count()) patch["mode"] = mode;
    if (o_task->count()) patch["task"] = task;
    if (o_method->count()) patch["method"] = method;
    if (o_seed->count()) patch["seed"] = seed;
    if (o_runs->count()) patch["n_runs"] = runs;
    if (o_source->count()) patch["n_source"] = n_source;
    if (o_par->count()) patch["parallelism"] = parallelism;
    if (o_epochs->count()) patch["epochs"] = epochs;
    if (o_dist->count()) patch["distances"] = distances;
    if (o_fresh->count()) patch["fresh_generator_per_run"] = fresh;
    base.merge_json(patch);
    if (o_kl->count()) base.weights.kl = kl;
    base.validate();
    return base;
  }
};

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

EstimatorModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  try {
    return EstimatorModel::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint '" + path + "': " + e.what());
  }
}

json prediction_json(const EstimatorModel& model, const TargetSample& target, Task task) {
  const Prediction p = model.predict(target.x.storage());
  json j = {{"c_hat", p.c_hat}, {"s_hat", p.s_hat}};
  if (task == Task::BinaryClassification) {
    j["logits"] = p.outputs;
    j["label"] = p.label;
    j["true_label"] = target.label;
    j["correct"] = p.label == target.label;
    j["entropy"] = target_entropy(model, target.x);
  } else {
    j["prediction"] = p.value;
    j["true_value"] = target.value;
    j["sq_error"] = (p.value - target.value) * (p.value - target.value);
  }
  return j;
}

// Single-run config: cell 0 at `distance`.
ExperimentConfig single_cell(ExperimentConfig cfg, std::optional<double> distance) {
  if (distance) cfg.distances = {*distance};
  cfg.distances.resize(1);
  cfg.validate();
  return cfg;
}

const std::vector<double> kDenseAcc[2] = {{0.78, 0.69, 0.72, 0.72}, {0.59, 0.55, 0.45, 0.45}};
const std::vector<double> kSparseAcc[2] = {{0.72, 0.72, 0.76, 0.70}, {0.54, 0.54, 0.56, 0.52}};
const std::vector<double> kDenseMse[2] = {{1.40, 1.60, 1.68}, {11.64, 2.44, 3.26}};
const std::vector<double> kSparseMse[2] = {{1.15, 1.48, 1.60}, {1.84, 3.32, 5.84}};

std::vector<ShiftMode> modes_for(const std::string& mode) {
  if (mode == "both") return {ShiftMode::Dense, ShiftMode::Sparse};
  return {parse_shift_mode(mode)};
}

// Runs ours and source_only for each mode; writes <stem>_<mode>.csv and
// <stem>_<mode>.md under out_dir and prints the markdown.
int reproduce(const ConfigFlags& flags, const std::string& mode_arg, Task task, const std::string& out_dir) {
  const std::string stem = task == Task::Regression ? "regression" : "table1";
  for (ShiftMode mode : modes_for(mode_arg)) {
    std::ostringstream csv, md;
    md << "# " << stem << " " << to_string(mode) << "\n\n";
    bool header = true;
    for (Method method : {Method::Ours, Method::SourceOnly}) {
      ExperimentConfig preset = task == Task::Regression ? ExperimentConfig::regression(mode, method)
                                                         : ExperimentConfig::table1(mode, method);
      ExperimentConfig cfg = flags.resolve(preset);
      cfg.mode = mode;
      cfg.method = method;
      cfg.validate();
      const MatrixResult result = run_matrix(cfg);
      std::ostringstream part;
      write_results_csv(part, result.rows);
      std::string text = part.str();
      if (!header) text = text.substr(text.find('\n') + 1);
      header = false;
      csv << text;
      write_summary_markdown(md, cfg, result.cells);
      const auto& published = task == Task::Regression
                                  ? (mode == ShiftMode::Dense ? kDenseMse : kSparseMse)[method == Method::Ours ? 0 : 1]
                                  : (mode == ShiftMode::Dense ? kDenseAcc : kSparseAcc)[method == Method::Ours ? 0 : 1];
      if (cfg.distances == preset.distances) {
        md << "\npublished:";
        for (double v : published) md << ' ' << format_double(v);
        md << '\n';
      }
      md << '\n';
    }
    const std::string base = (fs::path(out_dir) / (stem + "_" + to_string(mode))).string();
    write_text(base + ".csv", csv.str());
    write_text(base + ".md", md.str());
    std::cout << md.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"extrap: latent-variable extrapolation experiments"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  // generate
  ConfigFlags gen_flags;
  std::string gen_out, gen_target_out;
  std::size_t gen_run = 0;
  auto* generate = app.add_subcommand("generate", "Sample a source dataset (and a target) as CSV");
  gen_flags.attach(generate);
  generate->add_option("--out", gen_out, "source CSV path (default stdout)");
  generate->add_option("--target-out", gen_target_out, "target CSV path");
  generate->add_option("--run", gen_run, "run index");

  // train
  ConfigFlags train_flags;
  std::string train_ckpt, train_trace;
  std::size_t train_run = 0;
  std::optional<double> train_distance;
  bool train_mask = false;
  auto* train_cmd = app.add_subcommand("train", "Train one run and save a checkpoint");
  train_flags.attach(train_cmd);
  train_cmd->add_option("--distance", train_distance, "target distance");
  train_cmd->add_option("--run", train_run, "run index");
  train_cmd->add_option("--checkpoint", train_ckpt, "checkpoint JSON path")->required();
  train_cmd->add_option("--trace", train_trace, "loss trace CSV path");
  train_cmd->add_flag("--mask", train_mask, "train with a soft mask on the codes");

  // adapt
  ConfigFlags adapt_flags;
  std::string adapt_ckpt, adapt_out, adapt_scope = "encoder_and_classifier";
  std::size_t adapt_run = 0;
  std::optional<double> adapt_distance;
  AdaptConfig adapt_cfg;
  adapt_cfg.steps = 2;
  auto* adapt = app.add_subcommand("adapt", "Entropy adaptation on the run's target; prints before/after JSON");
  adapt_flags.attach(adapt);
  adapt->add_option("--checkpoint", adapt_ckpt, "trained checkpoint")->required()->check(CLI::ExistingFile);
  adapt->add_option("--distance", adapt_distance, "target distance");
  adapt->add_option("--run", adapt_run, "run index");
  adapt->add_option("--steps", adapt_cfg.steps, "Adam steps");
  adapt->add_option("--lr", adapt_cfg.lr, "learning rate");
  adapt->add_flag("--mask", adapt_cfg.use_mask, "install a soft mask on the codes");
  adapt->add_option("--l1-weight", adapt_cfg.l1_weight, "mask sparsity weight");
  adapt->add_option("--scope", adapt_scope, "encoder_only|encoder_and_classifier");
  adapt->add_option("--out", adapt_out, "adapted checkpoint path");

  // evaluate
  ConfigFlags eval_flags;
  std::string eval_ckpt, eval_out;
  std::size_t eval_run = 0, eval_pairs = 1000;
  std::optional<double> eval_distance;
  auto* evaluate = app.add_subcommand("evaluate", "Target prediction and block identifiability of a checkpoint");
  eval_flags.attach(evaluate);
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint JSON")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--distance", eval_distance, "target distance");
  evaluate->add_option("--run", eval_run, "run index");
  evaluate->add_option("--pairs", eval_pairs, "source pairs for the identifiability score");
  evaluate->add_option("--out", eval_out, "JSON path (default stdout)");

  // sweep
  ConfigFlags sweep_flags;
  std::vector<int> sweep_scopes;
  std::vector<double> sweep_severities;
  std::string sweep_grid_out = "sweep_grid.csv", sweep_plot_out = "sweep.svg", sweep_grid_in;
  auto* sweep = app.add_subcommand("sweep", "Severity x scope error grid (CSV + SVG)");
  sweep_flags.attach(sweep);
  auto* o_scopes = sweep->add_option("--scopes", sweep_scopes, "x dims the shift touches")->delimiter(',');
  auto* o_sev = sweep->add_option("--severities", sweep_severities, "|s_tgt| values")->delimiter(',');
  sweep->add_option("--grid-out", sweep_grid_out, "grid CSV path");
  sweep->add_option("--plot-out", sweep_plot_out, "SVG path");
  sweep->add_option("--grid-in", sweep_grid_in, "render an existing grid CSV instead of running")
      ->check(CLI::ExistingFile);

  // check-assumptions
  ConfigFlags check_flags;
  std::string check_out;
  std::optional<double> check_distance;
  auto* check = app.add_subcommand("check-assumptions", "Jacobian, mechanistic dependence and dense-bound report (JSON)");
  check_flags.attach(check);
  check->add_option("--distance", check_distance, "target distance for the dense bound");
  check->add_option("--out", check_out, "JSON path (default stdout)");

  // reproductions
  ConfigFlags t1_flags, reg_flags;
  std::string t1_mode = "both", reg_mode = "both", t1_dir = "results", reg_dir = "results";
  auto* table1 = app.add_subcommand("reproduce-table1", "Classification accuracy matrix, ours vs source_only");
  t1_flags.attach(table1);
  t1_flags.o_mode->check(CLI::IsMember({"dense", "sparse"}));
  table1->add_option("--out-dir", t1_dir, "output directory");
  auto* regression = app.add_subcommand("reproduce-regression", "Regression MSE matrix, ours vs source_only");
  reg_flags.attach(regression);
  reg_flags.o_mode->check(CLI::IsMember({"dense", "sparse"}));
  regression->add_option("--out-dir", reg_dir, "output directory");

  if (argc <= 1) {
    std::cerr << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (generate->parsed()) {
      const ExperimentConfig cfg = single_cell(gen_flags.resolve({}), std::nullopt);
      const RunSetup setup = prepare_run(cfg, 0, gen_run, cfg.weights.kl);
      std::ostringstream os;
      write_dataset_csv(os, setup.source);
      write_text(gen_out, os.str());
      if (!gen_target_out.empty()) {
        Dataset t;
        t.task = cfg.task;
        t.xs = setup.target.x;
        t.latents = {setup.target.latent};
        if (cfg.task == Task::BinaryClassification)
          t.classes = {setup.target.label};
        else
          t.values = {setup.target.value};
        std::ostringstream ts;
        write_dataset_csv(ts, t);
        write_text(gen_target_out, ts.str());
      }
    } else if (train_cmd->parsed()) {
      const ExperimentConfig cfg = single_cell(train_flags.resolve({}), train_distance);
      RunSetup setup = prepare_run(cfg, 0, train_run, cfg.weights.kl);
      setup.train.use_mask = train_mask;
      const TrainResult trained =
          train(setup.source, cfg.method == Method::Ours ? &setup.target.x : nullptr, setup.train);
      write_text(train_ckpt, dump(trained.model.to_json()));
      if (!train_trace.empty()) {
        std::ostringstream os;
        write_loss_trace_csv(os, trained.trace);
        write_text(train_trace, os.str());
      }
      std::cout << dump({{"distance", cfg.distances[0]},
                         {"run", train_run},
                         {"target", prediction_json(trained.model, setup.target, cfg.task)}});
    } else if (adapt->parsed()) {
      const ExperimentConfig cfg = single_cell(adapt_flags.resolve({}), adapt_distance);
      adapt_cfg.update_scope = parse_update_scope(adapt_scope);
      adapt_cfg.validate();
      const EstimatorModel model = load_checkpoint(adapt_ckpt);
      const RunSetup setup = prepare_run(cfg, 0, adapt_run, cfg.weights.kl);
      const AdaptResult result = adapt_entropy(model, setup.target.x, adapt_cfg);
      if (!adapt_out.empty()) write_text(adapt_out, dump(result.model.to_json()));
      json report = {{"steps", adapt_cfg.steps},
                     {"steps_taken", result.steps_taken},
                     {"lr", adapt_cfg.lr},
                     {"mask", adapt_cfg.use_mask},
                     {"l1_weight", adapt_cfg.l1_weight},
                     {"entropy_trace", result.entropy},
                     {"aborted", result.aborted},
                     {"before", prediction_json(model, setup.target, cfg.task)},
                     {"after", prediction_json(result.model, setup.target, cfg.task)}};
      if (result.aborted) {
        report["warning"] = result.warning;
        std::cerr << "warning: " << result.warning << '\n';
      }
      if (result.model.has_mask()) report["mask_values"] = result.model.mask_values();
      std::cout << dump(report);
    } else if (evaluate->parsed()) {
      const ExperimentConfig cfg = single_cell(eval_flags.resolve({}), eval_distance);
      const EstimatorModel model = load_checkpoint(eval_ckpt);
      const RunSetup setup = prepare_run(cfg, 0, eval_run, cfg.weights.kl);
      json report = {{"distance", cfg.distances[0]}, {"run", eval_run},
                     {"target", prediction_json(model, setup.target, cfg.task)}};
      if (cfg.task == Task::BinaryClassification && eval_pairs > 0) {
        Rng rng = Rng::keyed(cfg.seed, {stream::block_id, 0, eval_run});
        const BlockIdScore s = block_identifiability_score(model, setup.gen, eval_pairs, rng);
        report["block_id"] = {{"score", s.score}, {"epsilon", s.epsilon}, {"degenerate", s.degenerate},
                              {"n_pairs", s.n_pairs}};
      }
      write_text(eval_out, dump(report));
    } else if (sweep->parsed()) {
      std::vector<GridCell> grid;
      if (!sweep_grid_in.empty()) {
        std::ifstream in(sweep_grid_in);
        grid = read_grid_csv(in);
      } else {
        ExperimentConfig cfg = sweep_flags.resolve({});
        if (o_scopes->count()) cfg.scopes = sweep_scopes;
        if (o_sev->count()) cfg.severities = sweep_severities;
        cfg.validate();
        grid = run_sweep(cfg);
        std::ostringstream os;
        write_grid_csv(os, grid);
        write_text(sweep_grid_out, os.str());
      }
      write_text(sweep_plot_out, emit_plot(grid));
    } else if (check->parsed()) {
      const ExperimentConfig cfg = check_flags.resolve({});
      write_text(check_out, dump(assumption_report(cfg, check_distance.value_or(cfg.distances.front()))));
    } else if (table1->parsed()) {
      return reproduce(t1_flags, t1_flags.o_mode->count() ? t1_flags.mode : "both", Task::BinaryClassification,
                       t1_dir);
    } else if (regression->parsed()) {
      return reproduce(reg_flags, reg_flags.o_mode->count() ? reg_flags.mode : "both", Task::Regression, reg_dir);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
