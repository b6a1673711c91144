#include "extrap/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "extrap/oracle.hpp"
#include "extrap/parallel.hpp"

namespace extrap {

using json = nlohmann::json;

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

std::string to_string(Method method) { return method == Method::Ours ? "ours" : "source_only"; }

Method parse_method(const std::string& s) {
  if (s == "ours") return Method::Ours;
  if (s == "source_only") return Method::SourceOnly;
  throw ConfigError("unknown method '" + s + "' (expected ours|source_only)");
}

// ---------------------------------------------------------------- config

namespace {

json weights_to_json(const LossWeights& w) {
  return {{"cls", w.cls},   {"recons", w.recons},     {"tgt_likelihood", w.tgt_likelihood},
          {"s_distance", w.s_distance}, {"kl", w.kl}, {"anti_nat", w.anti_nat}, {"mask_l1", w.mask_l1}};
}

LossWeights weights_from_json(const json& j) {
  LossWeights w;
  w.cls = j.at("cls");
  w.recons = j.at("recons");
  w.tgt_likelihood = j.at("tgt_likelihood");
  w.s_distance = j.at("s_distance");
  w.kl = j.at("kl");
  w.anti_nat = j.at("anti_nat");
  w.mask_l1 = j.at("mask_l1");
  return w;
}

void merge_checked(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : patch.items()) {
    if (!base.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (base[key].is_object())
      merge_checked(base[key], value, where + "." + key);
    else
      base[key] = value;
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  const double radius = GeneratorSpec{}.radius;
  auto check_distance = [&](double d, const char* what) {
    if (!std::isfinite(d) || d < 0.0 || (d != 0.0 && d <= radius))
      fail(std::string(what) + " must be 0 or beyond the support radius (" + format_double(radius) + "), got " +
           format_double(d));
  };
  if (distances.empty()) fail("distances must be nonempty");
  for (double d : distances) check_distance(d, "distance");
  if (n_runs < 1) fail("n_runs must be >= 1");
  if (n_source < 2) fail("n_source must be >= 2");
  if (parallelism < 1) fail("parallelism must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (hidden < 1) fail("hidden must be >= 1");
  if (layers < 2) fail("layers must be >= 2");
  try {
    weights.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  for (double k : kl_grid)
    if (!(k >= 0.0)) fail("kl_grid entries must be >= 0");
  if (!kl_grid.empty() && pilot_runs < 1) fail("pilot_runs must be >= 1");
  if (adapt_steps < 0) fail("adapt_steps must be >= 0");
  if (adapt_steps > 0 && task != Task::BinaryClassification) fail("entropy adaptation needs the classification task");
  if (!(adapt_lr >= 0.0)) fail("adapt_lr must be >= 0");
  if (!(adapt_l1_weight >= 0.0)) fail("adapt_l1_weight must be >= 0");
  const GeneratorSpec spec = generator_spec();
  for (int s : scopes)
    if (s < spec.d_s || s > spec.d_x) fail("scopes must lie in [d_s, d_x]");
  for (double s : severities) check_distance(s, "severity");
}

json ExperimentConfig::to_json() const {
  return {{"mode", extrap::to_string(mode)},
          {"task", extrap::to_string(task)},
          {"method", extrap::to_string(method)},
          {"distances", distances},
          {"n_runs", n_runs},
          {"n_source", n_source},
          {"weights", weights_to_json(weights)},
          {"seed", seed},
          {"parallelism", parallelism},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"hidden", hidden},
          {"layers", layers},
          {"fresh_generator_per_run", fresh_generator_per_run},
          {"kl_grid", kl_grid},
          {"pilot_runs", pilot_runs},
          {"adapt_steps", adapt_steps},
          {"adapt_lr", adapt_lr},
          {"adapt_mask", adapt_mask},
          {"adapt_l1_weight", adapt_l1_weight},
          {"block_id_pairs", block_id_pairs},
          {"scopes", scopes},
          {"severities", severities}};
}

void ExperimentConfig::merge_json(const json& j) {
  json full = to_json();
  merge_checked(full, j, "config");
  // A task switch without explicit weights takes that task's defaults.
  if (j.contains("task") && !j.contains("weights")) {
    const Task t = parse_task(full.at("task").get<std::string>());
    full["weights"] = weights_to_json(t == Task::Regression ? LossWeights::regression() : LossWeights::classification());
  }
  try {
    ExperimentConfig c;
    c.mode = parse_shift_mode(full.at("mode").get<std::string>());
    c.task = parse_task(full.at("task").get<std::string>());
    c.method = parse_method(full.at("method").get<std::string>());
    c.distances = full.at("distances").get<std::vector<double>>();
    c.n_runs = full.at("n_runs");
    c.n_source = full.at("n_source");
    c.weights = weights_from_json(full.at("weights"));
    c.seed = full.at("seed");
    c.parallelism = full.at("parallelism");
    c.epochs = full.at("epochs");
    c.batch_size = full.at("batch_size");
    c.lr = full.at("lr");
    c.hidden = full.at("hidden");
    c.layers = full.at("layers");
    c.fresh_generator_per_run = full.at("fresh_generator_per_run");
    c.kl_grid = full.at("kl_grid").get<std::vector<double>>();
    c.pilot_runs = full.at("pilot_runs");
    c.adapt_steps = full.at("adapt_steps");
    c.adapt_lr = full.at("adapt_lr");
    c.adapt_mask = full.at("adapt_mask");
    c.adapt_l1_weight = full.at("adapt_l1_weight");
    c.block_id_pairs = full.at("block_id_pairs");
    c.scopes = full.at("scopes").get<std::vector<int>>();
    c.severities = full.at("severities").get<std::vector<double>>();
    *this = std::move(c);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  c.merge_json(j);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::table1(ShiftMode mode, Method method) {
  ExperimentConfig c;
  c.mode = mode;
  c.method = method;
  c.distances = mode == ShiftMode::Dense ? std::vector<double>{12, 18, 24, 30} : std::vector<double>{18, 24, 30, 36};
  return c;
}

ExperimentConfig ExperimentConfig::regression(ShiftMode mode, Method method) {
  ExperimentConfig c;
  c.mode = mode;
  c.task = Task::Regression;
  c.method = method;
  c.distances = {18, 24, 30};
  c.weights = LossWeights::regression();
  c.block_id_pairs = 0;
  return c;
}

GeneratorSpec ExperimentConfig::generator_spec() const {
  GeneratorSpec spec;
  spec.mode = mode;
  spec.task = task;
  spec.mlp_layers = layers;
  return spec;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.mode = mode;
  t.task = task;
  t.weights = method == Method::Ours ? weights : weights.source_only();
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.lr = lr;
  t.shape.hidden = hidden;
  t.shape.encoder_layers = layers;
  t.shape.decoder_layers = layers;
  return t;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

// ---------------------------------------------------------------- runs

namespace {

constexpr std::uint64_t kSharedRun = ~std::uint64_t{0};

// salt 0: the reported runs; salt 1: KL pilots.
RunSetup prepare(const ExperimentConfig& cfg, std::size_t cell, std::size_t run, double kl, std::uint64_t salt) {
  cfg.validate();
  if (cell >= cfg.distances.size()) throw ConfigError("cell index out of range");
  RunSetup setup{cell_generator(cfg, cell, run), {}, {}, cfg.train_config()};
  Rng source_rng = Rng::keyed(cfg.seed, {stream::source, cell, run, salt});
  Rng target_rng = Rng::keyed(cfg.seed, {stream::target, cell, run, salt});
  setup.source = sample_source(setup.gen, cfg.n_source, source_rng);
  setup.target = sample_target(setup.gen, cfg.distances[cell], target_rng);
  if (cfg.method == Method::Ours) setup.train.weights.kl = kl;
  setup.train.seed = Rng::keyed(cfg.seed, {stream::init, cell, run, salt}).next_u64();
  return setup;
}

}  // namespace

std::uint64_t generator_seed(const ExperimentConfig& cfg, std::size_t cell, std::size_t run) {
  const std::uint64_t which = cfg.fresh_generator_per_run ? run : kSharedRun;
  return Rng::keyed(cfg.seed, {stream::generator, cell, which}).next_u64();
}

Generator cell_generator(const ExperimentConfig& cfg, std::size_t cell, std::size_t run) {
  GeneratorSpec spec = cfg.generator_spec();
  spec.seed = generator_seed(cfg, cell, run);
  return build_generator(spec);
}

RunSetup prepare_run(const ExperimentConfig& cfg, std::size_t cell, std::size_t run, double kl) {
  return prepare(cfg, cell, run, kl, 0);
}

RunOutcome execute_run(const ExperimentConfig& cfg, std::size_t cell, std::size_t run, double kl, bool keep_model) {
  RunSetup setup = prepare_run(cfg, cell, run, kl);
  RunOutcome out;
  RunResult& r = out.result;
  r.mode = cfg.mode;
  r.task = cfg.task;
  r.distance = cfg.distances[cell];
  r.seed = setup.train.seed;
  r.method = to_string(cfg.method);
  r.block_id = kNaN;

  TrainResult trained = train(setup.source, cfg.method == Method::Ours ? &setup.target.x : nullptr, setup.train);
  EstimatorModel model = std::move(trained.model);
  if (cfg.adapt_steps > 0) {
    AdaptConfig ac;
    ac.steps = cfg.adapt_steps;
    ac.lr = cfg.adapt_lr;
    ac.use_mask = cfg.adapt_mask;
    ac.l1_weight = cfg.adapt_l1_weight;
    model = adapt_entropy(model, setup.target.x, ac).model;
  }
  const Prediction p = model.predict(setup.target.x.storage());
  if (cfg.task == Task::BinaryClassification) {
    r.correct = p.label == setup.target.label;
    r.sq_error = kNaN;
  } else {
    r.sq_error = (p.value - setup.target.value) * (p.value - setup.target.value);
  }
  if (cfg.task == Task::BinaryClassification && cfg.block_id_pairs > 0) {
    Rng rng = Rng::keyed(cfg.seed, {stream::block_id, cell, run});
    const BlockIdScore score = block_identifiability_score(model, setup.gen, cfg.block_id_pairs, rng);
    r.block_id = score.score;
    r.degenerate = score.degenerate;
  }
  out.trace = std::move(trained.trace);
  if (keep_model) out.model = std::move(model);
  return out;
}

KlChoice tune_kl(const ExperimentConfig& cfg, std::size_t cell) {
  KlChoice choice;
  choice.kl = cfg.weights.kl;
  if (cfg.kl_grid.empty() || cfg.method != Method::Ours) return choice;
  const std::size_t n_grid = cfg.kl_grid.size();
  std::vector<double> score(n_grid * cfg.pilot_runs), recon(n_grid * cfg.pilot_runs);
  parallel_for(score.size(), cfg.parallelism, [&](std::size_t job) {
    const std::size_t g = job / cfg.pilot_runs, p = job % cfg.pilot_runs;
    RunSetup setup = prepare(cfg, cell, p, cfg.kl_grid[g], 1);
    const TrainResult trained = train(setup.source, &setup.target.x, setup.train);
    Rng holdout_rng = Rng::keyed(cfg.seed, {stream::pilot, cell, p});
    const Dataset holdout = sample_source(setup.gen, 2000, holdout_rng);
    const auto preds = trained.model.predict(holdout.xs);
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (cfg.task == Task::BinaryClassification)
        s += preds[i].label == holdout.classes[i] ? 1.0 : 0.0;
      else
        s -= (preds[i].value - holdout.values[i]) * (preds[i].value - holdout.values[i]);
    }
    score[job] = s / static_cast<double>(preds.size());
    recon[job] = trained.trace.empty() ? 0.0 : trained.trace.back().reconstruction;
  });
  std::size_t best = 0;
  for (std::size_t g = 0; g < n_grid; ++g) {
    double s = 0.0, rc = 0.0;
    for (std::size_t p = 0; p < cfg.pilot_runs; ++p) {
      s += score[g * cfg.pilot_runs + p];
      rc += recon[g * cfg.pilot_runs + p];
    }
    choice.holdout_accuracy.push_back(s / static_cast<double>(cfg.pilot_runs));
    choice.reconstruction.push_back(rc / static_cast<double>(cfg.pilot_runs));
    if (g > 0 && (choice.holdout_accuracy[g] > choice.holdout_accuracy[best] ||
                  (choice.holdout_accuracy[g] == choice.holdout_accuracy[best] &&
                   choice.reconstruction[g] < choice.reconstruction[best])))
      best = g;
  }
  choice.kl = cfg.kl_grid[best];
  return choice;
}

MatrixResult run_matrix(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::size_t n_cells = cfg.distances.size();
  std::vector<double> kls(n_cells);
  for (std::size_t cell = 0; cell < n_cells; ++cell) kls[cell] = tune_kl(cfg, cell).kl;

  MatrixResult out;
  out.rows.resize(n_cells * cfg.n_runs);
  parallel_for(out.rows.size(), cfg.parallelism, [&](std::size_t job) {
    const std::size_t cell = job / cfg.n_runs, run = job % cfg.n_runs;
    try {
      out.rows[job] = execute_run(cfg, cell, run, kls[cell]).result;
    } catch (const std::exception& e) {
      RunResult r;
      r.mode = cfg.mode;
      r.task = cfg.task;
      r.distance = cfg.distances[cell];
      r.seed = Rng::keyed(cfg.seed, {stream::init, cell, run, 0}).next_u64();
      r.method = to_string(cfg.method);
      r.failed = true;
      r.sq_error = kNaN;
      r.block_id = kNaN;
      r.error = e.what();
      out.rows[job] = std::move(r);
    }
  });
  out.cells = summarize(out.rows, cfg.distances, kls);
  return out;
}

// ---------------------------------------------------------------- persistence

void write_results_csv(std::ostream& os, std::span<const RunResult> rows) {
  os << "mode,task,distance,seed,method,correct,sq_error,block_id,degenerate\n";
  for (const auto& r : rows) {
    const bool cls = r.task == Task::BinaryClassification;
    os << to_string(r.mode) << ',' << to_string(r.task) << ',' << format_double(r.distance) << ',' << r.seed << ','
       << r.method << ',' << (cls && !r.failed ? (r.correct ? "1" : "0") : "nan") << ','
       << format_double(!cls && !r.failed ? r.sq_error : kNaN) << ',' << format_double(r.block_id) << ','
       << (r.degenerate ? 1 : 0) << '\n';
  }
}

std::vector<RunResult> read_results_csv(std::istream& is) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line) || line != "mode,task,distance,seed,method,correct,sq_error,block_id,degenerate")
    throw MetricsError("results csv line 1: unexpected header");
  std::vector<RunResult> rows;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string field; std::getline(ss, field, ',');) f.push_back(field);
    if (f.size() != 9) throw MetricsError("results csv line " + std::to_string(line_no) + ": expected 9 fields");
    try {
      RunResult r;
      r.mode = parse_shift_mode(f[0]);
      r.task = parse_task(f[1]);
      r.distance = std::stod(f[2]);
      r.seed = std::stoull(f[3]);
      r.method = f[4];
      const bool cls = r.task == Task::BinaryClassification;
      r.failed = cls ? f[5] == "nan" : f[6] == "nan";
      r.correct = f[5] == "1";
      r.sq_error = f[6] == "nan" ? kNaN : std::stod(f[6]);
      r.block_id = f[7] == "nan" ? kNaN : std::stod(f[7]);
      r.degenerate = f[8] == "1";
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw MetricsError("results csv line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

std::vector<CellSummary> summarize(std::span<const RunResult> rows, std::span<const double> distances,
                                   std::span<const double> kls) {
  std::vector<CellSummary> cells;
  for (std::size_t c = 0; c < distances.size(); ++c) {
    std::vector<RunResult> cell;
    for (const auto& r : rows)
      if (r.distance == distances[c]) cell.push_back(r);
    CellSummary s;
    s.distance = distances[c];
    s.kl = c < kls.size() ? kls[c] : kNaN;
    s.n_runs = cell.size();
    if (cell.empty()) {
      s.mean = s.std_error = s.block_id = kNaN;
      cells.push_back(s);
      continue;
    }
    std::vector<double> values;
    double block = 0.0;
    std::size_t scored = 0;
    for (const auto& r : cell) {
      if (r.failed) ++s.failed;
      if (r.task == Task::BinaryClassification)
        values.push_back(!r.failed && r.correct ? 1.0 : 0.0);
      else if (!r.failed)
        values.push_back(r.sq_error);
      if (std::isfinite(r.block_id)) {
        block += r.block_id;
        ++scored;
      }
    }
    s.mean = cell.front().task == Task::BinaryClassification ? target_accuracy(cell) : target_mse(cell);
    if (values.size() > 1) {
      double var = 0.0;
      for (double v : values) var += (v - s.mean) * (v - s.mean);
      var /= static_cast<double>(values.size() - 1);
      s.std_error = std::sqrt(var / static_cast<double>(values.size()));
    }
    s.block_id = scored ? block / static_cast<double>(scored) : kNaN;
    cells.push_back(s);
  }
  return cells;
}

namespace {
std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}
}  // namespace

void write_summary_markdown(std::ostream& os, const ExperimentConfig& cfg, std::span<const CellSummary> cells) {
  const bool cls = cfg.task == Task::BinaryClassification;
  os << "mode " << to_string(cfg.mode) << ", task " << to_string(cfg.task) << ", method " << to_string(cfg.method)
     << ", seed " << cfg.seed << "\n\n";
  os << "| distance | runs | failed | " << (cls ? "accuracy" : "mse") << " | s.e. | block id | kl |\n";
  os << "|---|---|---|---|---|---|---|\n";
  for (const auto& c : cells)
    os << "| " << format_double(c.distance) << " | " << c.n_runs << " | " << c.failed << " | " << fixed(c.mean, 3)
       << " | " << fixed(c.std_error, 3) << " | " << fixed(c.block_id, 3) << " | " << format_double(c.kl) << " |\n";
}

// ---------------------------------------------------------------- sweep

std::vector<GridCell> run_sweep(const ExperimentConfig& cfg) {
  cfg.validate();
  const GeneratorSpec base = cfg.generator_spec();
  auto family = [&](int scope) {
    GeneratorSpec spec = base;
    spec.seed = Rng::keyed(cfg.seed, {stream::generator, static_cast<std::uint64_t>(scope)}).next_u64();
    std::vector<std::size_t> rows(static_cast<std::size_t>(scope));
    for (int i = 0; i < scope; ++i) rows[i] = static_cast<std::size_t>(i);
    return build_scoped_generator(spec, rows);
  };
  // Streams ignore the severity, so every severity of a scope sees the same
  // source set, init and target direction: cells differ only in |s_tgt|.
  auto method = [&](const Generator& gen, int scope, double severity, std::size_t run) -> double {
    const auto key = static_cast<std::uint64_t>(scope);
    Rng source_rng = Rng::keyed(cfg.seed, {stream::source, key, run});
    Rng target_rng = Rng::keyed(cfg.seed, {stream::target, key, run});
    const Dataset source = sample_source(gen, cfg.n_source, source_rng);
    const TargetSample target = sample_target(gen, severity, target_rng);
    TrainConfig tc = cfg.train_config();
    tc.mode = gen.spec().mode;
    tc.seed = Rng::keyed(cfg.seed, {stream::init, key, run}).next_u64();
    try {
      const TrainResult trained = train(source, cfg.method == Method::Ours ? &target.x : nullptr, tc);
      const Prediction p = trained.model.predict(target.x.storage());
      if (cfg.task == Task::BinaryClassification) return p.label == target.label ? 0.0 : 1.0;
      return (p.value - target.value) * (p.value - target.value);
    } catch (const std::runtime_error&) {
      // An aborted run counts as an error, as in the accuracy tables.
      return cfg.task == Task::BinaryClassification ? 1.0 : kNaN;
    }
  };
  return severity_scope_sweep(family, cfg.severities, cfg.scopes, method, cfg.n_runs, cfg.parallelism);
}

// ---------------------------------------------------------------- plot

std::string emit_plot(std::span<const GridCell> grid) {
  if (grid.empty()) throw MetricsError("emit_plot: empty grid");
  constexpr double W = 640, H = 400, left = 70, right = 120, top = 30, bottom = 60;
  double xmin = grid[0].severity, xmax = xmin, ymax = 0.0;
  for (const auto& c : grid) {
    if (!std::isfinite(c.severity) || !std::isfinite(c.mean_error))
      throw MetricsError("emit_plot: non-finite grid value");
    xmin = std::min(xmin, c.severity);
    xmax = std::max(xmax, c.severity);
    ymax = std::max(ymax, c.mean_error);
  }
  if (xmax == xmin) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  ymax = ymax <= 0.5 ? 0.5 : std::ceil(ymax * 10.0) / 10.0;
  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - y / ymax * (H - top - bottom); };

  std::map<int, std::vector<GridCell>> lines;
  for (const auto& c : grid) lines[c.scope].push_back(c);
  for (auto& [scope, cells] : lines)
    std::stable_sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return a.severity < b.severity; });

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << fixed(left, 2) << "\" y1=\"" << fixed(py(0), 2) << "\" x2=\"" << fixed(W - right, 2)
      << "\" y2=\"" << fixed(py(0), 2) << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << fixed(left, 2) << "\" y1=\"" << fixed(py(0), 2) << "\" x2=\"" << fixed(left, 2)
      << "\" y2=\"" << fixed(top, 2) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double y = ymax * i / 5.0;
    svg << "<text x=\"" << fixed(left - 8, 2) << "\" y=\"" << fixed(py(y) + 4, 2) << "\" text-anchor=\"end\">"
        << fixed(y, 2) << "</text>\n";
  }
  std::vector<double> ticks;
  for (const auto& c : grid) ticks.push_back(c.severity);
  std::sort(ticks.begin(), ticks.end());
  ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
  for (double t : ticks)
    svg << "<text x=\"" << fixed(px(t), 2) << "\" y=\"" << fixed(H - bottom + 18, 2) << "\" text-anchor=\"middle\">"
        << format_double(t) << "</text>\n";
  svg << "<text x=\"" << fixed((left + W - right) / 2, 2) << "\" y=\"" << fixed(H - 15, 2)
      << "\" text-anchor=\"middle\">severity |s_tgt|</text>\n";
  svg << "<text x=\"18\" y=\"" << fixed((top + H - bottom) / 2, 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << fixed((top + H - bottom) / 2, 2) << ")\">mean target error</text>\n";

  std::size_t k = 0;
  for (const auto& [scope, cells] : lines) {
    const char* color = palette[k % std::size(palette)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < cells.size(); ++i)
      svg << (i ? " " : "") << fixed(px(cells[i].severity), 2) << ',' << fixed(py(cells[i].mean_error), 2);
    svg << "\"/>\n";
    for (const auto& c : cells)
      svg << "<circle cx=\"" << fixed(px(c.severity), 2) << "\" cy=\"" << fixed(py(c.mean_error), 2)
          << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    const double ly = top + 20.0 * static_cast<double>(k);
    svg << "<line x1=\"" << fixed(W - right + 15, 2) << "\" y1=\"" << fixed(ly, 2) << "\" x2=\""
        << fixed(W - right + 35, 2) << "\" y2=\"" << fixed(ly, 2) << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << fixed(W - right + 40, 2) << "\" y=\"" << fixed(ly + 4, 2) << "\">scope " << scope
        << "</text>\n";
    ++k;
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string emit_plot_csv(std::istream& grid_csv) { return emit_plot(read_grid_csv(grid_csv)); }

// ---------------------------------------------------------------- assumptions

json assumption_report(const ExperimentConfig& cfg, double distance) {
  cfg.validate();
  const Generator gen = cell_generator(cfg, 0, 0);
  Rng rng = Rng::keyed(cfg.seed, {stream::source, 0, 0, 7});
  const Dataset probe = sample_source(gen, 1, rng);
  const oracle::JacobianReport jr = oracle::jacobian_report(gen, probe.latents[0]);

  json j;
  j["mode"] = to_string(cfg.mode);
  j["task"] = to_string(cfg.task);
  j["generator_seed"] = gen.spec().seed;
  j["z"] = probe.latents[0].z();
  std::vector<std::vector<double>> rows(jr.J.rows(), std::vector<double>(jr.J.cols()));
  for (std::size_t r = 0; r < jr.J.rows(); ++r)
    for (std::size_t c = 0; c < jr.J.cols(); ++c) rows[r][c] = jr.J.at(r, c);
  j["jacobian"] = rows;
  j["index_sets"] = {{"I_s", jr.sets.I_s}, {"I_c", jr.sets.I_c}, {"I_c_minus_s", jr.sets.I_c_minus_s}};

  json parts = json::array();
  bool all_dependent = !jr.sets.I_c_minus_s.empty();
  if (jr.sets.I_c_minus_s.size() >= 2) {
    for (const auto& p : oracle::mechanistic_dependence(jr.J, jr.sets.I_c_minus_s)) {
      parts.push_back({{"first", p.first},
                       {"second", p.second},
                       {"rank_all", p.rank_all},
                       {"rank_first", p.rank_first},
                       {"rank_second", p.rank_second},
                       {"dependent", p.dependent}});
      all_dependent = all_dependent && p.dependent;
    }
  } else {
    all_dependent = false;
  }
  j["mechanistic_dependence"] = {{"partitions", parts}, {"all_dependent", all_dependent}};

  // One entry per checked assumption: name, satisfied, numeric evidence.
  json assumptions = json::array();
  {
    const auto z = probe.latents[0].z();
    const auto x = gen.apply(probe.latents[0]);
    std::vector<double> start = z;
    for (auto& v : start) v += 1e-3;
    const auto inv = oracle::invert(gen, x, start);
    double err = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) err += (inv.z[i] - z[i]) * (inv.z[i] - z[i]);
    err = std::sqrt(err);
    assumptions.push_back({{"name", "invertibility"},
                           {"satisfied", err < 1e-6},
                           {"evidence", {{"z_error", err}, {"residual", inv.residual}}}});
  }
  {
    const auto conds = gen.layer_condition_numbers();
    const double worst = conds.empty() ? 1.0 : *std::max_element(conds.begin(), conds.end());
    assumptions.push_back({{"name", "well_conditioned"},
                           {"satisfied", worst <= gen.spec().condition_limit},
                           {"evidence", {{"condition_numbers", conds}, {"limit", gen.spec().condition_limit}}}});
  }
  assumptions.push_back({{"name", "sparse_influence"},
                         {"satisfied", jr.sets.I_s.size() <= static_cast<std::size_t>(gen.spec().d_s)},
                         {"evidence", {{"I_s", jr.sets.I_s}, {"d_s", gen.spec().d_s}}}});
  std::size_t n_dependent = 0;
  for (const auto& p : parts) n_dependent += p["dependent"].get<bool>() ? 1 : 0;
  assumptions.push_back({{"name", "mechanistic_dependence"},
                         {"satisfied", all_dependent},
                         {"evidence", {{"partitions", parts.size()}, {"dependent", n_dependent}}}});

  if (cfg.task == Task::BinaryClassification) {
    Rng target_rng = Rng::keyed(cfg.seed, {stream::target, 0, 0, 7});
    const TargetSample target = sample_target(gen, distance, target_rng);
    oracle::DenseBoundOptions options;
    options.seed = Rng::keyed(cfg.seed, {stream::generator, 0, 7}).next_u64();
    const auto bound = oracle::check_dense_bound(gen, target.latent.s, target.latent.c, options);
    j["dense_bound"] = bound.to_json();
    j["target_distance"] = distance;
    assumptions.push_back({{"name", "dense_bound"}, {"satisfied", bound.satisfied}, {"evidence", bound.to_json()}});
  }
  j["assumptions"] = assumptions;
  return j;
}

}  // namespace extrap
