#pragma once

// Experiment configuration, the run matrix, result persistence, assumption
// reports and SVG plotting.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "extrap/adapt.hpp"
#include "extrap/estimator.hpp"
#include "extrap/metrics.hpp"
#include "extrap/synthgen.hpp"

namespace extrap {

enum class Method { Ours, SourceOnly };

std::string to_string(Method method);
Method parse_method(const std::string& s);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One experiment: a list of distance cells, n_runs each. JSON keys mirror the
// field names; unknown keys are rejected.
struct ExperimentConfig {
  ShiftMode mode = ShiftMode::Dense;
  Task task = Task::BinaryClassification;
  Method method = Method::Ours;
  std::vector<double> distances = {12, 18, 24, 30};
  std::size_t n_runs = 50;
  std::size_t n_source = 10000;
  LossWeights weights = LossWeights::classification();
  std::uint64_t seed = 0;
  int parallelism = 1;

  int epochs = 25;
  int batch_size = 256;
  double lr = 2e-3;
  int hidden = 32;
  int layers = 4;  // encoder, decoder and generator MLP depth
  bool fresh_generator_per_run = false;

  // Pilot selection of the KL weight per cell (empty: use weights.kl).
  std::vector<double> kl_grid;
  std::size_t pilot_runs = 4;

  // Entropy adaptation applied after training (0: none).
  int adapt_steps = 0;
  double adapt_lr = 2e-3;
  bool adapt_mask = false;
  double adapt_l1_weight = 0.0;

  std::size_t block_id_pairs = 1000;  // 0 skips the score

  // Severity x scope sweep.
  std::vector<int> scopes = {2, 6};
  std::vector<double> severities = {3, 6, 12, 24, 36};

  void validate() const;  // throws ConfigError
  bool operator==(const ExperimentConfig&) const = default;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  // Keys present in `j` replace the corresponding fields.
  void merge_json(const nlohmann::json& j);

  // Paper protocol presets.
  static ExperimentConfig table1(ShiftMode mode, Method method);
  static ExperimentConfig regression(ShiftMode mode, Method method);

  GeneratorSpec generator_spec() const;
  TrainConfig train_config() const;
};

ExperimentConfig load_config(const std::string& path);

// Stream identifiers for keyed RNGs.
namespace stream {
inline constexpr std::uint64_t generator = 1;
inline constexpr std::uint64_t source = 2;
inline constexpr std::uint64_t target = 3;
inline constexpr std::uint64_t init = 4;
inline constexpr std::uint64_t block_id = 5;
inline constexpr std::uint64_t pilot = 6;
}  // namespace stream

// Generator seed for a cell (or for one run with fresh_generator_per_run).
std::uint64_t generator_seed(const ExperimentConfig& cfg, std::size_t cell, std::size_t run);

Generator cell_generator(const ExperimentConfig& cfg, std::size_t cell, std::size_t run);

// Everything one run touches, reproducible from (cfg, cell, run).
struct RunSetup {
  Generator gen;
  Dataset source;
  TargetSample target;
  TrainConfig train;
};

RunSetup prepare_run(const ExperimentConfig& cfg, std::size_t cell, std::size_t run, double kl);

struct RunOutcome {
  RunResult result;
  std::optional<EstimatorModel> model;
  std::vector<LossTerms> trace;
};

// Train (+ adapt), evaluate. Exceptions propagate.
RunOutcome execute_run(const ExperimentConfig& cfg, std::size_t cell, std::size_t run, double kl,
                       bool keep_model = false);

struct KlChoice {
  double kl = 0.0;
  std::vector<double> holdout_accuracy;  // per grid entry
  std::vector<double> reconstruction;    // per grid entry
};

// Picks the KL weight with the best mean held-out source accuracy over pilot
// runs (source/target streams distinct from the real runs); lower mean
// reconstruction breaks ties.
KlChoice tune_kl(const ExperimentConfig& cfg, std::size_t cell);

struct CellSummary {
  double distance = 0.0;
  std::size_t n_runs = 0;
  std::size_t failed = 0;
  double mean = 0.0;       // accuracy or MSE
  double std_error = 0.0;
  double block_id = 0.0;   // NaN when not scored
  double kl = 0.0;
};

struct MatrixResult {
  std::vector<RunResult> rows;  // cell-major, run order
  std::vector<CellSummary> cells;
};

// Runs every (cell, run); aborted runs become failed rows.
MatrixResult run_matrix(const ExperimentConfig& cfg);

void write_results_csv(std::ostream& os, std::span<const RunResult> rows);
std::vector<RunResult> read_results_csv(std::istream& is);

std::vector<CellSummary> summarize(std::span<const RunResult> rows, std::span<const double> distances,
                                   std::span<const double> kls = {});
void write_summary_markdown(std::ostream& os, const ExperimentConfig& cfg, std::span<const CellSummary> cells);

// Severity x scope grid on scoped generators (scope = leading x rows that s
// enters), `cfg.method` per run.
std::vector<GridCell> run_sweep(const ExperimentConfig& cfg);

// Line chart: one polyline per scope, severity on x, mean error on y.
std::string emit_plot(std::span<const GridCell> grid);
std::string emit_plot_csv(std::istream& grid_csv);

// Jacobian index sets, mechanistic dependence and the dense bound for the
// config's generator (cell 0, run 0) and a target at `distance`.
nlohmann::json assumption_report(const ExperimentConfig& cfg, double distance);

}  // namespace extrap
