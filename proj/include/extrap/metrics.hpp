#pragma once

// Per-run results, headline aggregates, block identifiability and the
// severity x scope grid.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "extrap/estimator.hpp"
#include "extrap/synthgen.hpp"

namespace extrap {

struct RunResult {
  ShiftMode mode = ShiftMode::Dense;
  Task task = Task::BinaryClassification;
  double distance = 0.0;
  std::uint64_t seed = 0;
  std::string method;
  bool correct = false;     // classification
  double sq_error = 0.0;    // regression
  double block_id = 0.0;    // NaN when not computed
  bool degenerate = false;
  bool failed = false;      // run aborted; outcome columns are NaN
  std::string error;
  std::string assumption_report;  // path or empty
  std::string loss_trace;         // path or empty
};

class MetricsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Fraction of runs with a correct target prediction. Failed runs count as
// incorrect, so a cell's denominator is always its run count.
double target_accuracy(std::span<const RunResult> results);

// Mean squared target error over the runs that finished (NaN if none did).
double target_mse(std::span<const RunResult> results);

struct BlockIdScore {
  double score = 0.0;
  double epsilon = 0.0;
  bool degenerate = false;
  std::size_t n_pairs = 0;
};

// Pairs (2i, 2i+1) of `codes` {2 n_pairs, d}: fraction where [class equal]
// agrees with [|c1 - c2| <= eps], eps = half the median inter-class centroid
// distance. Degenerate when every code is within eps of every other.
BlockIdScore block_identifiability_score(const Tensor& codes, std::span<const int> classes);

// Draws 2 n_pairs held-out source points from gen and scores the model's
// posterior-mean codes.
BlockIdScore block_identifiability_score(const EstimatorModel& model, const Generator& gen, std::size_t n_pairs,
                                         Rng& rng);

struct GridCell {
  int scope = 0;
  double severity = 0.0;
  double mean_error = 0.0;
  std::size_t n_runs = 0;

  bool operator==(const GridCell&) const = default;
};

// Builds the generator for one scope size (number of x dims the shift touches).
using GeneratorFamily = std::function<Generator(int scope)>;
// Target error (0/1 or squared) of one run at a given severity |s_tgt|.
using RunMethod = std::function<double(const Generator& gen, int scope, double severity, std::size_t run)>;

// Mean error per (scope, severity) cell, n_runs each, rows ordered scope-major.
// Run evaluation is spread over `parallelism` workers; results do not depend
// on it as long as `method` derives its randomness from its arguments.
std::vector<GridCell> severity_scope_sweep(const GeneratorFamily& family, std::span<const double> severities,
                                           std::span<const int> scope_sizes, const RunMethod& method,
                                           std::size_t n_runs = 50, int parallelism = 1);

// Header scope,severity,mean_error,n_runs.
void write_grid_csv(std::ostream& os, std::span<const GridCell> grid);
// Throws MetricsError naming the offending line.
std::vector<GridCell> read_grid_csv(std::istream& is);

// Exact decimal rendering shared by every CSV writer (shortest round-trip).
std::string format_double(double v);

}  // namespace extrap
