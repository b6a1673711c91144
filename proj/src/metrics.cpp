#include "extrap/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "extrap/parallel.hpp"

namespace extrap {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

double target_accuracy(std::span<const RunResult> results) {
  if (results.empty()) throw MetricsError("target_accuracy: no runs");
  std::size_t correct = 0;
  for (const auto& r : results) {
    if (r.task != Task::BinaryClassification) throw MetricsError("target_accuracy: regression run in cell");
    correct += (!r.failed && r.correct) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(results.size());
}

double target_mse(std::span<const RunResult> results) {
  if (results.empty()) throw MetricsError("target_mse: no runs");
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : results) {
    if (r.task != Task::Regression) throw MetricsError("target_mse: classification run in cell");
    if (r.failed) continue;
    total += r.sq_error;
    ++n;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(n);
}

namespace {

double distance(const Tensor& codes, std::size_t i, std::size_t j) {
  double acc = 0.0;
  for (std::size_t k = 0; k < codes.cols(); ++k) {
    const double d = codes.at(i, k) - codes.at(j, k);
    acc += d * d;
  }
  return std::sqrt(acc);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BlockIdScore block_identifiability_score(const Tensor& codes, std::span<const int> classes) {
  if (codes.rank() != 2) throw ndgrad::ShapeError("block_identifiability_score: codes must be {n, d}");
  const std::size_t n = codes.rows(), d = codes.cols();
  if (classes.size() != n) throw MetricsError("block_identifiability_score: one class per code required");
  if (n < 2 || n % 2 != 0) throw MetricsError("block_identifiability_score: need an even number (>= 2) of codes");

  std::map<int, std::pair<std::vector<double>, std::size_t>> centroids;
  for (std::size_t i = 0; i < n; ++i) {
    auto& [sum, count] = centroids[classes[i]];
    sum.resize(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) sum[k] += codes.at(i, k);
    ++count;
  }
  if (centroids.size() < 2) throw MetricsError("block_identifiability_score: need at least two classes");
  std::vector<std::vector<double>> means;
  for (auto& [label, entry] : centroids) {
    for (double& v : entry.first) v /= static_cast<double>(entry.second);
    means.push_back(entry.first);
  }
  std::vector<double> gaps;
  for (std::size_t a = 0; a < means.size(); ++a)
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += (means[a][k] - means[b][k]) * (means[a][k] - means[b][k]);
      gaps.push_back(std::sqrt(acc));
    }

  BlockIdScore out;
  out.epsilon = 0.5 * median(gaps);
  out.n_pairs = n / 2;
  std::size_t agree = 0;
  for (std::size_t p = 0; p < out.n_pairs; ++p) {
    const bool same_class = classes[2 * p] == classes[2 * p + 1];
    const bool same_code = distance(codes, 2 * p, 2 * p + 1) <= out.epsilon;
    agree += same_class == same_code ? 1 : 0;
  }
  out.score = static_cast<double>(agree) / static_cast<double>(out.n_pairs);

  double spread = 0.0;
  for (std::size_t i = 0; i < n && spread <= out.epsilon; ++i)
    for (std::size_t j = i + 1; j < n; ++j) spread = std::max(spread, distance(codes, i, j));
  out.degenerate = spread <= out.epsilon;
  return out;
}

BlockIdScore block_identifiability_score(const EstimatorModel& model, const Generator& gen, std::size_t n_pairs,
                                         Rng& rng) {
  if (gen.spec().task != Task::BinaryClassification)
    throw MetricsError("block_identifiability_score: needs a discrete invariant variable");
  if (n_pairs == 0) throw MetricsError("block_identifiability_score: n_pairs must be positive");
  const Dataset held_out = sample_source(gen, 2 * n_pairs, rng);
  return block_identifiability_score(model.codes(held_out.xs), held_out.classes);
}

std::vector<GridCell> severity_scope_sweep(const GeneratorFamily& family, std::span<const double> severities,
                                           std::span<const int> scope_sizes, const RunMethod& method,
                                           std::size_t n_runs, int parallelism) {
  if (severities.empty() || scope_sizes.empty()) throw MetricsError("severity_scope_sweep: empty grid");
  if (n_runs == 0) throw MetricsError("severity_scope_sweep: n_runs must be positive");
  std::vector<Generator> generators;
  for (int scope : scope_sizes) generators.push_back(family(scope));

  const std::size_t n_cells = scope_sizes.size() * severities.size();
  std::vector<double> errors(n_cells * n_runs, 0.0);
  parallel_for(errors.size(), parallelism, [&](std::size_t job) {
    const std::size_t cell = job / n_runs, run = job % n_runs;
    const std::size_t si = cell / severities.size(), vi = cell % severities.size();
    errors[job] = method(generators[si], scope_sizes[si], severities[vi], run);
  });

  std::vector<GridCell> grid;
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    // Fixed summation order keeps the means independent of scheduling.
    double total = 0.0;
    for (std::size_t run = 0; run < n_runs; ++run) total += errors[cell * n_runs + run];
    grid.push_back({scope_sizes[cell / severities.size()], severities[cell % severities.size()],
                    total / static_cast<double>(n_runs), n_runs});
  }
  return grid;
}

void write_grid_csv(std::ostream& os, std::span<const GridCell> grid) {
  os << "scope,severity,mean_error,n_runs\n";
  for (const auto& c : grid)
    os << c.scope << ',' << format_double(c.severity) << ',' << format_double(c.mean_error) << ',' << c.n_runs
       << '\n';
}

namespace {

template <typename T>
T parse_field(const std::string& field, std::size_t line, const char* name) {
  T value{};
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end)
    throw MetricsError("grid csv line " + std::to_string(line) + ": bad " + name + " '" + field + "'");
  return value;
}

}  // namespace

std::vector<GridCell> read_grid_csv(std::istream& is) {
  std::string text;
  std::size_t line_no = 0;
  if (!std::getline(is, text)) throw MetricsError("grid csv line 1: missing header");
  ++line_no;
  if (!text.empty() && text.back() == '\r') text.pop_back();
  if (text != "scope,severity,mean_error,n_runs")
    throw MetricsError("grid csv line 1: expected header scope,severity,mean_error,n_runs");
  std::vector<GridCell> grid;
  while (std::getline(is, text)) {
    ++line_no;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(text);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    if (fields.size() != 4 || text.back() == ',')
      throw MetricsError("grid csv line " + std::to_string(line_no) + ": expected 4 fields");
    GridCell cell;
    cell.scope = parse_field<int>(fields[0], line_no, "scope");
    cell.severity = parse_field<double>(fields[1], line_no, "severity");
    cell.mean_error = parse_field<double>(fields[2], line_no, "mean_error");
    cell.n_runs = parse_field<std::size_t>(fields[3], line_no, "n_runs");
    grid.push_back(cell);
  }
  return grid;
}

}  // namespace extrap
