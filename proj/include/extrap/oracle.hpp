#pragma once

// Ground-truth checks on a generator: Jacobians, influenced index sets,
// spectral bounds, manifold distances and rank conditions.

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "extrap/estimator.hpp"
#include "extrap/synthgen.hpp"

namespace extrap::oracle {

using Indices = std::vector<std::size_t>;

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class JacobianMethod { Analytic, FiniteDiff };

// d_x x d_z Jacobian of the generator at z. Finite differences are central
// with step h.
Tensor jacobian(const Generator& gen, std::span<const double> z, JacobianMethod method = JacobianMethod::Analytic,
                double h = 1e-5);

struct IndexSets {
  Indices I_s;          // rows touched by some s column
  Indices I_c;          // rows touched by some c column
  Indices I_c_minus_s;  // I_c without I_s
};

IndexSets influenced_indices(const Tensor& J, std::size_t d_c, double tol = 1e-6);

struct JacobianReport {
  LatentSample z;
  Tensor J;
  IndexSets sets;
  double tol = 1e-6;
};

JacobianReport jacobian_report(const Generator& gen, const LatentSample& z, double tol = 1e-6);

// Largest singular value by power iteration on J^T J.
double spectral_norm(const Tensor& J, int max_iterations = 50, double tol = 1e-10);

// Singular values in descending order (SVD), for cross-checks.
std::vector<double> singular_values(const Tensor& J);

// Numerical rank: singular values above rel_tol * sigma_max.
std::size_t numerical_rank(const Tensor& J, double rel_tol = 1e-8);

// Rows `rows` of J, all columns.
Tensor select_rows(const Tensor& J, std::span<const std::size_t> rows);

struct SpectralBound {
  double J_u = 0.0;
  std::size_t n_points = 0;
};

// Max spectral norm of J over n_samples support points drawn from the source
// latent distribution, plus any `extra` points (e.g. target segment ends).
SpectralBound spectral_bound(const Generator& gen, std::size_t n_samples, Rng& rng,
                             std::span<const LatentSample> extra = {});

// Max spectral norm over an explicit point set.
SpectralBound spectral_bound(const Generator& gen, std::span<const LatentSample> points);

struct ManifoldDistance {
  double value = 0.0;
  bool intersect = false;  // manifolds met numerically; value reported as 0
  std::vector<double> s1, s2;
};

// min over |s1| = |s2| = radius of |g(c1, s1) - g(c2, s2)|: grid of
// n_boundary points per sphere, then projected gradient refinement.
ManifoldDistance manifold_distance(const Generator& gen, std::span<const double> c1, std::span<const double> c2,
                                   std::size_t n_boundary = 64);

struct DenseBoundOptions {
  std::size_t n_support = 1000;
  std::size_t n_boundary = 64;
  std::uint64_t seed = 0;
};

struct DenseBoundReport {
  double J_u = 0.0;
  double D_min = 0.0;
  double bound = 0.0;     // D_min / (2 J_u)
  double distance = 0.0;  // max(0, |s_tgt| - radius)
  bool satisfied = false;
  std::size_t n_points = 0;

  nlohmann::json to_json() const;
};

// Assembles the report from its parts; satisfied == distance <= bound.
DenseBoundReport make_dense_bound_report(double J_u, double D_min, double distance);

DenseBoundReport check_dense_bound(const Generator& gen, std::span<const double> s_tgt, std::span<const double> c_tgt,
                                   const DenseBoundOptions& options = {});

struct PartitionResult {
  Indices first, second;
  std::size_t rank_all = 0, rank_first = 0, rank_second = 0;
  bool dependent = false;  // rank_all < rank_first + rank_second
};

// Every unordered split of `rows` into two nonempty parts (2^(m-1) - 1).
std::vector<std::pair<Indices, Indices>> nontrivial_partitions(std::span<const std::size_t> rows);

// Rank sub-additivity of J over each split of `rows`.
std::vector<PartitionResult> mechanistic_dependence(const Tensor& J, std::span<const std::size_t> rows,
                                                    double rel_tol = 1e-8);

// Same, on the I_{c\s} rows of the generator Jacobian at z.
std::vector<PartitionResult> mechanistic_dependence_check(const Generator& gen, const LatentSample& z,
                                                          double rel_tol = 1e-8, double index_tol = 1e-6);

// A smooth invertible latent model: encode maps x to z_hat, decode maps
// z_hat back (differentiably).
class LatentModel {
 public:
  virtual ~LatentModel() = default;
  virtual std::size_t d_z() const = 0;
  virtual std::vector<double> encode(std::span<const double> x) const = 0;
  virtual Var decode(const Var& z_hat) const = 0;
};

// Least-squares inversion of the generator by damped Gauss-Newton.
struct InversionResult {
  std::vector<double> z;
  double residual = 0.0;
  int iterations = 0;
};
InversionResult invert(const Generator& gen, std::span<const double> x, std::span<const double> z0,
                       int max_iterations = 100, double tol = 1e-12);

// The generator itself, inverted numerically.
class GeneratorModel : public LatentModel {
 public:
  explicit GeneratorModel(Generator gen) : gen_(std::move(gen)) {}
  std::size_t d_z() const override { return static_cast<std::size_t>(gen_.spec().d_z()); }
  std::vector<double> encode(std::span<const double> x) const override;
  Var decode(const Var& z_hat) const override { return gen_.apply(z_hat); }

 private:
  Generator gen_;
};

// g(M z_hat) for an invertible {d_z, d_z} map M (row-vector convention).
class ComposedModel : public LatentModel {
 public:
  ComposedModel(Generator gen, Tensor map);
  std::size_t d_z() const override { return static_cast<std::size_t>(gen_.spec().d_z()); }
  std::vector<double> encode(std::span<const double> x) const override;
  Var decode(const Var& z_hat) const override;

 private:
  Generator gen_;
  Tensor map_, inverse_;
};

// Trained estimator: posterior means out, decoder in (standardized x space;
// the per-row scaling leaves row-set ranks unchanged).
class EstimatorLatentModel : public LatentModel {
 public:
  explicit EstimatorLatentModel(const EstimatorModel& model) : model_(&model) {}
  std::size_t d_z() const override { return static_cast<std::size_t>(model_->shape().d_z()); }
  std::vector<double> encode(std::span<const double> x) const override;
  Var decode(const Var& z_hat) const override;

 private:
  const EstimatorModel* model_;
};

// Jacobian of a latent model's decoder at z_hat (analytic).
Tensor decoder_jacobian(const LatentModel& model, std::span<const double> z_hat);

struct RankEqualityReport {
  std::size_t mismatches = 0;  // at the primary tolerance
  std::size_t comparisons = 0;
  double rel_tol = 1e-8;
  // Mismatch counts across the tolerance sweep 1e-6 .. 1e-10.
  std::vector<std::pair<double, std::size_t>> sweep;
};

RankEqualityReport rank_equality_check(const Generator& gen, const LatentModel& model, std::size_t n_points,
                                       std::span<const Indices> row_sets, Rng& rng, double rel_tol = 1e-8);

}  // namespace extrap::oracle
