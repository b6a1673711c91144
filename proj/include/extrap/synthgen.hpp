#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "extrap/ndgrad.hpp"
#include "extrap/rng.hpp"

namespace extrap {

using ndgrad::Tensor;
using ndgrad::Var;

enum class ShiftMode { Dense, Sparse };
enum class Task { BinaryClassification, Regression };

std::string to_string(ShiftMode mode);
std::string to_string(Task task);
ShiftMode parse_shift_mode(const std::string& s);
Task parse_task(const std::string& s);

struct GeneratorSpec {
  int d_c = 4;
  int d_s = 2;
  int d_x = 6;
  ShiftMode mode = ShiftMode::Dense;
  Task task = Task::BinaryClassification;
  int mlp_layers = 4;
  double condition_limit = 10.0;
  double radius = 2.0;  // truncation radius of p(s|c)
  std::uint64_t seed = 0;

  int d_z() const { return d_c + d_s; }
  void validate() const;  // throws std::invalid_argument
};

// x -> x W + b, W stored {in, out}.
struct AffineLayer {
  Tensor weight;
  Tensor bias;
};

// Affine layers with leaky-ReLU between them (none after the last).
struct Mlp {
  std::vector<AffineLayer> layers;
  double alpha = 0.2;

  Var apply(const Var& x) const;
  std::size_t in_dim() const { return layers.front().weight.rows(); }
  std::size_t out_dim() const { return layers.back().weight.cols(); }
};

namespace mechanism {

// x = mlp([c, s])
struct Dense {
  Mlp mlp;
};

// v = mlp(c); x = [v, v[duplicated] + s]
struct Sparse {
  Mlp mlp;
  std::vector<std::size_t> duplicated;
};

// x = mlp(c) + s * mixing, where mixing {d_s, d_x} is zero outside `rows`.
struct Scoped {
  Mlp mlp;
  Tensor mixing;
  std::vector<std::size_t> rows;
};

// x = [c + beta * max(0, |s| - radius) * direction, s]. Identity on the
// source support; the s-leak into the c coordinates only switches on outside.
struct BoundaryLeak {
  double beta = 1.0;
  std::vector<double> direction;  // unit vector in R^{d_c}
};

}  // namespace mechanism

using Mechanism = std::variant<mechanism::Dense, mechanism::Sparse, mechanism::Scoped, mechanism::BoundaryLeak>;

struct LatentSample {
  std::vector<double> c;
  std::vector<double> s;

  std::vector<double> z() const;
};

class Generator {
 public:
  Generator(GeneratorSpec spec, Mechanism mechanism, std::vector<std::vector<double>> class_embeddings);

  // Identity map on z (requires d_x == d_z); class embeddings drawn from spec.seed.
  static Generator identity(const GeneratorSpec& spec);
  // x = z A with A {d_z, d_x}.
  static Generator linear(const GeneratorSpec& spec, Tensor a);

  // z {n, d_z} -> x {n, d_x}. Differentiable through ndgrad.
  Var apply(const Var& z) const;
  Tensor apply(const Tensor& z) const;
  std::vector<double> apply(const LatentSample& latent) const;

  const GeneratorSpec& spec() const { return spec_; }
  const Mechanism& mechanism() const { return mechanism_; }
  const std::vector<std::vector<double>>& class_embeddings() const { return class_embeddings_; }
  double radius() const { return spec_.radius; }
  double output_scale() const { return output_scale_; }

  // Spectral condition number of each weight matrix.
  std::vector<double> layer_condition_numbers() const;

  // Same mechanism with every output multiplied by `factor`.
  Generator scaled(double factor) const;

 private:
  GeneratorSpec spec_;
  Mechanism mechanism_;
  std::vector<std::vector<double>> class_embeddings_;
  double output_scale_ = 1.0;
};

class GeneratorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Random dense or sparse generator per spec.mode. Each weight matrix is
// redrawn until its condition number is within spec.condition_limit.
Generator build_generator(const GeneratorSpec& spec);

// c-only MLP into all d_x outputs; s enters linearly on `scope_rows` only.
// spec.mode is ignored.
Generator build_scoped_generator(const GeneratorSpec& spec, std::vector<std::size_t> scope_rows);

// Identity-like generator with the boundary leak; direction points from the
// first class embedding to the second.
Generator build_boundary_leak_generator(const GeneratorSpec& spec, double beta);

double condition_number(const Tensor& matrix);

struct Dataset {
  Task task = Task::BinaryClassification;
  Tensor xs;                    // {n, d_x}
  std::vector<int> classes;     // classification labels
  std::vector<double> values;   // regression targets
  std::vector<LatentSample> latents;

  std::size_t size() const { return latents.size(); }
  Dataset subset(std::span<const std::size_t> indices) const;
};

struct TargetSample {
  Tensor x;  // {1, d_x}
  int label = 0;
  double value = 0.0;
  LatentSample latent;
  double distance = 0.0;
};

// Truncated standard normal in R^d, |s| <= radius, by rejection.
std::vector<double> sample_truncated_normal(std::size_t d, double radius, Rng& rng);

Dataset sample_source(const Generator& gen, std::size_t n, Rng& rng);

// distance must be 0 or beyond the truncation radius.
TargetSample sample_target(const Generator& gen, double distance, Rng& rng);

// CSV layout: x0..x{d_x-1},label,c0..c{d_c-1},s0..s{d_s-1}
void write_dataset_csv(std::ostream& os, const Dataset& data);
Dataset read_dataset_csv(std::istream& is, const GeneratorSpec& spec);

}  // namespace extrap
