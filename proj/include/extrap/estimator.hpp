#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "extrap/ndgrad.hpp"
#include "extrap/rng.hpp"
#include "extrap/synthgen.hpp"

namespace extrap {

struct LossWeights {
  double cls = 1.0;
  double recons = 0.1;
  double tgt_likelihood = 0.1;
  double s_distance = 0.01;  // applied in dense mode only
  double kl = 1e-2;
  double anti_nat = 0.0;
  double mask_l1 = 0.0;  // sparsity on the soft mask, when one is installed

  void validate() const;
  bool operator==(const LossWeights&) const = default;

  static LossWeights classification() { return {}; }
  // Regression uses MSE weight 0.1 and KL weight 0.01 throughout.
  static LossWeights regression() { return {0.1, 0.1, 0.1, 0.01, 0.01, 0.0, 0.0}; }
  // Classification (or regression) loss alone.
  LossWeights source_only() const { return {cls, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0}; }
};

// Diagonal Gaussian mixture over code space.
struct CodeDensity {
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> variances;

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.empty() ? 0 : means[0].size(); }
  double log_density(std::span<const double> code) const;
  // Row-wise log density of codes {n, d} -> {n}, differentiable in the codes.
  ndgrad::Var log_density(const ndgrad::Var& codes) const;
};

inline constexpr double kVarianceFloor = 1e-6;

struct DensityFitOptions {
  int max_iterations = 50;
  double tolerance = 1e-6;  // change in mean log-likelihood
  int max_retries = 5;
};

class DensityFitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// EM fit of a K-component diagonal GMM. With labels, component k starts at the
// mean of codes labelled k (K must equal the label count); otherwise k-means++.
CodeDensity fit_code_density(const Tensor& codes, int k, std::span<const int> labels, Rng& rng,
                             const DensityFitOptions& options = {});

struct DenseParams {
  ndgrad::Var weight;  // {in, out}
  ndgrad::Var bias;    // {out}
};

struct ModelShape {
  int d_c = 4;
  int d_s = 2;
  int d_x = 6;
  int hidden = 32;
  int encoder_layers = 4;
  int decoder_layers = 4;
  int classifier_hidden_layers = 1;
  Task task = Task::BinaryClassification;
  int classes = 2;
  double alpha = 0.2;

  int d_z() const { return d_c + d_s; }
  int head_outputs() const { return task == Task::BinaryClassification ? classes : 1; }
  bool operator==(const ModelShape&) const = default;
};

struct Encoded {
  ndgrad::Var mu_c, logvar_c, mu_s, logvar_s;
};

struct Prediction {
  std::vector<double> outputs;  // logits (classification) or the scalar estimate
  std::vector<double> c_hat;
  std::vector<double> s_hat;
  int label = 0;                // argmax of logits
  double value = 0.0;           // regression estimate
};

class EstimatorModel {
 public:
  EstimatorModel() = default;
  EstimatorModel(const ModelShape& shape, Rng& init_rng);

  const ModelShape& shape() const { return shape_; }

  // Inputs are standardized with these before encoding; reconstruction
  // targets live in the standardized space.
  void set_standardization(std::vector<double> mean, std::vector<double> scale);
  const std::vector<double>& input_mean() const { return input_mean_; }
  const std::vector<double>& input_scale() const { return input_scale_; }
  Tensor standardize(const Tensor& x) const;

  Encoded encode(const ndgrad::Var& x_std) const;
  ndgrad::Var decode(const ndgrad::Var& c, const ndgrad::Var& s) const;
  // Classifier head on codes. With a mask installed the input is m * [c, s].
  ndgrad::Var classify(const ndgrad::Var& c) const;
  ndgrad::Var classify(const ndgrad::Var& c, const ndgrad::Var& s) const;

  Prediction predict(std::span<const double> x) const;
  std::vector<Prediction> predict(const Tensor& xs) const;
  // Posterior means of c for raw inputs {n, d_x} -> {n, d_c}.
  Tensor codes(const Tensor& xs) const;
  // One reparameterized draw of c per row.
  Tensor sampled_codes(const Tensor& xs, Rng& rng) const;

  std::vector<ndgrad::Var> parameters() const;
  std::vector<ndgrad::Var> encoder_parameters() const;
  std::vector<ndgrad::Var> classifier_parameters() const;

  bool has_mask() const { return mask_logits_.has_value(); }
  const std::optional<ndgrad::Var>& mask_logits() const { return mask_logits_; }
  // Widens the classifier input to d_z (new s rows zero) and adds mask logits.
  void install_mask(double initial_logit = 0.0);
  std::vector<double> mask_values() const;

  CodeDensity& density() { return density_; }
  const CodeDensity& density() const { return density_; }

  // Deep copy; parameters share no storage with the original.
  EstimatorModel clone() const;

  nlohmann::json to_json() const;
  static EstimatorModel from_json(const nlohmann::json& j);

  // Flat copy of every parameter value, in parameters() order.
  std::vector<double> flat_parameters() const;

 private:
  ModelShape shape_;
  std::vector<DenseParams> encoder_, decoder_, classifier_;
  std::optional<ndgrad::Var> mask_logits_;
  std::vector<double> input_mean_, input_scale_;
  CodeDensity density_;
};

struct LossTerms {
  double reconstruction = 0.0;
  double kl = 0.0;
  double naturalness = 0.0;
  double classification = 0.0;
  double anti_naturalness = 0.0;
  double s_distance = 0.0;
  double mask = 0.0;
  double total = 0.0;

  LossTerms& operator+=(const LossTerms& o);
  LossTerms scaled(double f) const;
};

struct LossResult {
  ndgrad::Var total;
  LossTerms terms;  // weighted contributions
};

struct SourceBatch {
  Tensor xs;                        // raw {n, d_x}
  std::span<const int> classes;     // classification
  std::span<const double> values;   // regression
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::vector<LossTerms> trace)
      : std::runtime_error(what), trace(std::move(trace)) {}
  std::vector<LossTerms> trace;
};

// Full objective. `noise` drives the reparameterized samples; nullptr uses
// posterior means. `x_tgt` may be null for source-only batches.
LossResult loss(const EstimatorModel& model, const SourceBatch& batch, const Tensor* x_tgt,
                const LossWeights& weights, ShiftMode mode, Rng* noise);

struct TrainConfig {
  ShiftMode mode = ShiftMode::Dense;
  Task task = Task::BinaryClassification;
  LossWeights weights;
  int epochs = 25;
  int batch_size = 256;
  double lr = 2e-3;
  int density_components = 0;  // 0: number of classes, or 5 for regression
  ModelShape shape;            // task/dims synced from the data
  std::uint64_t seed = 0;
  double divergence_limit = 1e6;
  bool use_mask = false;  // soft mask on [c, s] before the head
};

struct TrainResult {
  EstimatorModel model;
  std::vector<LossTerms> trace;  // per-epoch means
};

TrainResult train(const Dataset& source, const Tensor* x_tgt, const TrainConfig& config);

// Target-free Gaussian for anti-naturalness: standard normal density.
double standard_normal_density(std::span<const double> s);

void write_loss_trace_csv(std::ostream& os, std::span<const LossTerms> trace);

}  // namespace extrap
