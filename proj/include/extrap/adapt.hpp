#pragma once

// Source-free adaptation: entropy minimization on a single target input, with
// an optional sparsity-regularized soft mask on the codes.

#include <span>
#include <string>
#include <vector>

#include "extrap/estimator.hpp"

namespace extrap {

enum class UpdateScope { EncoderOnly, EncoderAndClassifier };

std::string to_string(UpdateScope scope);
UpdateScope parse_update_scope(const std::string& s);

struct AdaptConfig {
  int steps = 1;
  double lr = 2e-3;
  UpdateScope update_scope = UpdateScope::EncoderAndClassifier;
  bool use_mask = false;
  double l1_weight = 0.0;
  int collapse_window = 10;  // consecutive entropy increases that abort

  void validate() const;
};

struct AdaptResult {
  EstimatorModel model;          // adapted copy (original on abort)
  std::vector<double> entropy;   // H before each step, then after the last
  int steps_taken = 0;
  bool aborted = false;
  std::string warning;
};

// Softmax entropy of one logit vector, log-probabilities floored at 1e-12.
double entropy(std::span<const double> logits);

// l1_weight * sum of the sigmoid mask entries.
double mask_sparsity_loss(std::span<const double> mask_logits, double l1_weight);
ndgrad::Var mask_sparsity_loss(const ndgrad::Var& mask_logits, double l1_weight);

// Entropy of the head at the target's posterior means.
double target_entropy(const EstimatorModel& model, const Tensor& x_tgt);

// Adam on H(f_cls(c_hat(x_tgt))) (+ mask l1). Never touches source data; the
// input model is left untouched.
AdaptResult adapt_entropy(const EstimatorModel& model, const Tensor& x_tgt, const AdaptConfig& config);

}  // namespace extrap
