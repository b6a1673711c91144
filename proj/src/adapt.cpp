#include "extrap/adapt.hpp"

#include <cmath>
#include <stdexcept>

namespace extrap {

namespace nd = ndgrad;

std::string to_string(UpdateScope scope) {
  return scope == UpdateScope::EncoderOnly ? "encoder_only" : "encoder_and_classifier";
}

UpdateScope parse_update_scope(const std::string& s) {
  if (s == "encoder_only") return UpdateScope::EncoderOnly;
  if (s == "encoder_and_classifier") return UpdateScope::EncoderAndClassifier;
  throw std::invalid_argument("unknown update scope '" + s + "' (expected encoder_only|encoder_and_classifier)");
}

void AdaptConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("adapt: steps must be >= 0");
  if (!(lr >= 0.0)) throw std::invalid_argument("adapt: lr must be >= 0");
  if (!(l1_weight >= 0.0)) throw std::invalid_argument("adapt: l1 weight must be >= 0");
  if (collapse_window < 1) throw std::invalid_argument("adapt: collapse window must be >= 1");
}

double entropy(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("entropy: empty logits");
  Tensor t({1, logits.size()}, std::vector<double>(logits.begin(), logits.end()));
  return nd::entropy(Var::constant(std::move(t))).item();
}

nd::Var mask_sparsity_loss(const nd::Var& mask_logits, double l1_weight) {
  return nd::scale(nd::sum(nd::sigmoid(mask_logits)), l1_weight);
}

double mask_sparsity_loss(std::span<const double> mask_logits, double l1_weight) {
  double acc = 0.0;
  for (double v : mask_logits) acc += 1.0 / (1.0 + std::exp(-v));
  return l1_weight * acc;
}

namespace {

nd::Var head_logits(const EstimatorModel& model, const Tensor& x_std) {
  const Encoded e = model.encode(Var::constant(x_std));
  return model.has_mask() ? model.classify(e.mu_c, e.mu_s) : model.classify(e.mu_c);
}

}  // namespace

double target_entropy(const EstimatorModel& model, const Tensor& x_tgt) {
  return nd::entropy(head_logits(model, model.standardize(x_tgt))).item();
}

AdaptResult adapt_entropy(const EstimatorModel& model, const Tensor& x_tgt, const AdaptConfig& config) {
  config.validate();
  if (model.shape().task != Task::BinaryClassification) throw std::invalid_argument("adapt: entropy needs a classifier head");
  if (x_tgt.rank() != 2 || x_tgt.rows() != 1) throw nd::ShapeError("adapt: x_tgt must be {1, d_x}");

  AdaptResult result{model.clone(), {}, 0, false, {}};
  EstimatorModel& m = result.model;
  if (config.use_mask && !m.has_mask()) m.install_mask();
  const Tensor x_std = m.standardize(x_tgt);

  std::vector<Var> params = m.encoder_parameters();
  if (config.update_scope == UpdateScope::EncoderAndClassifier) {
    auto head = m.classifier_parameters();
    params.insert(params.end(), head.begin(), head.end());
  }
  if (m.has_mask()) params.push_back(*m.mask_logits());
  nd::Adam optimizer(params, config.lr);

  int rising = 0;
  for (int step = 0; step < config.steps; ++step) {
    nd::Var h = nd::sum(nd::entropy(head_logits(m, x_std)));
    result.entropy.push_back(h.item());
    if (step > 0 && result.entropy[step] > result.entropy[step - 1]) {
      if (++rising >= config.collapse_window) {
        result.model = model.clone();
        result.aborted = true;
        result.warning = "entropy rose for " + std::to_string(rising) + " consecutive steps; adaptation abandoned";
        return result;
      }
    } else {
      rising = 0;
    }
    nd::Var objective = h;
    if (m.has_mask() && config.l1_weight > 0.0)
      objective = nd::add(objective, mask_sparsity_loss(*m.mask_logits(), config.l1_weight));
    optimizer.zero_grad();
    nd::backward(objective);
    optimizer.step();
    ++result.steps_taken;
  }
  result.entropy.push_back(target_entropy(m, x_tgt));
  return result;
}

}  // namespace extrap
