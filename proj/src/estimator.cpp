#include "extrap/estimator.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

namespace extrap {

namespace nd = ndgrad;
using nlohmann::json;

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {cls, recons, tgt_likelihood, s_distance, kl, anti_nat, mask_l1})
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and >= 0");
}

// ---------------------------------------------------------------- density

double CodeDensity::log_density(std::span<const double> code) const {
  std::vector<double> parts(components());
  for (std::size_t k = 0; k < components(); ++k) {
    double acc = std::log(weights[k]);
    for (std::size_t j = 0; j < dim(); ++j) {
      const double diff = code[j] - means[k][j];
      acc += -kHalfLog2Pi - 0.5 * std::log(variances[k][j]) - 0.5 * diff * diff / variances[k][j];
    }
    parts[k] = acc;
  }
  return log_sum_exp(parts);
}

nd::Var CodeDensity::log_density(const nd::Var& codes) const {
  const auto& x = codes.value();
  if (x.rank() != 2 || x.cols() != dim())
    throw nd::ShapeError("code density of dim " + std::to_string(dim()) + " applied to " + nd::to_string(x.shape()));
  const std::size_t n = x.rows(), d = dim(), kk = components();
  Tensor out({n});
  Tensor resp({n, kk});
  std::vector<double> parts(kk);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < kk; ++k) {
      double acc = std::log(weights[k]);
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = x.at(i, j) - means[k][j];
        acc += -kHalfLog2Pi - 0.5 * std::log(variances[k][j]) - 0.5 * diff * diff / variances[k][j];
      }
      parts[k] = acc;
    }
    const double lse = log_sum_exp(parts);
    out[i] = lse;
    for (std::size_t k = 0; k < kk; ++k) resp.at(i, k) = std::exp(parts[k] - lse);
  }
  return nd::make_op("log_mixture_density", std::move(out), {codes},
                     [resp = std::move(resp), self_density = *this, n, d, kk](nd::Node& self) {
                       const auto& x = self.parents[0]->value;
                       auto& g = self.parent_grad(0);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t k = 0; k < kk; ++k) {
                           const double r = resp.at(i, k) * self.grad[i];
                           for (std::size_t j = 0; j < d; ++j)
                             g.at(i, j) += r * (self_density.means[k][j] - x.at(i, j)) / self_density.variances[k][j];
                         }
                     });
}

namespace {

std::vector<std::vector<double>> kmeans_plus_plus(const Tensor& codes, int k, Rng& rng) {
  const std::size_t n = codes.rows(), d = codes.cols();
  std::vector<std::vector<double>> centers;
  auto row = [&](std::size_t i) {
    return std::vector<double>(codes.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                               codes.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  };
  centers.push_back(row(rng.index(n)));
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    const auto& last = centers.back();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += (codes.at(i, j) - last[j]) * (codes.at(i, j) - last[j]);
      dist[i] = std::min(dist[i], acc);
      total += dist[i];
    }
    if (total <= 0.0) {
      centers.push_back(row(rng.index(n)));
      continue;
    }
    double pick = rng.uniform() * total;
    std::size_t chosen = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      pick -= dist[i];
      if (pick <= 0.0) {
        chosen = i;
        break;
      }
    }
    centers.push_back(row(chosen));
  }
  return centers;
}

}  // namespace

CodeDensity fit_code_density(const Tensor& codes, int k, std::span<const int> labels, Rng& rng,
                             const DensityFitOptions& options) {
  if (codes.rank() != 2) throw nd::ShapeError("fit_code_density: codes must be a matrix");
  const std::size_t n = codes.rows(), d = codes.cols();
  if (k < 1 || n < static_cast<std::size_t>(k))
    throw std::invalid_argument("fit_code_density: need n >= K >= 1 (n=" + std::to_string(n) + ", K=" + std::to_string(k) + ")");
  const auto kk = static_cast<std::size_t>(k);

  std::vector<double> global_mean(d, 0.0), global_var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) global_mean[j] += codes.at(i, j) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      global_var[j] += (codes.at(i, j) - global_mean[j]) * (codes.at(i, j) - global_mean[j]) / static_cast<double>(n);
  for (auto& v : global_var) v = std::max(v, kVarianceFloor);

  CodeDensity g;
  g.weights.assign(kk, 1.0 / static_cast<double>(kk));
  g.variances.assign(kk, global_var);
  if (!labels.empty()) {
    if (labels.size() != n) throw nd::ShapeError("fit_code_density: label count does not match codes");
    g.means.assign(kk, std::vector<double>(d, 0.0));
    std::vector<double> counts(kk, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const int y = labels[i];
      if (y < 0 || y >= k) throw std::invalid_argument("fit_code_density: label outside [0, K)");
      counts[y] += 1.0;
      for (std::size_t j = 0; j < d; ++j) g.means[y][j] += codes.at(i, j);
    }
    for (std::size_t c = 0; c < kk; ++c) {
      if (counts[c] == 0.0) {
        g.means[c] = kmeans_plus_plus(codes, 1, rng)[0];
        continue;
      }
      for (auto& v : g.means[c]) v /= counts[c];
      g.weights[c] = counts[c] / static_cast<double>(n);
    }
    std::vector<std::vector<double>> var(kk, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = codes.at(i, j) - g.means[labels[i]][j];
        var[labels[i]][j] += diff * diff;
      }
    for (std::size_t c = 0; c < kk; ++c)
      if (counts[c] > 1.0)
        for (std::size_t j = 0; j < d; ++j) g.variances[c][j] = std::max(var[c][j] / counts[c], kVarianceFloor);
  } else {
    g.means = kmeans_plus_plus(codes, k, rng);
  }

  using Mat = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic>;
  const Mat x = Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      codes.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const auto ki = static_cast<Eigen::Index>(kk);
  Mat parts(x.rows(), ki), resp(x.rows(), ki);
  double previous = -std::numeric_limits<double>::infinity();
  int retries = 0;
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    // E-step
    for (std::size_t c = 0; c < kk; ++c) {
      double offset = std::log(g.weights[c]);
      Eigen::ArrayXd mu(static_cast<Eigen::Index>(d)), inv(static_cast<Eigen::Index>(d));
      for (std::size_t j = 0; j < d; ++j) {
        offset -= kHalfLog2Pi + 0.5 * std::log(g.variances[c][j]);
        mu[static_cast<Eigen::Index>(j)] = g.means[c][j];
        inv[static_cast<Eigen::Index>(j)] = 1.0 / g.variances[c][j];
      }
      const auto ci = static_cast<Eigen::Index>(c);
      parts.col(ci) = offset - 0.5 * ((x.rowwise() - mu.transpose()).square().rowwise() * inv.transpose()).rowwise().sum();
    }
    const Eigen::ArrayXd top = parts.rowwise().maxCoeff();
    resp = (parts.colwise() - top).exp();
    const Eigen::ArrayXd total = resp.rowwise().sum();
    resp.colwise() /= total;
    const double loglik = (top + total.log()).mean();
    if (std::abs(loglik - previous) < options.tolerance) break;
    previous = loglik;

    // M-step
    bool reinitialized = false;
    for (std::size_t c = 0; c < kk; ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      const double nk = resp.col(ci).sum();
      if (nk < 1e-8) {
        if (++retries > options.max_retries)
          throw DensityFitError("fit_code_density: component " + std::to_string(c) + " stayed empty after " +
                                std::to_string(options.max_retries) + " re-initializations");
        const std::size_t pick = rng.index(n);
        for (std::size_t j = 0; j < d; ++j) g.means[c][j] = codes.at(pick, j);
        g.variances[c] = global_var;
        g.weights[c] = 1.0 / static_cast<double>(kk);
        reinitialized = true;
        continue;
      }
      g.weights[c] = nk / static_cast<double>(n);
      for (std::size_t j = 0; j < d; ++j) {
        const auto ji = static_cast<Eigen::Index>(j);
        const double m = (resp.col(ci) * x.col(ji)).sum() / nk;
        const double v = (resp.col(ci) * (x.col(ji) - m).square()).sum() / nk;
        g.means[c][j] = m;
        g.variances[c][j] = std::max(v, kVarianceFloor);
      }
    }
    if (reinitialized) {
      const double sum = std::accumulate(g.weights.begin(), g.weights.end(), 0.0);
      for (auto& w : g.weights) w /= sum;
      previous = -std::numeric_limits<double>::infinity();
    }
  }
  return g;
}

// ---------------------------------------------------------------- model

namespace {

DenseParams make_dense(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w({in, out});
  for (auto& v : w.storage()) v = rng.uniform(-bound, bound);
  Tensor b({out});
  for (auto& v : b.storage()) v = rng.uniform(-bound, bound);
  return {nd::Var::parameter(std::move(w)), nd::Var::parameter(std::move(b))};
}

std::vector<DenseParams> make_stack(std::size_t in, std::size_t hidden, std::size_t out, int layers, Rng& rng) {
  std::vector<DenseParams> stack;
  for (int i = 0; i < layers; ++i) {
    const std::size_t a = i == 0 ? in : hidden;
    const std::size_t b = i + 1 == layers ? out : hidden;
    stack.push_back(make_dense(a, b, rng));
  }
  return stack;
}

nd::Var run_stack(const std::vector<DenseParams>& stack, nd::Var h, double alpha) {
  for (std::size_t i = 0; i < stack.size(); ++i) {
    h = nd::affine(h, stack[i].weight, stack[i].bias);
    if (i + 1 < stack.size()) h = nd::leaky_relu(h, alpha);
  }
  return h;
}

std::vector<DenseParams> clone_stack(const std::vector<DenseParams>& stack) {
  std::vector<DenseParams> out;
  for (const auto& layer : stack)
    out.push_back({nd::Var::parameter(layer.weight.value()), nd::Var::parameter(layer.bias.value())});
  return out;
}

json stack_to_json(const std::vector<DenseParams>& stack) {
  json arr = json::array();
  for (const auto& layer : stack) {
    arr.push_back({{"shape", {layer.weight.value().rows(), layer.weight.value().cols()}},
                   {"weight", layer.weight.value().storage()},
                   {"bias", layer.bias.value().storage()}});
  }
  return arr;
}

std::vector<DenseParams> stack_from_json(const json& arr) {
  std::vector<DenseParams> stack;
  for (const auto& layer : arr) {
    const auto shape = layer.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw std::runtime_error("checkpoint: layer shape must have two entries");
    Tensor w({shape[0], shape[1]}, layer.at("weight").get<std::vector<double>>());
    Tensor b({shape[1]}, layer.at("bias").get<std::vector<double>>());
    stack.push_back({nd::Var::parameter(std::move(w)), nd::Var::parameter(std::move(b))});
  }
  return stack;
}

}  // namespace

EstimatorModel::EstimatorModel(const ModelShape& shape, Rng& init_rng) : shape_(shape) {
  const auto dx = static_cast<std::size_t>(shape.d_x);
  const auto dc = static_cast<std::size_t>(shape.d_c);
  const auto dz = static_cast<std::size_t>(shape.d_z());
  const auto h = static_cast<std::size_t>(shape.hidden);
  encoder_ = make_stack(dx, h, 2 * dz, shape.encoder_layers, init_rng);
  decoder_ = make_stack(dz, h, dx, shape.decoder_layers, init_rng);
  classifier_ = make_stack(dc, h, static_cast<std::size_t>(shape.head_outputs()), shape.classifier_hidden_layers + 1, init_rng);
  input_mean_.assign(dx, 0.0);
  input_scale_.assign(dx, 1.0);
}

void EstimatorModel::set_standardization(std::vector<double> mean, std::vector<double> scale) {
  if (mean.size() != static_cast<std::size_t>(shape_.d_x) || scale.size() != mean.size())
    throw nd::ShapeError("standardization vectors must have d_x entries");
  for (double s : scale)
    if (!(s > 0.0)) throw std::invalid_argument("standardization scale must be positive");
  input_mean_ = std::move(mean);
  input_scale_ = std::move(scale);
}

Tensor EstimatorModel::standardize(const Tensor& x) const {
  Tensor out = x;
  const std::size_t d = input_mean_.size();
  if (x.cols() != d) throw nd::ShapeError("standardize: expected " + std::to_string(d) + " columns, got " + nd::to_string(x.shape()));
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = (x.at(i, j) - input_mean_[j]) / input_scale_[j];
  return out;
}

Encoded EstimatorModel::encode(const nd::Var& x_std) const {
  const auto dc = static_cast<std::size_t>(shape_.d_c);
  const auto dz = static_cast<std::size_t>(shape_.d_z());
  nd::Var out = run_stack(encoder_, x_std, shape_.alpha);
  return {nd::columns(out, 0, dc), nd::columns(out, dc, 2 * dc), nd::columns(out, 2 * dc, dc + dz),
          nd::columns(out, dc + dz, 2 * dz)};
}

nd::Var EstimatorModel::decode(const nd::Var& c, const nd::Var& s) const {
  return run_stack(decoder_, nd::concat_columns(c, s), shape_.alpha);
}

nd::Var EstimatorModel::classify(const nd::Var& c) const {
  if (mask_logits_) throw std::logic_error("classify: masked head needs both c and s");
  return run_stack(classifier_, c, shape_.alpha);
}

nd::Var EstimatorModel::classify(const nd::Var& c, const nd::Var& s) const {
  if (!mask_logits_) return run_stack(classifier_, c, shape_.alpha);
  nd::Var z = nd::mul_row(nd::concat_columns(c, s), nd::sigmoid(*mask_logits_));
  return run_stack(classifier_, z, shape_.alpha);
}

std::vector<Prediction> EstimatorModel::predict(const Tensor& xs) const {
  const Encoded e = encode(nd::Var::constant(standardize(xs)));
  const nd::Var out = classify(e.mu_c, e.mu_s);
  const std::size_t n = xs.rows();
  const auto dc = static_cast<std::size_t>(shape_.d_c);
  const auto ds = static_cast<std::size_t>(shape_.d_s);
  const std::size_t k = out.value().cols();
  std::vector<Prediction> preds(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = preds[i];
    p.outputs.assign(out.value().data().begin() + static_cast<std::ptrdiff_t>(i * k),
                     out.value().data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    p.c_hat.assign(e.mu_c.value().data().begin() + static_cast<std::ptrdiff_t>(i * dc),
                   e.mu_c.value().data().begin() + static_cast<std::ptrdiff_t>((i + 1) * dc));
    p.s_hat.assign(e.mu_s.value().data().begin() + static_cast<std::ptrdiff_t>(i * ds),
                   e.mu_s.value().data().begin() + static_cast<std::ptrdiff_t>((i + 1) * ds));
    if (shape_.task == Task::BinaryClassification)
      p.label = static_cast<int>(std::max_element(p.outputs.begin(), p.outputs.end()) - p.outputs.begin());
    else
      p.value = p.outputs[0];
  }
  return preds;
}

Prediction EstimatorModel::predict(std::span<const double> x) const {
  Tensor xs({1, x.size()}, std::vector<double>(x.begin(), x.end()));
  return predict(xs)[0];
}

Tensor EstimatorModel::codes(const Tensor& xs) const {
  return encode(nd::Var::constant(standardize(xs))).mu_c.value();
}

Tensor EstimatorModel::sampled_codes(const Tensor& xs, Rng& rng) const {
  const Encoded e = encode(nd::Var::constant(standardize(xs)));
  Tensor out = e.mu_c.value();
  const Tensor& lv = e.logvar_c.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::exp(0.5 * lv[i]) * rng.normal();
  return out;
}

std::vector<nd::Var> EstimatorModel::encoder_parameters() const {
  std::vector<nd::Var> out;
  for (const auto& l : encoder_) out.insert(out.end(), {l.weight, l.bias});
  return out;
}

std::vector<nd::Var> EstimatorModel::classifier_parameters() const {
  std::vector<nd::Var> out;
  for (const auto& l : classifier_) out.insert(out.end(), {l.weight, l.bias});
  return out;
}

std::vector<nd::Var> EstimatorModel::parameters() const {
  std::vector<nd::Var> out = encoder_parameters();
  for (const auto& l : decoder_) out.insert(out.end(), {l.weight, l.bias});
  auto cls = classifier_parameters();
  out.insert(out.end(), cls.begin(), cls.end());
  if (mask_logits_) out.push_back(*mask_logits_);
  return out;
}

void EstimatorModel::install_mask(double initial_logit) {
  if (mask_logits_) throw std::logic_error("mask already installed");
  const auto dc = static_cast<std::size_t>(shape_.d_c);
  const auto dz = static_cast<std::size_t>(shape_.d_z());
  const Tensor& w = classifier_.front().weight.value();
  // Rescale the c rows so the masked head computes the same function.
  const double m0 = 1.0 / (1.0 + std::exp(-initial_logit));
  Tensor wide({dz, w.cols()});
  for (std::size_t i = 0; i < dc; ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) wide.at(i, j) = w.at(i, j) / m0;
  classifier_.front().weight = nd::Var::parameter(std::move(wide));
  mask_logits_ = nd::Var::parameter(Tensor({dz}, initial_logit));
}

std::vector<double> EstimatorModel::mask_values() const {
  if (!mask_logits_) return {};
  return nd::sigmoid(nd::Var::constant(mask_logits_->value())).value().storage();
}

EstimatorModel EstimatorModel::clone() const {
  EstimatorModel copy;
  copy.shape_ = shape_;
  copy.encoder_ = clone_stack(encoder_);
  copy.decoder_ = clone_stack(decoder_);
  copy.classifier_ = clone_stack(classifier_);
  if (mask_logits_) copy.mask_logits_ = nd::Var::parameter(mask_logits_->value());
  copy.input_mean_ = input_mean_;
  copy.input_scale_ = input_scale_;
  copy.density_ = density_;
  return copy;
}

std::vector<double> EstimatorModel::flat_parameters() const {
  std::vector<double> out;
  for (const auto& p : parameters()) out.insert(out.end(), p.value().storage().begin(), p.value().storage().end());
  return out;
}

json EstimatorModel::to_json() const {
  json j;
  j["format"] = "extrap-checkpoint";
  j["version"] = 1;
  j["shape"] = {{"d_c", shape_.d_c},
                {"d_s", shape_.d_s},
                {"d_x", shape_.d_x},
                {"hidden", shape_.hidden},
                {"encoder_layers", shape_.encoder_layers},
                {"decoder_layers", shape_.decoder_layers},
                {"classifier_hidden_layers", shape_.classifier_hidden_layers},
                {"task", to_string(shape_.task)},
                {"classes", shape_.classes},
                {"alpha", shape_.alpha}};
  j["input_mean"] = input_mean_;
  j["input_scale"] = input_scale_;
  j["encoder"] = stack_to_json(encoder_);
  j["decoder"] = stack_to_json(decoder_);
  j["classifier"] = stack_to_json(classifier_);
  j["mask_logits"] = mask_logits_ ? json(mask_logits_->value().storage()) : json(nullptr);
  j["density"] = {{"weights", density_.weights}, {"means", density_.means}, {"variances", density_.variances}};
  return j;
}

EstimatorModel EstimatorModel::from_json(const json& j) {
  if (j.value("format", "") != "extrap-checkpoint") throw std::runtime_error("checkpoint: unrecognized format");
  EstimatorModel m;
  const auto& s = j.at("shape");
  m.shape_.d_c = s.at("d_c");
  m.shape_.d_s = s.at("d_s");
  m.shape_.d_x = s.at("d_x");
  m.shape_.hidden = s.at("hidden");
  m.shape_.encoder_layers = s.at("encoder_layers");
  m.shape_.decoder_layers = s.at("decoder_layers");
  m.shape_.classifier_hidden_layers = s.at("classifier_hidden_layers");
  m.shape_.task = parse_task(s.at("task"));
  m.shape_.classes = s.at("classes");
  m.shape_.alpha = s.at("alpha");
  m.input_mean_ = j.at("input_mean").get<std::vector<double>>();
  m.input_scale_ = j.at("input_scale").get<std::vector<double>>();
  m.encoder_ = stack_from_json(j.at("encoder"));
  m.decoder_ = stack_from_json(j.at("decoder"));
  m.classifier_ = stack_from_json(j.at("classifier"));
  if (!j.at("mask_logits").is_null()) {
    auto v = j.at("mask_logits").get<std::vector<double>>();
    const std::size_t n = v.size();
    m.mask_logits_ = nd::Var::parameter(Tensor({n}, std::move(v)));
  }
  const auto& d = j.at("density");
  m.density_.weights = d.at("weights").get<std::vector<double>>();
  m.density_.means = d.at("means").get<std::vector<std::vector<double>>>();
  m.density_.variances = d.at("variances").get<std::vector<std::vector<double>>>();
  return m;
}

// ---------------------------------------------------------------- loss

LossTerms& LossTerms::operator+=(const LossTerms& o) {
  reconstruction += o.reconstruction;
  kl += o.kl;
  naturalness += o.naturalness;
  classification += o.classification;
  anti_naturalness += o.anti_naturalness;
  s_distance += o.s_distance;
  mask += o.mask;
  total += o.total;
  return *this;
}

LossTerms LossTerms::scaled(double f) const {
  return {reconstruction * f, kl * f, naturalness * f, classification * f, anti_naturalness * f, s_distance * f, mask * f, total * f};
}

double standard_normal_density(std::span<const double> s) {
  double acc = 0.0;
  for (double v : s) acc += -kHalfLog2Pi - 0.5 * v * v;
  return std::exp(acc);
}

namespace {

nd::Var sample_code(const nd::Var& mu, const nd::Var& logvar, Rng* noise) {
  if (noise == nullptr) return mu;
  Tensor eps(mu.shape());
  for (auto& v : eps.storage()) v = noise->normal();
  return nd::reparameterize(mu, logvar, eps);
}

}  // namespace

LossResult loss(const EstimatorModel& model, const SourceBatch& batch, const Tensor* x_tgt, const LossWeights& weights,
                ShiftMode mode, Rng* noise) {
  const auto& shape = model.shape();
  const std::size_t n = batch.xs.rows();
  if (n == 0) throw std::invalid_argument("loss: empty source batch");
  LossTerms terms;
  std::vector<nd::Var> parts;
  auto add_term = [&](double w, const nd::Var& v, double& slot) {
    if (w == 0.0) return;
    nd::Var weighted = nd::scale(v, w);
    slot = weighted.item();
    parts.push_back(weighted);
  };

  const nd::Var xs = nd::Var::constant(model.standardize(batch.xs));
  const Encoded src = model.encode(xs);

  // (a) reconstruction on source and target
  const bool need_target = x_tgt != nullptr &&
                           (weights.recons > 0.0 || weights.tgt_likelihood > 0.0 || weights.anti_nat > 0.0 ||
                            (mode == ShiftMode::Dense && weights.s_distance > 0.0));
  std::optional<Encoded> tgt;
  nd::Var xt;
  if (need_target) {
    if (x_tgt->rank() != 2 || x_tgt->rows() != 1) throw nd::ShapeError("loss: x_tgt must be {1, d_x}");
    xt = nd::Var::constant(model.standardize(*x_tgt));
    tgt = model.encode(xt);
  }
  nd::Var c_src, s_src;
  if (weights.recons > 0.0) {
    c_src = sample_code(src.mu_c, src.logvar_c, noise);
    s_src = sample_code(src.mu_s, src.logvar_s, noise);
    nd::Var recon = nd::mse(model.decode(c_src, s_src), xs);
    if (tgt) {
      nd::Var ct = sample_code(tgt->mu_c, tgt->logvar_c, noise);
      nd::Var st = sample_code(tgt->mu_s, tgt->logvar_s, noise);
      recon = nd::add(recon, nd::mse(model.decode(ct, st), xt));
    }
    add_term(weights.recons, recon, terms.reconstruction);
  }
  // (b) KL on q(c|x_src)
  if (weights.kl > 0.0) add_term(weights.kl, nd::mean(nd::kl_standard_normal(src.mu_c, src.logvar_c)), terms.kl);
  // (c) naturalness: -log p_hat(c_tgt)
  if (weights.tgt_likelihood > 0.0 && tgt) {
    if (model.density().components() == 0) throw std::logic_error("loss: naturalness needs a fitted code density");
    nd::Var ct = sample_code(tgt->mu_c, tgt->logvar_c, noise);
    add_term(weights.tgt_likelihood, nd::scale(nd::sum(model.density().log_density(ct)), -1.0), terms.naturalness);
  }
  // (d) supervised head on the posterior mean of c
  if (weights.cls > 0.0) {
    nd::Var out = model.has_mask() ? model.classify(src.mu_c, src.mu_s) : model.classify(src.mu_c);
    if (shape.task == Task::BinaryClassification) {
      add_term(weights.cls, nd::softmax_cross_entropy(out, batch.classes), terms.classification);
    } else {
      if (batch.values.size() != n) throw nd::ShapeError("loss: regression batch needs one target per row");
      nd::Var y = nd::Var::constant(Tensor({n, 1}, std::vector<double>(batch.values.begin(), batch.values.end())));
      add_term(weights.cls, nd::mse(out, y), terms.classification);
    }
  }
  // (e) anti-naturalness: KL on q(s|x_src) plus prior density of s_tgt
  if (weights.anti_nat > 0.0) {
    nd::Var term = nd::mean(nd::kl_standard_normal(src.mu_s, src.logvar_s));
    if (tgt) {
      nd::Var st = sample_code(tgt->mu_s, tgt->logvar_s, noise);
      Tensor zeros(st.shape());
      nd::Var dens = nd::exp(nd::gaussian_log_density(nd::Var::constant(zeros), nd::Var::constant(zeros), st));
      term = nd::add(term, nd::sum(dens));
    }
    add_term(weights.anti_nat, term, terms.anti_naturalness);
  }
  // (f) dense shifts: keep s_tgt close to the source-support centre
  if (mode == ShiftMode::Dense && weights.s_distance > 0.0 && tgt)
    add_term(weights.s_distance, nd::sum(nd::square(tgt->mu_s)), terms.s_distance);
  // (g) soft-mask sparsity
  if (model.has_mask() && weights.mask_l1 > 0.0)
    add_term(weights.mask_l1, nd::sum(nd::sigmoid(*model.mask_logits())), terms.mask);

  if (parts.empty()) throw std::invalid_argument("loss: every term has zero weight");
  nd::Var total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = nd::add(total, parts[i]);
  terms.total = total.item();
  return {total, terms};
}

// ---------------------------------------------------------------- training

TrainResult train(const Dataset& source, const Tensor* x_tgt, const TrainConfig& config) {
  config.weights.validate();
  if (source.size() == 0) throw std::invalid_argument("train: empty source dataset");
  if (config.epochs < 0 || config.batch_size < 1) throw std::invalid_argument("train: bad epoch/batch configuration");
  if (source.task != config.task) throw std::invalid_argument("train: dataset task does not match config");

  ModelShape shape = config.shape;
  shape.task = config.task;
  shape.d_x = static_cast<int>(source.xs.cols());
  shape.d_c = static_cast<int>(source.latents[0].c.size());
  shape.d_s = static_cast<int>(source.latents[0].s.size());

  Rng init_rng = Rng::keyed(config.seed, {0x1717});
  Rng shuffle_rng = Rng::keyed(config.seed, {0x5f1e});
  Rng noise_rng = Rng::keyed(config.seed, {0x0153});
  Rng density_rng = Rng::keyed(config.seed, {0xde75});

  TrainResult result{EstimatorModel(shape, init_rng), {}};
  EstimatorModel& model = result.model;
  if (config.use_mask) model.install_mask();

  const std::size_t n = source.size();
  const auto dx = static_cast<std::size_t>(shape.d_x);
  std::vector<double> mean(dx, 0.0), scale(dx, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dx; ++j) mean[j] += source.xs.at(i, j) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dx; ++j) scale[j] += std::pow(source.xs.at(i, j) - mean[j], 2) / static_cast<double>(n);
  for (auto& s : scale) s = std::max(std::sqrt(s), 1e-8);
  model.set_standardization(mean, scale);

  const bool uses_density = x_tgt != nullptr && config.weights.tgt_likelihood > 0.0;
  const int components = config.density_components > 0
                             ? config.density_components
                             : (config.task == Task::BinaryClassification ? shape.classes : 5);

  ndgrad::Adam optimizer(model.parameters(), config.lr);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<int> batch_classes;
  std::vector<double> batch_values;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (uses_density) {
      // Fit to the aggregate posterior, not the posterior means: means of a
      // discrete c collapse to near-point masses and the naturalness pull
      // then locks the target onto whichever mode is nearest at init.
      const Tensor codes = model.sampled_codes(source.xs, density_rng);
      std::span<const int> labels;
      if (config.task == Task::BinaryClassification && components == shape.classes) labels = source.classes;
      model.density() = fit_code_density(codes, components, labels, density_rng);
    }
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    LossTerms epoch_terms;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      Tensor bx({idx.size(), dx});
      batch_classes.clear();
      batch_values.clear();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        std::copy_n(source.xs.data().data() + idx[r] * dx, dx, bx.data().data() + r * dx);
        if (!source.classes.empty()) batch_classes.push_back(source.classes[idx[r]]);
        if (!source.values.empty()) batch_values.push_back(source.values[idx[r]]);
      }
      SourceBatch sb{std::move(bx), batch_classes, batch_values};
      LossResult res;
      try {
        res = loss(model, sb, x_tgt, config.weights, config.mode, &noise_rng);
      } catch (const ndgrad::NumericError& e) {
        result.trace.push_back(epoch_terms.scaled(batches ? 1.0 / static_cast<double>(batches) : 1.0));
        throw DivergenceError(std::string("non-finite loss at epoch ") + std::to_string(epoch) + ": " + e.what(),
                              result.trace);
      }
      optimizer.zero_grad();
      ndgrad::backward(res.total);
      optimizer.step();
      epoch_terms += res.terms;
      ++batches;
    }
    result.trace.push_back(epoch_terms.scaled(1.0 / static_cast<double>(batches)));
    if (!(result.trace.back().total <= config.divergence_limit))
      throw DivergenceError("loss exceeded " + std::to_string(config.divergence_limit) + " at epoch " + std::to_string(epoch),
                            result.trace);
  }
  if (config.weights.tgt_likelihood > 0.0) {
    // Leave the density consistent with the final encoder.
    std::span<const int> labels;
    if (config.task == Task::BinaryClassification && components == shape.classes) labels = source.classes;
    model.density() = fit_code_density(model.sampled_codes(source.xs, density_rng), components, labels, density_rng);
  }
  return result;
}

void write_loss_trace_csv(std::ostream& os, std::span<const LossTerms> trace) {
  os << "epoch,total,reconstruction,kl,naturalness,classification,anti_naturalness,s_distance,mask\n";
  for (std::size_t e = 0; e < trace.size(); ++e) {
    const auto& t = trace[e];
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", e, t.total, t.reconstruction,
                  t.kl, t.naturalness, t.classification, t.anti_naturalness, t.s_distance, t.mask);
    os << buf;
  }
}

}  // namespace extrap
