#pragma once

// Define-by-run reverse-mode autodiff over dense float64 tensors.
//
// Every op returns a Var whose node keeps its parents alive and a closure that
// pushes the node's gradient into them. Graphs are rebuilt per minibatch; only
// parameter leaves outlive a step.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace extrap::ndgrad {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string to_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double item() const;
  bool all_finite() const;
  void fill(double v);
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily during backward for interior nodes
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  const char* op = "leaf";

  // Gradient buffer of the i-th parent, allocated on first use.
  Tensor& parent_grad(std::size_t i);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const { return node_->value.item(); }
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Builds a node from a computed value. Throws NumericError on non-finite
// values. The backward closure is dropped when no parent needs a gradient.
Var make_op(const char* name, Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward);

// Reverse sweep from a scalar root. Parameter gradients accumulate (+=);
// call zero_grad between steps.
void backward(const Var& root);

// ---------------------------------------------------------------- ops

Var matmul(const Var& a, const Var& b);                 // {n,k}x{k,m}
Var affine(const Var& x, const Var& weight, const Var& bias);  // x W + b, fused
Var add(const Var& a, const Var& b);                    // same shape
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);                    // elementwise
Var add_bias(const Var& a, const Var& bias);            // {n,m} + {m}
Var mul_row(const Var& a, const Var& row);              // {n,m} * {m}
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var leaky_relu(const Var& a, double alpha);             // subgradient at 0 is alpha
Var exp(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var sum(const Var& a);                                  // -> {1}
Var mean(const Var& a);                                 // -> {1}
Var row_sum(const Var& a);                              // {n,m} -> {n}
Var row_norm(const Var& a);                             // {n,m} -> {n}, grad 0 at 0
Var reshape(const Var& a, Shape shape);
Var columns(const Var& a, std::size_t begin, std::size_t end);
Var concat_columns(const Var& a, const Var& b);

// Mean cross-entropy of row-wise softmax against integer labels -> {1}.
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);
// Row-wise diagonal Gaussian log density -> {n}.
Var gaussian_log_density(const Var& mu, const Var& logvar, const Var& x);
// mu + exp(logvar / 2) * noise, noise held constant.
Var reparameterize(const Var& mu, const Var& logvar, const Tensor& noise);
// Row-wise KL(N(mu, exp(logvar)) || N(0, I)) -> {n}.
Var kl_standard_normal(const Var& mu, const Var& logvar);
Var l1_norm(const Var& a);                              // -> {1}
Var l2_distance(const Var& a, const Var& b);            // row-wise -> {n}
// Mean over rows of the squared Euclidean error -> {1}.
Var mse(const Var& prediction, const Var& target);
// Row-wise softmax entropy with log-probabilities floored at log(1e-12) -> {n}.
Var entropy(const Var& logits);

// ---------------------------------------------------------------- Adam

struct AdamState {
  long step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update, in place.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
               AdamState& state);

class Adam {
 public:
  Adam(std::vector<Var> params, double lr = 2e-3, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void zero_grad();
  void step();
  const AdamState& state() const { return state_; }

 private:
  std::vector<Var> params_;
  AdamState state_;
};

}  // namespace extrap::ndgrad
