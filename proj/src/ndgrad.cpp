#include "extrap/ndgrad.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace extrap::ndgrad {

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + to_string(t.shape()));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

const Tensor& pv(const Node& self, std::size_t i) { return self.parents[i]->value; }

constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {
  if (shape_.empty()) throw ShapeError("tensor shape must be non-empty");
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + to_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw ShapeError("tensor shape must be non-empty");
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + to_string(shape_));
  if (product(shape_) != data_.size())
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  // Exponent-all-ones test on the raw bits; integer OR reductions vectorize.
  constexpr std::uint64_t kExponent = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  const double* p = data_.data();
  for (std::size_t i = 0; i < data_.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(p[i]);
    bad |= static_cast<std::uint64_t>((bits & kExponent) == kExponent);
  }
  return bad == 0;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  if (product(shape) != data_.size()) shape_error("reshape", shape_, shape);
  return Tensor(std::move(shape), data_);
}

// ---------------------------------------------------------------- graph

Tensor& Node::parent_grad(std::size_t i) {
  Node& p = *parents[i];
  if (p.grad.shape() != p.value.shape()) p.grad = Tensor::zeros_like(p.value);
  return p.grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->grad = Tensor::zeros_like(node->value);
  node->requires_grad = true;
  node->op = "parameter";
  return Var(std::move(node));
}

void Var::zero_grad() {
  if (node_->grad.shape() != node_->value.shape())
    node_->grad = Tensor::zeros_like(node_->value);
  else
    node_->grad.fill(0.0);
}

Var make_op(const char* name, Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) throw NumericError(std::string(name) + ": non-finite output");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = name;
  node->parents.reserve(parents.size());
  for (auto& p : parents) {
    node->requires_grad = node->requires_grad || p.requires_grad();
    node->parents.push_back(p.node());
  }
  if (node->requires_grad)
    node->backward = std::move(backward_fn);
  else
    node->parents.clear();
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (root.value().size() != 1)
    throw ShapeError("backward: root must be scalar, got " + to_string(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Node& r = *root.node();
  if (r.grad.shape() != r.value.shape()) r.grad = Tensor::zeros_like(r.value);
  r.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.backward && n.grad.shape() == n.value.shape()) n.backward(n);
  }
  // Interior gradients are scratch; only leaves keep theirs.
  for (Node* n : order)
    if (!n->parents.empty()) n->grad = Tensor();
}

// ---------------------------------------------------------------- kernels

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap view(const Tensor& t) { return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())); }
MutMap view(Tensor& t) { return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())); }

// c += a * b
void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) { view(c).noalias() += view(a) * view(b); }

// c += a * b^T
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c) { view(c).noalias() += view(a) * view(b).transpose(); }

// c += a^T * b
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) { view(c).noalias() += view(a).transpose() * view(b); }

Eigen::Map<Eigen::ArrayXd> arr(Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.size())}; }
Eigen::Map<const Eigen::ArrayXd> arr(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}

template <class F>
Var unary(const char* name, const Var& a, F&& f, std::function<void(Node&)> bw) {
  Tensor out(a.shape());
  const auto& in = a.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_op(name, std::move(out), {a}, std::move(bw));
}

}  // namespace

// ---------------------------------------------------------------- ops

Var matmul(const Var& a, const Var& b) {
  require_matrix("matmul", a.value());
  require_matrix("matmul", b.value());
  if (a.value().cols() != b.value().rows()) shape_error("matmul", a.shape(), b.shape());
  Tensor out({a.value().rows(), b.value().cols()});
  gemm_nn(a.value(), b.value(), out);
  return make_op("matmul", std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) gemm_nt(self.grad, pv(self, 1), self.parent_grad(0));
    if (wants(self, 1)) gemm_tn(pv(self, 0), self.grad, self.parent_grad(1));
  });
}

Var affine(const Var& x, const Var& weight, const Var& bias) {
  require_matrix("affine", x.value());
  require_matrix("affine", weight.value());
  if (x.value().cols() != weight.value().rows()) shape_error("affine", x.shape(), weight.shape());
  if (bias.value().size() != weight.value().cols()) shape_error("affine", weight.shape(), bias.shape());
  Tensor out({x.value().rows(), weight.value().cols()});
  auto o = view(out);
  o.noalias() = view(x.value()) * view(weight.value());
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data().data(), o.cols());
  return make_op("affine", std::move(out), {x, weight, bias}, [](Node& self) {
    if (wants(self, 0)) gemm_nt(self.grad, pv(self, 1), self.parent_grad(0));
    if (wants(self, 1)) gemm_tn(pv(self, 0), self.grad, self.parent_grad(1));
    if (wants(self, 2)) {
      // Plain loop: Eigen's packet reductions depend on pointer alignment,
      // which would make results vary with heap layout.
      auto& g = self.parent_grad(2);
      const std::size_t n = self.grad.rows(), m = self.grad.cols();
      const double* src = self.grad.data().data();
      double* dst = g.data().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) dst[j] += src[i * m + j];
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op("add", std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      auto& g = self.parent_grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op("sub", std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      auto& g = self.parent_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = self.parent_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op("mul", std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      auto& g = self.parent_grad(p);
      const auto& other = pv(self, 1 - p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

Var add_bias(const Var& a, const Var& bias) {
  require_matrix("add_bias", a.value());
  const std::size_t n = a.value().rows(), m = a.value().cols();
  if (bias.value().size() != m) shape_error("add_bias", a.shape(), bias.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias.value()[j];
  return make_op("add_bias", std::move(out), {a, bias}, [n, m](Node& self) {
    if (wants(self, 0)) {
      auto& g = self.parent_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = self.parent_grad(1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    }
  });
}

Var mul_row(const Var& a, const Var& row) {
  require_matrix("mul_row", a.value());
  const std::size_t n = a.value().rows(), m = a.value().cols();
  if (row.value().size() != m) shape_error("mul_row", a.shape(), row.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] *= row.value()[j];
  return make_op("mul_row", std::move(out), {a, row}, [n, m](Node& self) {
    const auto& x = pv(self, 0);
    const auto& r = pv(self, 1);
    if (wants(self, 0)) {
      auto& g = self.parent_grad(0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i * m + j] * r[j];
    }
    if (wants(self, 1)) {
      auto& g = self.parent_grad(1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j] * x[i * m + j];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary("scale", a, [factor](double v) { return v * factor; }, [factor](Node& self) {
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Var add_scalar(const Var& a, double offset) {
  return unary("add_scalar", a, [offset](double v) { return v + offset; }, [](Node& self) {
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var leaky_relu(const Var& a, double alpha) {
  Tensor out(a.shape());
  const auto x = arr(a.value());
  arr(out) = (x > 0.0).select(x, alpha * x);
  return make_op("leaky_relu", std::move(out), {a}, [alpha](Node& self) {
    const auto x = arr(pv(self, 0));
    arr(self.parent_grad(0)) += arr(self.grad) * (x > 0.0).select(Eigen::ArrayXd::Ones(x.size()), alpha);
  });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double v) { return std::exp(v); }, [](Node& self) {
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Var square(const Var& a) {
  return unary("square", a, [](double v) { return v * v; }, [](Node& self) {
    const auto& x = pv(self, 0);
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 2.0 * x[i];
  });
}

Var sigmoid(const Var& a) {
  return unary(
      "sigmoid", a,
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](Node& self) {
        auto& g = self.parent_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double y = self.value[i];
          g[i] += self.grad[i] * y * (1.0 - y);
        }
      });
}

Var sum(const Var& a) {
  const auto& d = a.value().storage();
  Tensor out = Tensor::scalar(std::accumulate(d.begin(), d.end(), 0.0));
  return make_op("sum", std::move(out), {a}, [](Node& self) {
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

Var mean(const Var& a) {
  const auto& d = a.value().storage();
  const double n = static_cast<double>(d.size());
  Tensor out = Tensor::scalar(std::accumulate(d.begin(), d.end(), 0.0) / n);
  return make_op("mean", std::move(out), {a}, [n](Node& self) {
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] / n;
  });
}

Var row_sum(const Var& a) {
  require_matrix("row_sum", a.value());
  const std::size_t n = a.value().rows(), m = a.value().cols();
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += a.value()[i * m + j];
  return make_op("row_sum", std::move(out), {a}, [n, m](Node& self) {
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i];
  });
}

Var row_norm(const Var& a) {
  require_matrix("row_norm", a.value());
  const std::size_t n = a.value().rows(), m = a.value().cols();
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += a.value()[i * m + j] * a.value()[i * m + j];
    out[i] = std::sqrt(acc);
  }
  return make_op("row_norm", std::move(out), {a}, [n, m](Node& self) {
    const auto& x = pv(self, 0);
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < n; ++i) {
      if (self.value[i] == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i] * x[i * m + j] / self.value[i];
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op("reshape", std::move(out), {a}, [](Node& self) {
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var columns(const Var& a, std::size_t begin, std::size_t end) {
  require_matrix("columns", a.value());
  const std::size_t n = a.value().rows(), m = a.value().cols();
  if (begin >= end || end > m)
    throw ShapeError("columns: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + to_string(a.shape()));
  const std::size_t w = end - begin;
  Tensor out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.value()[i * m + begin + j];
  return make_op("columns", std::move(out), {a}, [n, m, w, begin](Node& self) {
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * m + begin + j] += self.grad[i * w + j];
  });
}

Var concat_columns(const Var& a, const Var& b) {
  require_matrix("concat_columns", a.value());
  require_matrix("concat_columns", b.value());
  const std::size_t n = a.value().rows();
  if (b.value().rows() != n) shape_error("concat_columns", a.shape(), b.shape());
  const std::size_t ma = a.value().cols(), mb = b.value().cols(), m = ma + mb;
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ma; ++j) out[i * m + j] = a.value()[i * ma + j];
    for (std::size_t j = 0; j < mb; ++j) out[i * m + ma + j] = b.value()[i * mb + j];
  }
  return make_op("concat_columns", std::move(out), {a, b}, [n, ma, mb, m](Node& self) {
    if (wants(self, 0)) {
      auto& g = self.parent_grad(0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ma; ++j) g[i * ma + j] += self.grad[i * m + j];
    }
    if (wants(self, 1)) {
      auto& g = self.parent_grad(1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < mb; ++j) g[i * mb + j] += self.grad[i * m + ma + j];
    }
  });
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  require_matrix("softmax_cross_entropy", logits.value());
  const std::size_t n = logits.value().rows(), k = logits.value().cols();
  if (labels.size() != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(logits.shape()));
  Tensor probs({n, k});
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.value().data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    total += lse - row[y];
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return make_op("softmax_cross_entropy", Tensor::scalar(total / static_cast<double>(n)), {logits},
                 [probs = std::move(probs), ys = std::move(ys), n, k](Node& self) {
                   auto& g = self.parent_grad(0);
                   const double s = self.grad[0] / static_cast<double>(n);
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < k; ++j)
                       g[i * k + j] += s * (probs[i * k + j] - (static_cast<int>(j) == ys[i] ? 1.0 : 0.0));
                 });
}

Var gaussian_log_density(const Var& mu, const Var& logvar, const Var& x) {
  require_same("gaussian_log_density", mu.value(), logvar.value());
  require_same("gaussian_log_density", mu.value(), x.value());
  const auto& M = mu.value();
  const std::size_t n = M.rank() == 2 ? M.rows() : 1;
  const std::size_t d = M.size() / n;
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t t = i * d + j;
      const double diff = x.value()[t] - M[t];
      acc += -half_log_2pi - 0.5 * logvar.value()[t] - 0.5 * diff * diff * std::exp(-logvar.value()[t]);
    }
    out[i] = acc;
  }
  return make_op("gaussian_log_density", std::move(out), {mu, logvar, x}, [n, d](Node& self) {
    const auto& M = pv(self, 0);
    const auto& L = pv(self, 1);
    const auto& X = pv(self, 2);
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = self.grad[i];
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t t = i * d + j;
        const double inv_var = std::exp(-L[t]);
        const double diff = X[t] - M[t];
        if (wants(self, 0)) self.parent_grad(0)[t] += gi * diff * inv_var;
        if (wants(self, 1)) self.parent_grad(1)[t] += gi * (-0.5 + 0.5 * diff * diff * inv_var);
        if (wants(self, 2)) self.parent_grad(2)[t] -= gi * diff * inv_var;
      }
    }
  });
}

Var reparameterize(const Var& mu, const Var& logvar, const Tensor& noise) {
  require_same("reparameterize", mu.value(), logvar.value());
  require_same("reparameterize", mu.value(), noise);
  Tensor out = mu.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::exp(0.5 * logvar.value()[i]) * noise[i];
  return make_op("reparameterize", std::move(out), {mu, logvar}, [noise](Node& self) {
    const auto& L = pv(self, 1);
    if (wants(self, 0)) {
      auto& g = self.parent_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = self.parent_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 0.5 * std::exp(0.5 * L[i]) * noise[i];
    }
  });
}

Var kl_standard_normal(const Var& mu, const Var& logvar) {
  require_same("kl_standard_normal", mu.value(), logvar.value());
  require_matrix("kl_standard_normal", mu.value());
  const std::size_t n = mu.value().rows(), d = mu.value().cols();
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double m = mu.value()[i * d + j], l = logvar.value()[i * d + j];
      acc += 0.5 * (std::exp(l) + m * m - 1.0 - l);
    }
    out[i] = acc;
  }
  return make_op("kl_standard_normal", std::move(out), {mu, logvar}, [n, d](Node& self) {
    const auto& M = pv(self, 0);
    const auto& L = pv(self, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t t = i * d + j;
        if (wants(self, 0)) self.parent_grad(0)[t] += self.grad[i] * M[t];
        if (wants(self, 1)) self.parent_grad(1)[t] += self.grad[i] * 0.5 * (std::exp(L[t]) - 1.0);
      }
  });
}

Var l1_norm(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().storage()) acc += std::abs(v);
  return make_op("l1_norm", Tensor::scalar(acc), {a}, [](Node& self) {
    const auto& x = pv(self, 0);
    auto& g = self.parent_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
  });
}

Var l2_distance(const Var& a, const Var& b) { return row_norm(sub(a, b)); }

Var mse(const Var& prediction, const Var& target) {
  require_same("mse", prediction.value(), target.value());
  const std::size_t n = prediction.value().rows();
  const auto& p = prediction.value();
  const auto& t = target.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
  const double nn = static_cast<double>(n);
  return make_op("mse", Tensor::scalar(acc / nn), {prediction, target}, [nn](Node& self) {
    const auto& P = pv(self, 0);
    const auto& T = pv(self, 1);
    const double s = 2.0 * self.grad[0] / nn;
    if (wants(self, 0)) {
      auto& g = self.parent_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (P[i] - T[i]);
    }
    if (wants(self, 1)) {
      auto& g = self.parent_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= s * (P[i] - T[i]);
    }
  });
}

Var entropy(const Var& logits) {
  require_matrix("entropy", logits.value());
  const std::size_t n = logits.value().rows(), k = logits.value().cols();
  Tensor probs({n, k});
  Tensor logp({n, k});
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.value().data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    double h = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double lp = std::max(row[j] - lse, kLogFloor);
      const double p = std::exp(row[j] - lse);
      probs[i * k + j] = p;
      logp[i * k + j] = lp;
      h -= p * lp;
    }
    out[i] = h;
  }
  return make_op("entropy", std::move(out), {logits},
                 [probs = std::move(probs), logp = std::move(logp), n, k](Node& self) {
                   auto& g = self.parent_grad(0);
                   // dH/dl_j = -p_j (log p_j + H); the floor only bites where p_j ~ 0.
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < k; ++j) {
                       const std::size_t t = i * k + j;
                       g[t] += self.grad[i] * (-probs[t] * (logp[t] + self.value[i]));
                     }
                 });
}

// ---------------------------------------------------------------- Adam

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(grads.size()) + " grads");
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (p.shape() != g.shape() || state.m[i].shape() != p.shape()) shape_error("adam_step", p.shape(), g.shape());
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

Adam::Adam(std::vector<Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)) {
  state_.lr = lr;
  state_.beta1 = beta1;
  state_.beta2 = beta2;
  state_.eps = eps;
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  std::vector<Tensor*> ps;
  std::vector<const Tensor*> gs;
  for (auto& p : params_) {
    if (p.grad().shape() != p.value().shape()) p.zero_grad();
    ps.push_back(&p.mutable_value());
    gs.push_back(&p.grad());
  }
  adam_step(ps, gs, state_);
}

}  // namespace extrap::ndgrad
