#include <doctest.h>

#include <chrono>
#include <cmath>
#include <numbers>

#include "extrap/ndgrad.hpp"
#include "gradcheck.hpp"

using namespace extrap;
using namespace extrap::ndgrad;
using gradcheck::random_tensor;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-4;

// FD check of op, reduced with weights drawn once per instance.
double op_error(const std::function<Var(const std::vector<Var>&)>& op, const std::vector<Tensor>& inputs, Rng& rng) {
  std::vector<Var> probe_inputs;
  for (const auto& t : inputs) probe_inputs.push_back(Var::constant(t));
  const Tensor w = random_tensor(op(probe_inputs).shape(), rng);
  return gradcheck::max_relative_error(
      [&](const std::vector<Var>& v) { return sum(mul(op(v), Var::constant(w))); }, inputs);
}

void check_op(const char* name, const std::function<std::vector<Tensor>(Rng&)>& make_inputs,
              const std::function<Var(const std::vector<Var>&)>& op) {
  Rng rng = Rng::keyed(99, {std::hash<std::string>{}(name)});
  double worst = 0.0;
  for (int i = 0; i < kInstances; ++i) worst = std::max(worst, op_error(op, make_inputs(rng), rng));
  INFO(name << " worst relative error " << worst);
  CHECK(worst < kTol);
}

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

}  // namespace

TEST_CASE("forward examples") {
  CHECK(leaky_relu(Var::constant(Tensor({1}, {-1.0})), 0.2).item() == doctest::Approx(-0.2));
  const Var zero = Var::constant(Tensor({1, 1}, {0.0}));
  CHECK(gaussian_log_density(zero, zero, zero).item() == doctest::Approx(-0.5 * std::log(2.0 * std::numbers::pi)));
  const int label = 0;
  CHECK(softmax_cross_entropy(Var::constant(Tensor({1, 2}, {0.0, 0.0})), std::span(&label, 1)).item() ==
        doctest::Approx(std::log(2.0)));
  CHECK(entropy(Var::constant(Tensor({1, 2}, {0.0, 0.0}))).item() == doctest::Approx(std::log(2.0)));
  CHECK(entropy(Var::constant(Tensor({1, 2}, {100.0, -100.0}))).item() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("shape mismatch names both shapes") {
  const Var a = Var::constant(Tensor({2, 3}));
  const Var b = Var::constant(Tensor({2, 4}));
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2,3]") != std::string::npos);
    CHECK(what.find("[2,4]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)matmul(a, b), ShapeError);
}

TEST_CASE("non-finite values are an error") {
  CHECK_THROWS_AS((void)ndgrad::exp(Var::constant(Tensor({1}, {1000.0}))), NumericError);
  CHECK_THROWS_AS((void)ndgrad::scale(Var::constant(Tensor({1}, {1e300})), 1e300), NumericError);
}

TEST_CASE("backward requires a scalar root") {
  const Var p = Var::parameter(Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(backward(scale(p, 2.0)), ShapeError);
}

TEST_CASE("linear map gradient is the broadcast input") {
  const Tensor x({1, 3}, {0.5, -1.0, 2.0});
  const Var w = Var::parameter(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}));
  backward(sum(matmul(Var::constant(x), w)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(w.grad().at(i, j) == doctest::Approx(x[i]));
}

TEST_CASE("unused parameter gets zero gradient") {
  const Var p = Var::parameter(Tensor({2}, {1.0, 2.0}));
  const Var q = Var::parameter(Tensor({2}, {3.0, 4.0}));
  backward(sum(square(p)));
  CHECK(q.grad()[0] == 0.0);
  CHECK(q.grad()[1] == 0.0);
}

TEST_CASE("shared subexpressions accumulate like the unrolled tree") {
  Rng rng(3);
  const Tensor t = random_tensor({3, 4}, rng);
  const Var a = Var::parameter(t);
  const Var shared = sigmoid(a);
  backward(sum(mul(shared, add(shared, square(shared)))));
  const Var b = Var::parameter(t);
  backward(sum(mul(sigmoid(b), add(sigmoid(b), square(sigmoid(b))))));
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(a.grad()[i] == doctest::Approx(b.grad()[i]).epsilon(1e-12));
}

TEST_CASE("adam examples") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Var p = Var::parameter(Tensor({2}, {1.5, -0.5}));
    Adam opt({p}, 0.1);
    opt.zero_grad();
    opt.step();
    CHECK(p.value()[0] == 1.5);
    CHECK(p.value()[1] == -0.5);
  }
  SUBCASE("unit gradient at step 1 moves by lr") {
    Var p = Var::parameter(Tensor({1}, {1.0}));
    Adam opt({p}, 0.1);
    opt.zero_grad();
    backward(sum(p));
    opt.step();
    CHECK(p.value()[0] == doctest::Approx(0.9).epsilon(1e-6));
  }
  SUBCASE("descends (w - 3)^2") {
    Var w = Var::parameter(Tensor({1}, {0.0}));
    Adam opt({w}, 0.1);
    for (int i = 0; i < 100; ++i) {
      opt.zero_grad();
      backward(sum(square(add_scalar(w, -3.0))));
      opt.step();
    }
    CHECK(std::abs(w.value()[0] - 3.0) < 0.2);
  }
  SUBCASE("state shapes follow the parameters") {
    Var a = Var::parameter(Tensor({2, 3}, 1.0));
    Var b = Var::parameter(Tensor({4}, 1.0));
    Adam opt({a, b});
    opt.zero_grad();
    backward(add(sum(a), sum(b)));
    opt.step();
    opt.step();
    REQUIRE(opt.state().m.size() == 2);
    CHECK(opt.state().m[0].shape() == a.shape());
    CHECK(opt.state().v[1].shape() == b.shape());
    CHECK(opt.state().step == 2);
  }
}

TEST_CASE("identical seeds give bit-identical training") {
  auto run = [] {
    Rng rng(42);
    Var w1 = Var::parameter(random_tensor({3, 8}, rng, 0.5));
    Var b1 = Var::parameter(Tensor({8}));
    Var w2 = Var::parameter(random_tensor({8, 1}, rng, 0.5));
    const Tensor x = random_tensor({16, 3}, rng);
    const Tensor y = random_tensor({16, 1}, rng);
    Adam opt({w1, b1, w2}, 0.01);
    for (int i = 0; i < 50; ++i) {
      opt.zero_grad();
      backward(mse(matmul(leaky_relu(affine(Var::constant(x), w1, b1), 0.2), w2), Var::constant(y)));
      opt.step();
    }
    std::vector<double> out = w1.value().storage();
    out.insert(out.end(), w2.value().storage().begin(), w2.value().storage().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("finite-difference gradients of every op") {
  const auto start = std::chrono::steady_clock::now();
  auto mat = [](Rng& rng, std::size_t r, std::size_t c, double min_abs = 0.0) {
    return random_tensor({r, c}, rng, 1.0, min_abs);
  };

  check_op("matmul", [&](Rng& r) {
    const auto n = dim(r, 1, 4), k = dim(r, 1, 4), m = dim(r, 1, 4);
    return std::vector{mat(r, n, k), mat(r, k, m)};
  }, [](const auto& v) { return matmul(v[0], v[1]); });
  check_op("affine", [&](Rng& r) {
    const auto n = dim(r, 1, 4), k = dim(r, 1, 4), m = dim(r, 1, 4);
    return std::vector{mat(r, n, k), mat(r, k, m), random_tensor({m}, r)};
  }, [](const auto& v) { return affine(v[0], v[1], v[2]); });
  check_op("add", [&](Rng& r) {
    const auto n = dim(r, 1, 4), m = dim(r, 1, 4);
    return std::vector{mat(r, n, m), mat(r, n, m)};
  }, [](const auto& v) { return add(v[0], v[1]); });
  check_op("sub", [&](Rng& r) {
    const auto n = dim(r, 1, 4), m = dim(r, 1, 4);
    return std::vector{mat(r, n, m), mat(r, n, m)};
  }, [](const auto& v) { return sub(v[0], v[1]); });
  check_op("mul", [&](Rng& r) {
    const auto n = dim(r, 1, 4), m = dim(r, 1, 4);
    return std::vector{mat(r, n, m), mat(r, n, m)};
  }, [](const auto& v) { return mul(v[0], v[1]); });
  check_op("add_bias", [&](Rng& r) {
    const auto n = dim(r, 1, 4), m = dim(r, 1, 4);
    return std::vector{mat(r, n, m), random_tensor({m}, r)};
  }, [](const auto& v) { return add_bias(v[0], v[1]); });
  check_op("mul_row", [&](Rng& r) {
    const auto n = dim(r, 1, 4), m = dim(r, 1, 4);
    return std::vector{mat(r, n, m), random_tensor({m}, r)};
  }, [](const auto& v) { return mul_row(v[0], v[1]); });
  check_op("scale", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4))}; },
           [](const auto& v) { return scale(v[0], -1.7); });
  check_op("add_scalar", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4))}; },
           [](const auto& v) { return add_scalar(v[0], 0.3); });
  // Keep inputs away from the kink so the central difference never straddles it.
  check_op("leaky_relu", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4), 1e-2)}; },
           [](const auto& v) { return leaky_relu(v[0], 0.2); });
  check_op("exp", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4))}; },
           [](const auto& v) { return ndgrad::exp(v[0]); });
  check_op("square", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4))}; },
           [](const auto& v) { return square(v[0]); });
  check_op("sigmoid", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4))}; },
           [](const auto& v) { return sigmoid(v[0]); });
  check_op("sum", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4))}; },
           [](const auto& v) { return sum(v[0]); });
  check_op("mean", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4))}; },
           [](const auto& v) { return mean(v[0]); });
  check_op("row_sum", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4))}; },
           [](const auto& v) { return row_sum(v[0]); });
  check_op("row_norm", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4), 1e-1)}; },
           [](const auto& v) { return row_norm(v[0]); });
  check_op("reshape", [&](Rng& r) { return std::vector{mat(r, 2, 6)}; },
           [](const auto& v) { return reshape(v[0], {3, 4}); });
  check_op("columns", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), 5)}; },
           [](const auto& v) { return columns(v[0], 1, 4); });
  check_op("concat_columns", [&](Rng& r) {
    const auto n = dim(r, 1, 4);
    return std::vector{mat(r, n, dim(r, 1, 3)), mat(r, n, dim(r, 1, 3))};
  }, [](const auto& v) { return concat_columns(v[0], v[1]); });
  check_op("softmax_cross_entropy", [&](Rng& r) { return std::vector{mat(r, 5, dim(r, 2, 4))}; },
           [](const auto& v) {
             static const int labels[] = {0, 1, 1, 0, 1};
             return softmax_cross_entropy(v[0], labels);
           });
  check_op("gaussian_log_density", [&](Rng& r) {
    const auto n = dim(r, 1, 4), d = dim(r, 1, 4);
    return std::vector{mat(r, n, d), mat(r, n, d), mat(r, n, d)};
  }, [](const auto& v) { return gaussian_log_density(v[0], v[1], v[2]); });
  // The noise is held constant, so it is a fixed function of the shape here.
  check_op("reparameterize", [&](Rng& r) {
    const auto n = dim(r, 1, 4), d = dim(r, 1, 4);
    return std::vector{mat(r, n, d), mat(r, n, d)};
  }, [](const auto& v) {
    Tensor noise(v[0].shape());
    for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = std::sin(1.0 + 2.3 * static_cast<double>(i));
    return reparameterize(v[0], v[1], noise);
  });
  check_op("kl_standard_normal", [&](Rng& r) {
    const auto n = dim(r, 1, 4), d = dim(r, 1, 4);
    return std::vector{mat(r, n, d), mat(r, n, d)};
  }, [](const auto& v) { return kl_standard_normal(v[0], v[1]); });
  check_op("l1_norm", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 1, 4), 1e-2)}; },
           [](const auto& v) { return l1_norm(v[0]); });
  check_op("l2_distance", [&](Rng& r) {
    const auto n = dim(r, 1, 4), d = dim(r, 1, 4);
    return std::vector{mat(r, n, d), mat(r, n, d)};
  }, [](const auto& v) { return l2_distance(v[0], v[1]); });
  check_op("mse", [&](Rng& r) {
    const auto n = dim(r, 1, 4), d = dim(r, 1, 4);
    return std::vector{mat(r, n, d), mat(r, n, d)};
  }, [](const auto& v) { return mse(v[0], v[1]); });
  check_op("entropy", [&](Rng& r) { return std::vector{mat(r, dim(r, 1, 4), dim(r, 2, 4))}; },
           [](const auto& v) { return entropy(v[0]); });
  check_op("two-layer mlp loss", [&](Rng& r) {
    return std::vector{mat(r, 8, 3), mat(r, 3, 16), random_tensor({16}, r), mat(r, 16, 2), random_tensor({2}, r)};
  }, [](const auto& v) {
    static const int labels[] = {0, 1, 1, 0, 0, 1, 0, 1};
    return softmax_cross_entropy(affine(leaky_relu(affine(v[0], v[1], v[2]), 0.2), v[3], v[4]), labels);
  });

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(seconds < 60.0);
}
