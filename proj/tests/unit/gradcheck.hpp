#pragma once

// Central finite-difference gradient checks for ndgrad graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "extrap/ndgrad.hpp"
#include "extrap/rng.hpp"

namespace gradcheck {

using extrap::Rng;
using extrap::ndgrad::Shape;
using extrap::ndgrad::Tensor;
using extrap::ndgrad::Var;

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, double min_abs = 0.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) {
    do {
      v = scale * rng.normal();
    } while (std::abs(v) < min_abs);
  }
  return t;
}

// Reduces any output to a scalar with fixed random weights, so every output
// entry contributes to the checked gradient.
inline Var weighted_sum(const Var& out, Rng& rng) {
  Tensor w = random_tensor(out.shape(), rng);
  return extrap::ndgrad::sum(extrap::ndgrad::mul(out, Var::constant(std::move(w))));
}

using Fn = std::function<Var(const std::vector<Var>&)>;

// |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, floor), worst input.
inline double max_relative_error(const Fn& f, const std::vector<Tensor>& inputs, double h = 1e-5,
                                 double floor = 1e-8) {
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(Var::parameter(t));
  Var root = f(vars);
  extrap::ndgrad::backward(root);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> numeric(inputs[k].size());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Var> shifted;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          shifted.push_back(Var::constant(std::move(t)));
        }
        return f(shifted).item();
      };
      numeric[i] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    const Tensor& analytic = vars[k].grad();
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = analytic.size() ? analytic[i] : 0.0;
      diff += (a - numeric[i]) * (a - numeric[i]);
      na += a * a;
      nn += numeric[i] * numeric[i];
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor}));
  }
  return worst;
}

}  // namespace gradcheck
