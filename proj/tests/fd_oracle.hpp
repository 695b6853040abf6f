#pragma once

// Central finite differences against tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "graftlab/tensor.hpp"

namespace fdtest {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -3.0,
                                         double hi = 3.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// Relative error with a floor so that near-zero gradients compare absolutely.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// f builds a scalar loss from leaves on a fresh tape. Returns the worst
// relative error over every coordinate of every input.
inline double max_grad_error(std::vector<graftlab::Tensor> inputs,
                             const std::function<graftlab::Var(graftlab::Tape&,
                                                               std::vector<graftlab::Var>&)>& f,
                             double h = 1e-5) {
  using namespace graftlab;
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    Var loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) {
      auto g = v.grad();
      std::vector<double> gv(g.begin(), g.end());
      gv.resize(numel(v.shape()), 0.0);
      analytic.push_back(std::move(gv));
    }
  }
  auto eval = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return f(tape, vars).item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      double orig = inputs[i].data[j];
      inputs[i].data[j] = orig + h;
      double up = eval();
      inputs[i].data[j] = orig - h;
      double down = eval();
      inputs[i].data[j] = orig;
      double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[i][j], numeric));
    }
  }
  return worst;
}

}  // namespace fdtest
