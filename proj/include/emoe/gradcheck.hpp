#pragma once
// Central finite-difference gradient checking against Tape::backward.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "emoe/tensor.hpp"

namespace emoe {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Relative error with a magnitude floor: |a - n| / max(|a|, |n|, floor).
/// Below the floor the comparison degrades to an absolute one.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Builds a scalar from leaves on a fresh tape.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares the reverse-mode gradient of `fn` at `inputs` with central
/// differences of step `h` for every element of every input.
inline GradCheckResult check_gradients(const std::vector<Tensor>& inputs, const ScalarFn& fn, double h = 1e-5,
                                       double floor = 1e-3) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    const Var root = fn(tape, leaves);
    const Gradients g = tape.backward(root);
    for (const auto& v : leaves) analytic.push_back(g[v]);
  }
  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : xs) leaves.push_back(tape.constant(t));
    return fn(tape, leaves).value().item();
  };
  GradCheckResult res;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      auto shifted = [&](double delta) {
        std::vector<double> v = inputs[i].to_vector();
        v[j] += delta;
        probe[i] = Tensor(inputs[i].shape(), std::move(v));
        const double f = eval(probe);
        probe[i] = inputs[i];
        return f;
      };
      const double numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
      const double a = analytic[i][j];
      const double err = relative_error(a, numeric, floor);
      ++res.checked;
      if (err > res.max_rel_error || res.checked == 1) {
        res.max_rel_error = std::max(res.max_rel_error, err);
        res.worst_input = i;
        res.worst_index = j;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace emoe
