#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "satmark/ndiff/tape.hpp"

namespace satmark::ndiff {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Eigen::Index worst_input = -1;
  Eigen::Index worst_index = -1;
  std::size_t components = 0;
  bool passed = true;
};

// Scalar function of several tensors, expressed on a tape.
template <typename Scalar>
using TapeFunction = std::function<Var<Scalar>(Tape<Scalar>&, const std::vector<Var<Scalar>>&)>;

// Compares tape gradients with central differences, component by component.
// Relative error is |g - fd| / max(|g|, |fd|, floor).
template <typename Scalar>
GradCheckReport grad_check(const TapeFunction<Scalar>& f, std::vector<Tensor<Scalar>> inputs, double step = 1e-3,
                           double tolerance = 1e-3, double floor = 1e-3) {
  auto evaluate = [&](std::vector<Tensor<Scalar>>& xs, bool with_grad) -> double {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> vars;
    vars.reserve(xs.size());
    for (auto& x : xs) {
      x.requires_grad = with_grad;
      x.grad.reset();
      vars.push_back(tape.leaf(x));
    }
    Var<Scalar> y = f(tape, vars);
    if (with_grad) tape.backward(y);
    return static_cast<double>(y.item());
  };

  evaluate(inputs, true);
  std::vector<ArrayX<Scalar>> analytic;
  for (auto& x : inputs) analytic.push_back(x.grad ? *x.grad : ArrayX<Scalar>::Zero(x.numel()));

  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index j = 0; j < inputs[i].numel(); ++j) {
      const Scalar orig = inputs[i].data[j];
      inputs[i].data[j] = orig + static_cast<Scalar>(step);
      const double fp = evaluate(inputs, false);
      inputs[i].data[j] = orig - static_cast<Scalar>(step);
      const double fm = evaluate(inputs, false);
      inputs[i].data[j] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double g = static_cast<double>(analytic[i][j]);
      const double abs_err = std::abs(g - fd);
      const double rel = abs_err / std::max({std::abs(g), std::abs(fd), floor});
      ++report.components;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = static_cast<Eigen::Index>(i);
        report.worst_index = j;
      }
    }
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace satmark::ndiff
