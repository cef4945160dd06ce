#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "atcon/tensor.hpp"

namespace atcon {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = true;
};

// Compares reverse-mode gradients of a scalar function against central
// differences. Per-coordinate error is |a - n| / max(|a|, |n|, abs_floor);
// the floor keeps near-zero components from turning roundoff into a huge
// relative error.
inline GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                                         double rel_tol, double h = 1e-6, double abs_floor = 1e-3) {
  Tensor x = Tensor::from(point.shape(), std::vector<double>(point.data().begin(), point.data().end()), true);
  Tensor y = f(x);
  if (y.size() != 1) throw ShapeError("finite_diff_check: function is not scalar-valued");
  backward(y);
  std::vector<double> analytic(x.size(), 0.0);
  if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());

  const auto probe = [&](const std::vector<double>& values) {
    return f(Tensor::from(point.shape(), values)).item();
  };

  std::vector<double> base(point.data().begin(), point.data().end());
  if (probe(base) != y.item()) throw Error("finite_diff_check: function is not deterministic at the base point");

  GradCheckReport report;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (probe(plus) - probe(minus)) / (2.0 * h);
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), abs_floor});
    const double err = std::fabs(analytic[i] - numeric) / denom;
    if (i == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = report.max_rel_error <= rel_tol;
  return report;
}

}  // namespace atcon
