#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "spiga/error.hpp"
#include "spiga/tensor.hpp"

namespace spiga {

// Deterministic scalar objective over a set of input tensors.
using ScalarFn = std::function<double(const std::vector<Tensor>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_element = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central-difference check of analytic gradients. Every element of every input
// is perturbed by +/- eps; the relative error is |numeric - analytic| divided
// by max(1, |analytic|), so tiny gradients are compared absolutely.
inline GradCheck finite_diff_check(const ScalarFn& fn, std::vector<Tensor> inputs,
                                   const std::vector<Tensor>& analytic, double eps = 1e-5) {
  if (eps < 1e-7 || eps > 1e-3)
    throw ContractError("finite_diff_check eps must lie in [1e-7, 1e-3], got " + std::to_string(eps));
  if (analytic.size() != inputs.size())
    throw DimensionError("finite_diff_check: " + std::to_string(inputs.size()) + " inputs but " +
                         std::to_string(analytic.size()) + " analytic gradients");
  GradCheck result;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (!inputs[t].same_shape(analytic[t]))
      throw DimensionError("finite_diff_check: gradient " + std::to_string(t) + " shape " +
                           analytic[t].shape_string() + " does not match input " +
                           inputs[t].shape_string());
    for (std::size_t e = 0; e < inputs[t].size(); ++e) {
      const double orig = inputs[t][e];
      inputs[t][e] = orig + eps;
      const double fp = fn(inputs);
      inputs[t][e] = orig - eps;
      const double fm = fn(inputs);
      inputs[t][e] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("finite_diff_check: non-finite objective perturbing input " +
                           std::to_string(t) + " element " + std::to_string(e));
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[t][e];
      const double rel = std::abs(numeric - a) / std::max(1.0, std::abs(a));
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = t;
        result.worst_element = e;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace spiga
