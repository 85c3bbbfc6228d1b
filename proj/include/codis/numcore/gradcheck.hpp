#pragma once

#include <functional>
#include <vector>

#include "codis/numcore/tensor.hpp"

namespace codis {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares the reverse-mode gradient of a scalar function with central
/// differences (f(x+h) - f(x-h)) / 2h, coordinate by coordinate. The
/// relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
///
/// `x` must be a leaf with requires_grad; `f` is re-evaluated on perturbed
/// copies of its values, so it must be deterministic.
GradCheckResult gradient_check(const std::function<Tensor(const Tensor&)>& f,
                               Tensor x, double step = 1e-5);

/// Same check for a function of several leaves, reported over all of them.
GradCheckResult gradient_check_all(const std::function<Tensor()>& f,
                                   std::vector<Tensor> leaves,
                                   double step = 1e-5);

}  // namespace codis
