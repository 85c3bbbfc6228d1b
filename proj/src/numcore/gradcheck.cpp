#include "codis/numcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace codis {

GradCheckResult gradient_check_all(const std::function<Tensor()>& f,
                                   std::vector<Tensor> leaves, double step) {
  GradCheckResult result;
  for (auto& leaf : leaves) leaf.zero_grad();
  {
    Tensor y = f();
    backward(y);
  }
  for (auto& leaf : leaves) {
    const auto g = leaf.grad_or_zeros();
    result.analytic.insert(result.analytic.end(), g.begin(), g.end());
  }
  for (auto& leaf : leaves) {
    auto values = leaf.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double plus = f().item();
      values[i] = saved - step;
      const double minus = f().item();
      values[i] = saved;
      result.numeric.push_back((plus - minus) / (2.0 * step));
    }
  }
  for (std::size_t i = 0; i < result.analytic.size(); ++i) {
    const double a = result.analytic[i];
    const double n = result.numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), 1e-8});
    const double err = std::abs(a - n) / denom;
    // Both sides below the floor count as agreement.
    const double rel = (std::abs(a) < 1e-8 && std::abs(n) < 1e-8) ? 0.0 : err;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
    }
  }
  return result;
}

GradCheckResult gradient_check(const std::function<Tensor(const Tensor&)>& f,
                               Tensor x, double step) {
  return gradient_check_all([&] { return f(x); }, {x}, step);
}

}  // namespace codis
