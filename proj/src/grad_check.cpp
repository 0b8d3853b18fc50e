#include "bfsep/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "bfsep/errors.hpp"

namespace bfsep::ad {

namespace {

double evaluate(const ScalarFn& f, const std::vector<GradPoint>& point) {
  Tape tape;
  NoGradGuard guard(tape);
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const GradPoint& p : point) leaves.push_back(tape.leaf(p.shape, p.values));
  return f(tape, leaves).item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const std::vector<GradPoint>& point, double eps) {
  if (!(eps > 0.0)) throw ValidationError("grad_check: eps must be positive");

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Tensor> leaves;
    for (const GradPoint& p : point) leaves.push_back(tape.leaf(p.shape, p.values));
    const Tensor loss = f(tape, leaves);
    const GradientMap grads = tape.backward(loss);
    for (const Tensor& leaf : leaves) analytic.push_back(grads.at(leaf));
  }

  GradCheckResult result;
  std::vector<GradPoint> probe = point;
  for (std::size_t l = 0; l < point.size(); ++l) {
    for (std::size_t i = 0; i < point[l].values.size(); ++i) {
      const double x0 = point[l].values[i];
      const auto at = [&](double offset) {
        probe[l].values[i] = x0 + offset;
        return evaluate(f, probe);
      };
      const double numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
      probe[l].values[i] = x0;
      const double a = analytic[l][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.coordinates;
      if (err > result.max_relative_error || result.coordinates == 1) {
        result.max_relative_error = std::max(err, result.max_relative_error);
        result.worst_leaf = l;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace bfsep::ad
