#pragma once

#include <functional>
#include <vector>

#include "bfsep/autodiff.hpp"

namespace bfsep::ad {

// Builds a scalar from freshly created leaves on the given tape.
using ScalarFn = std::function<Tensor(Tape& tape, const std::vector<Tensor>& leaves)>;

struct GradPoint {
  Shape shape;
  std::vector<double> values;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_leaf = 0, worst_index = 0;
  double analytic = 0.0, numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients with the fourth-order central difference
// (8 (f(x + h) - f(x - h)) - (f(x + 2h) - f(x - 2h))) / (12 h), h = eps,
// coordinate by coordinate. The relative
// error of a coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Throws ValidationError for eps <= 0.
GradCheckResult grad_check(const ScalarFn& f, const std::vector<GradPoint>& point, double eps = 1e-4);

}  // namespace bfsep::ad
