#pragma once

#include <complex>
#include <random>
#include <vector>

#include "bfsep/autodiff.hpp"
#include "bfsep/grad_check.hpp"

namespace testing {

inline std::vector<double> randn(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

inline std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

inline bfsep::ad::GradPoint point(bfsep::ad::Shape shape, std::vector<double> values) {
  return {std::move(shape), std::move(values)};
}

inline bfsep::ad::GradPoint random_point(std::mt19937_64& rng, bfsep::ad::Shape shape, double scale = 1.0) {
  const std::size_t n = bfsep::ad::numel(shape);
  return {std::move(shape), randn(rng, n, scale)};
}

// Random Hermitian positive definite n x n matrix, row-major, with a chosen
// spectrum.
std::vector<std::complex<double>> random_hpd(std::mt19937_64& rng, std::size_t n,
                                             const std::vector<double>& eigenvalues);
std::vector<std::complex<double>> random_hpd(std::mt19937_64& rng, std::size_t n, double min_eig = 0.5);

double rel_l2(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace testing
