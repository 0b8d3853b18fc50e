#include "support.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace testing {

std::vector<std::complex<double>> random_hpd(std::mt19937_64& rng, std::size_t n,
                                             const std::vector<double>& eigenvalues) {
  std::normal_distribution<double> d;
  Eigen::MatrixXcd g(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) g(i, j) = {d(rng), d(rng)};
  const Eigen::MatrixXcd q = Eigen::HouseholderQR<Eigen::MatrixXcd>(g).householderQ();
  Eigen::VectorXd lam(n);
  for (std::size_t i = 0; i < n; ++i) lam(i) = eigenvalues[i];
  Eigen::MatrixXcd a = q * lam.asDiagonal() * q.adjoint();
  a = 0.5 * (a + a.adjoint()).eval();
  std::vector<std::complex<double>> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a(i, j);
  return out;
}

std::vector<std::complex<double>> random_hpd(std::mt19937_64& rng, std::size_t n, double min_eig) {
  std::uniform_real_distribution<double> u(min_eig, min_eig + 3.0);
  std::vector<double> lam(n);
  for (double& l : lam) l = u(rng);
  return random_hpd(rng, n, lam);
}

double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

}  // namespace testing
