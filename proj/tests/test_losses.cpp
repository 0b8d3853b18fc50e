#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <numeric>

#include "bfsep/errors.hpp"
#include "bfsep/kernels.hpp"
#include "bfsep/losses.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bfsep;
using namespace bfsep::ad;

namespace {

Tensor vec(Tape& t, const std::vector<double>& v) { return t.constant({1, v.size()}, v); }

std::vector<double> scaled(const std::vector<double>& v, double c) {
  std::vector<double> out(v);
  for (double& x : out) x *= c;
  return out;
}

std::vector<double> delayed(const std::vector<double>& v, std::size_t k) {
  std::vector<double> out(v.size(), 0.0);
  for (std::size_t i = k; i < v.size(); ++i) out[i] = v[i - k];
  return out;
}

// Full linear convolution h * s.
std::vector<double> fir(const std::vector<double>& s, const std::vector<double>& h) {
  std::vector<double> full(s.size() + h.size() - 1);
  kernels::reference::convolve_full(s, h, full);
  return full;
}

// BSS Eval style SDR via the explicit convolution-matrix projection.
double projection_sdr(const std::vector<double>& s, const std::vector<double>& est, std::size_t taps) {
  const std::size_t n = std::max(est.size(), s.size() + taps - 1);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, taps);
  for (std::size_t k = 0; k < taps; ++k)
    for (std::size_t i = 0; i < s.size(); ++i) A(i + k, k) = s[i];
  Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < est.size(); ++i) e(i) = est[i];
  const Eigen::VectorXd proj = A * (A.completeOrthogonalDecomposition().pseudoInverse() * e);
  return 10.0 * std::log10(proj.squaredNorm() / (proj - e).squaredNorm());
}

void check_lag_only(const std::vector<double>& a, std::size_t lag) {
  for (std::size_t k = 0; k < a.size(); ++k)
    if (k != lag) CHECK(std::abs(a[k]) < 1e-8);
}

}  // namespace

TEST_CASE("f_sdr examples") {
  std::mt19937_64 rng(1);
  const std::size_t T = 4, F = 5;
  const auto dr = testing::randn(rng, T * F), di = testing::randn(rng, T * F);
  Tape t;
  const ComplexTensor d{t.constant({1, T, F}, dr), t.constant({1, T, F}, di)};
  CHECK(f_sdr_loss(d, d).item() == doctest::Approx(-100.0));
  CHECK(f_sdr_loss(d, cscale(d, 0.0)).item() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(f_sdr_loss(d, cscale(d, 2.0)).item() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(f_sdr_loss(cscale(d, 0.0), d), ValidationError);
}

TEST_CASE("sdr examples") {
  std::mt19937_64 rng(2);
  const auto d = testing::randn(rng, 200);
  Tape t;
  CHECK(sdr_loss(vec(t, d), vec(t, d)).item() == doctest::Approx(-100.0));
  CHECK(sdr_loss(vec(t, d), vec(t, scaled(d, -1.0))).item() == doctest::Approx(10 * std::log10(4.0)));
  // ||e||^2 / ||d||^2 = 0.01
  auto e = testing::randn(rng, 200);
  double ee = 0.0, dd = 0.0;
  for (std::size_t i = 0; i < 200; ++i) {
    ee += e[i] * e[i];
    dd += d[i] * d[i];
  }
  std::vector<double> noisy(d);
  for (std::size_t i = 0; i < 200; ++i) noisy[i] += e[i] * std::sqrt(0.01 * dd / ee);
  CHECK(sdr_loss(vec(t, d), vec(t, noisy)).item() == doctest::Approx(-20.0));
  for (double c : {-2.0, 0.5, 3.0})
    CHECK(sdr_loss(vec(t, d), vec(t, scaled(d, c))).item() == doctest::Approx(10 * std::log10((c - 1) * (c - 1))));
}

TEST_CASE("si_sdr examples") {
  std::mt19937_64 rng(3);
  const auto d = testing::randn(rng, 2048);
  const auto est = testing::randn(rng, 2048);
  Tape t;
  CHECK(si_sdr_loss(vec(t, d), vec(t, scaled(d, -3.0))).item() == doctest::Approx(-100.0));
  CHECK(std::abs(si_sdr_loss(vec(t, d), vec(t, est)).item() - si_sdr_loss(vec(t, d), vec(t, scaled(est, 2.0))).item()) <
        1e-10);
  const auto late = delayed(d, 8);
  const double si = si_sdr_loss(vec(t, d), vec(t, late)).item();
  LossConfig cfg;
  const double ci = ci_sdr_loss(vec(t, d), vec(t, late), cfg, 16000).item();
  CHECK(si - ci >= 20.0);
}

TEST_CASE("wiener_hopf_filter") {
  std::mt19937_64 rng(4);
  const auto s = testing::randn(rng, 4096);
  for (WienerSolver solver : {WienerSolver::kDirectNormalEquations, WienerSolver::kToeplitzLevinson}) {
    const auto a = wiener_hopf_filter(s, s, 512, solver);
    CHECK(std::abs(a[0] - 1.0) < 1e-7);
    double rest = 0.0;
    for (std::size_t k = 1; k < a.size(); ++k) rest = std::max(rest, std::abs(a[k]));
    CHECK(rest < 1e-8);

    std::vector<double> late(37, 0.0);
    late.insert(late.end(), s.begin(), s.end());
    const auto b = wiener_hopf_filter(s, late, 512, solver);
    CHECK(std::abs(b[37] - 1.0) < 1e-7);
    check_lag_only(b, 37);
  }
  SUBCASE("recovers a known 100-tap FIR") {
    const auto h = testing::randn(rng, 100, 0.3);
    std::vector<double> full(s.size() + h.size() - 1);
    kernels::reference::convolve_full(s, h, full);
    const auto a = wiener_hopf_filter(s, full, 100);
    CHECK(testing::rel_l2(a, h) < 1e-6);
  }
  SUBCASE("backends agree") {
    for (int k = 0; k < 50; ++k) {
      const auto x = testing::randn(rng, 600);
      const auto y = testing::randn(rng, 600);
      const auto a1 = wiener_hopf_filter(x, y, 64, WienerSolver::kDirectNormalEquations);
      const auto a2 = wiener_hopf_filter(x, y, 64, WienerSolver::kToeplitzLevinson);
      CHECK(testing::rel_l2(a2, a1) < 1e-6);
    }
  }
  SUBCASE("residual is orthogonal to shifts of the reference") {
    const auto y = testing::randn(rng, 1000);
    const auto x = testing::randn(rng, 1000);
    const auto a = wiener_hopf_filter(x, y, 32);
    std::vector<double> fit(x.size() + 31);
    kernels::reference::convolve_full(x, a, fit);
    std::vector<double> res(fit.size());
    for (std::size_t i = 0; i < fit.size(); ++i) res[i] = fit[i] - (i < y.size() ? y[i] : 0.0);
    std::vector<double> c(32);
    kernels::reference::xcorr(x, res, c);
    double scale = 0.0;
    for (double v : y) scale += v * v;
    for (double v : c) CHECK(std::abs(v) < 1e-6 * scale);
  }
  CHECK_THROWS_AS(wiener_hopf_filter(std::vector<double>(100, 1.0), std::vector<double>(100, 1.0), 100),
                  ValidationError);
}

TEST_CASE("ci_sdr") {
  std::mt19937_64 rng(5);
  const auto s = testing::randn(rng, 4096);
  Tape t;
  CHECK(ci_sdr_loss(vec(t, s), vec(t, s)).item() == doctest::Approx(-100.0));
  for (int k = 0; k < 5; ++k) {
    const auto h = testing::randn(rng, 300);
    CHECK(-ci_sdr_metric(s, fir(s, h), 512) <= -60.0);
  }
  SUBCASE("matches the projection oracle") {
    for (int k = 0; k < 5; ++k) {
      const auto src = testing::randn(rng, 300);
      auto est = fir(src, testing::randn(rng, 5));
      for (double& v : est) v += 0.3 * std::normal_distribution<double>()(rng);
      CHECK(std::abs(ci_sdr_metric(src, est, 16) - projection_sdr(src, est, 16)) < 1e-6);
    }
  }
  SUBCASE("degenerate filter names the speaker") {
    const auto src = testing::randn(rng, 200);
    std::vector<double> zeros(200, 0.0);
    try {
      Tape tt;
      const Tensor a = tt.constant({2, 200}, [&] {
        std::vector<double> both(src);
        both.insert(both.end(), src.begin(), src.end());
        return both;
      }());
      std::vector<double> est(src);
      est.insert(est.end(), zeros.begin(), zeros.end());
      LossConfig cfg;
      cfg.ci_filter_taps = 16;
      ci_sdr_loss(a, tt.constant({2, 200}, est), cfg, 16000);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("speaker 1") != std::string::npos);
    }
  }
}

TEST_CASE("monotonic in added noise") {
  std::mt19937_64 rng(6);
  const auto d = testing::randn(rng, 1024);
  const auto e = testing::randn(rng, 1024);
  std::map<std::string, double> prev;
  for (double level : {0.01, 0.03, 0.1, 0.3, 1.0}) {
    std::vector<double> est(d);
    for (std::size_t i = 0; i < d.size(); ++i) est[i] += level * e[i];
    Tape t;
    LossConfig cfg;
    cfg.ci_filter_taps = 32;
    const std::map<std::string, double> cur = {
        {"sdr", sdr_loss(vec(t, d), vec(t, est)).item()},
        {"si_sdr", si_sdr_loss(vec(t, d), vec(t, est)).item()},
        {"ci_sdr", ci_sdr_loss(vec(t, d), vec(t, est), cfg).item()},
        {"f_sdr", f_sdr_loss(ComplexTensor{t.constant({1, 32, 32}, d), t.constant({1, 32, 32}, 0.0)},
                             ComplexTensor{t.constant({1, 32, 32}, est), t.constant({1, 32, 32}, 0.0)})
                      .item()}};
    for (const auto& [name, v] : cur) {
      INFO(name << " at level " << level);
      if (prev.count(name)) CHECK(v > prev[name]);
    }
    prev = cur;
  }
}

TEST_CASE("losses pass grad_check") {
  std::mt19937_64 rng(7);
  const std::size_t L = 40;
  std::vector<double> tgt = testing::randn(rng, 2 * L);
  const auto check = [&](const char* name, const ScalarFn& f) {
    const GradCheckResult r = grad_check(f, {testing::random_point(rng, {2, L})});
    INFO(name << " analytic " << r.analytic << " numeric " << r.numeric);
    CHECK(r.max_relative_error < 1e-4);
  };
  check("sdr", [&](Tape& t, const std::vector<Tensor>& l) { return sdr_loss(t.constant({2, L}, tgt), l[0]); });
  check("si_sdr", [&](Tape& t, const std::vector<Tensor>& l) { return si_sdr_loss(t.constant({2, L}, tgt), l[0]); });
  LossConfig cfg;
  cfg.ci_filter_taps = 8;
  check("ci_sdr", [&](Tape& t, const std::vector<Tensor>& l) {
    return ci_sdr_loss(t.constant({2, L}, tgt), l[0], cfg, 16000);
  });
  cfg.ci_solver = WienerSolver::kToeplitzLevinson;
  check("ci_sdr levinson", [&](Tape& t, const std::vector<Tensor>& l) {
    return ci_sdr_loss(t.constant({2, L}, tgt), l[0], cfg, 16000);
  });
  check("f_sdr", [&](Tape& t, const std::vector<Tensor>& l) {
    const Tensor im = t.constant({2, 4, 10}, 0.25);
    return f_sdr_loss(ComplexTensor{t.constant({2, 4, 10}, tgt), im},
                      ComplexTensor{reshape(l[0], {2, 4, 10}), scale(reshape(l[0], {2, 4, 10}), -0.5)});
  });
}

TEST_CASE("pit") {
  std::mt19937_64 rng(8);
  SUBCASE("single speaker") {
    Tape t;
    const PitResult r = pit_wrap(1, 1, [&](std::size_t, std::size_t) { return t.scalar(4.5); });
    CHECK(r.permutation == std::vector<std::size_t>{0});
    CHECK(r.loss.item() == 4.5);
  }
  SUBCASE("swapped estimates") {
    const auto a = testing::randn(rng, 256), b = testing::randn(rng, 256);
    const std::vector<std::vector<double>> tg = {a, b};
    const std::vector<std::vector<double>> est = {scaled(b, 0.9), scaled(a, 1.1)};
    Tape t;
    const PitResult swapped = pit_wrap(2, 2, [&](std::size_t i, std::size_t j) {
      return sdr_term(t.constant({256}, tg[i]), t.constant({256}, est[j]), 1e-10);
    });
    CHECK(swapped.permutation == std::vector<std::size_t>{1, 0});
    const PitResult direct = pit_wrap(2, 2, [&](std::size_t i, std::size_t j) {
      return sdr_term(t.constant({256}, tg[i]), t.constant({256}, est[1 - j]), 1e-10);
    });
    CHECK(direct.permutation == std::vector<std::size_t>{0, 1});
    CHECK(direct.loss.item() == doctest::Approx(swapped.loss.item()).epsilon(1e-14));
  }
  SUBCASE("equals exhaustive enumeration and never exceeds identity") {
    for (std::size_t n : {2, 3}) {
      for (int trial = 0; trial < 50; ++trial) {
        const auto m = testing::randn(rng, n * n);
        Tape t;
        const PitResult r = pit_wrap(n, n, [&](std::size_t i, std::size_t j) { return t.scalar(m[i * n + j]); });
        std::vector<std::size_t> p(n);
        std::iota(p.begin(), p.end(), 0);
        double best = 1e300, identity = 0.0;
        for (std::size_t i = 0; i < n; ++i) identity += m[i * n + i] / n;
        do {
          double v = 0.0;
          for (std::size_t i = 0; i < n; ++i) v += m[i * n + p[i]] / n;
          best = std::min(best, v);
        } while (std::next_permutation(p.begin(), p.end()));
        CHECK(r.loss.item() == doctest::Approx(best).epsilon(1e-14));
        CHECK(r.loss.item() <= identity + 1e-15);
        const PitResult s = pit_search(n, [&](std::span<const std::size_t> q) {
          double v = 0.0;
          for (std::size_t i = 0; i < n; ++i) v += m[i * n + q[i]] / n;
          return t.scalar(v);
        });
        CHECK(s.permutation == r.permutation);
      }
    }
  }
  SUBCASE("gradient flows only through the chosen assignment") {
    Tape t;
    const Tensor x = t.leaf({2}, {1.0, 5.0});
    const PitResult r = pit_wrap(2, 2, [&](std::size_t i, std::size_t j) {
      const Tensor xi = slice(x, 0, i, 1);
      return sum(i == j ? scale(xi, 3.0) : xi);
    });
    CHECK(r.permutation == std::vector<std::size_t>{1, 0});
    const auto g = t.backward(r.loss).at(x);
    CHECK(g == std::vector<double>{0.5, 0.5});
  }
  CHECK_THROWS_AS(pit_wrap(2, 3, [](std::size_t, std::size_t) { return Tensor{}; }), ValidationError);
}
