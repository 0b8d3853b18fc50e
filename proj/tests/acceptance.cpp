// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails.
//
//   acceptance            run all criteria
//   acceptance 3 5        run criteria 3 and 5
//   acceptance --desk-dir DIR 9 10
//
// Criteria 9 and 10 train two desk-scale systems; 9 writes its results to
// <desk-dir>/results.json and 10 reuses them when present.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include "bfsep/beamforming.hpp"
#include "bfsep/complex.hpp"
#include "bfsep/errors.hpp"
#include "bfsep/grad_check.hpp"
#include "bfsep/kernels.hpp"
#include "bfsep/trainer.hpp"
#include "support.hpp"

using namespace bfsep;
using namespace bfsep::ad;
using cd = std::complex<double>;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path g_desk_dir = "acceptance_desk";

// ---------------------------------------------------------------- 1

Outcome stft_round_trip() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  const std::vector<StftConfig> configs{{512, 128}, {256, 64}, {1024, 256}, {128, 32}, {64, 32}};
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const StftConfig c = configs[static_cast<std::size_t>(k) % configs.size()];
    const std::size_t channels = 1 + rng() % 7;
    const std::size_t length = 500 + rng() % 20000;
    MultichannelWaveform x;
    for (std::size_t m = 0; m < channels; ++m) x.channels.push_back({testing::randn(rng, length), 16000});
    const MultichannelWaveform y = istft(stft(x, c), length);
    double num = 0.0, den = 0.0;
    for (std::size_t m = 0; m < channels; ++m)
      for (std::size_t n = 0; n < length; ++n) {
        const double d = y.channels[m].samples[n] - x.channels[m].samples[n];
        num += d * d;
        den += x.channels[m].samples[n] * x.channels[m].samples[n];
      }
    worst = std::max(worst, std::sqrt(num / den));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && secs < 10.0,
          fmt("max relative L2 error %.2e over 100 signals (limit 1e-6), %.2f s (limit 10 s)", worst, secs)};
}

// ---------------------------------------------------------------- 2

Tensor contract(Tape& tape, const Tensor& y) {
  std::mt19937_64 rng(y.numel() * 7919 + 17);
  return sum(y * tape.constant(y.shape(), testing::randn(rng, y.numel())));
}

Tensor ccontract(Tape& tape, const ComplexTensor& z) { return contract(tape, z.re) + contract(tape, z.im); }

using PointFn = std::function<std::vector<GradPoint>(std::mt19937_64&)>;

PointFn normal_points(std::vector<Shape> ss) {
  return [ss](std::mt19937_64& rng) {
    std::vector<GradPoint> p;
    for (const Shape& s : ss) p.push_back(testing::random_point(rng, s));
    return p;
  };
}

PointFn positive_points(std::vector<Shape> ss) {
  return [ss](std::mt19937_64& rng) {
    std::vector<GradPoint> p;
    for (const Shape& s : ss) p.push_back({s, testing::uniform(rng, numel(s), 0.5, 2.0)});
    return p;
  };
}

struct OpCase {
  std::string name;
  ScalarFn f;
  PointFn points;
};

std::vector<OpCase> op_cases() {
  auto cx = [](const std::vector<Tensor>& l, std::size_t i) { return ComplexTensor{l[2 * i], l[2 * i + 1]}; };
  const Shape s{3, 4}, m{2, 3, 3};
  std::vector<OpCase> ops{
      {"add", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, l[0] + l[1]); }, normal_points({{2, 3, 4}, {3, 1}})},
      {"sub", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, l[0] - l[1]); }, normal_points({s, s})},
      {"mul", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, l[0] * l[1]); }, normal_points({{2, 3, 4}, {4}})},
      {"div", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, l[0] / l[1]); }, positive_points({s, {}})},
      {"neg", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, -l[0]); }, normal_points({s})},
      {"scale", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, scale(l[0], -1.7)); }, normal_points({s})},
      {"add_scalar", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, add_scalar(l[0], 0.4)); }, normal_points({s})},
      {"square", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, square(l[0])); }, normal_points({s})},
      {"sqrt", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, ad::sqrt(l[0])); }, positive_points({s})},
      {"exp", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, ad::exp(l[0])); }, normal_points({s})},
      {"log", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, ad::log(l[0])); }, positive_points({s})},
      {"log10", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, ad::log10(l[0])); }, positive_points({s})},
      {"sigmoid", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, sigmoid(l[0])); }, normal_points({s})},
      {"tanh", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, ad::tanh(l[0])); }, normal_points({s})},
      {"clamp_min", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, clamp_min(l[0], 0.1)); }, positive_points({s})},
      {"sum", [](Tape&, const std::vector<Tensor>& l) { return ad::sum(square(l[0])); }, normal_points({{5}})},
      {"mean", [](Tape&, const std::vector<Tensor>& l) { return mean(square(l[0])); }, normal_points({{2, 3}})},
      {"sum_axis", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, sum_axis(l[0], 1)); }, normal_points({{2, 3, 4}})},
      {"reshape", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, reshape(l[0], {4, 3})); }, normal_points({{2, 6}})},
      {"permute", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, permute(l[0], {2, 0, 1})); }, normal_points({{2, 3, 4}})},
      {"transpose", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, transpose(l[0])); }, normal_points({{2, 3, 4}})},
      {"slice", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, slice(l[0], 1, 1, 2)); }, normal_points({{2, 4, 3}})},
      {"concat", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, concat({l[0], l[1]}, 1)); }, normal_points({{2, 3}, {2, 2}})},
      {"pad", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, pad(l[0], 0, 2, 1)); }, normal_points({{3, 2}})},
      {"matmul", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, matmul(l[0], l[1])); }, normal_points({{2, 3, 4}, {4, 2}})},
      {"solve", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, solve(l[0], l[1])); },
       [](std::mt19937_64& rng) {
         std::vector<double> a = testing::randn(rng, 2 * 16, 0.3);
         for (std::size_t b = 0; b < 2; ++b)
           for (std::size_t i = 0; i < 4; ++i) a[b * 16 + i * 4 + i] += 3.0;
         return std::vector<GradPoint>{{{2, 4, 4}, a}, testing::random_point(rng, {2, 4, 2})};
       }},
      {"xcorr", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, xcorr(l[0], l[1], 4)); }, normal_points({{9}, {11}})},
      {"conv_full", [](Tape& t, const std::vector<Tensor>& l) { return contract(t, conv_full(l[0], l[1])); }, normal_points({{7}, {3}})},
      {"cmul", [cx](Tape& t, const std::vector<Tensor>& l) { return ccontract(t, cmul(cx(l, 0), cx(l, 1))); }, normal_points({m, m, m, m})},
      {"cdiv", [cx](Tape& t, const std::vector<Tensor>& l) { return ccontract(t, cdiv(cx(l, 0), cx(l, 1))); }, positive_points({m, m, m, m})},
      {"cabs2", [cx](Tape& t, const std::vector<Tensor>& l) { return contract(t, cabs2(cx(l, 0))); }, normal_points({m, m})},
      {"cmatmul", [cx](Tape& t, const std::vector<Tensor>& l) { return ccontract(t, cmatmul(cx(l, 0), cx(l, 1))); },
       normal_points({m, m, {2, 3, 2}, {2, 3, 2}})},
      {"cherm", [cx](Tape& t, const std::vector<Tensor>& l) { return ccontract(t, cherm(cx(l, 0))); }, normal_points({{2, 3, 2}, {2, 3, 2}})},
      {"csolve", [cx](Tape& t, const std::vector<Tensor>& l) { return ccontract(t, csolve(cx(l, 0), cx(l, 1))); },
       [](std::mt19937_64& rng) {
         const auto a = testing::random_hpd(rng, 3);
         std::vector<double> re(9), im(9);
         for (std::size_t i = 0; i < 9; ++i) {
           re[i] = a[i].real();
           im[i] = a[i].imag();
         }
         return std::vector<GradPoint>{{{1, 3, 3}, re}, {{1, 3, 3}, im}, testing::random_point(rng, {1, 3, 1}),
                                       testing::random_point(rng, {1, 3, 1})};
       }},
  };
  StftConfig stft_config{16, 4};
  ops.push_back({"istft",
                 [stft_config](Tape& t, const std::vector<Tensor>& l) {
                   return contract(t, istft_op(ComplexTensor{l[0], l[1]}, stft_config, 48));
                 },
                 normal_points({{2, 12, 9}, {2, 12, 9}})});
  // The Wiener-Hopf solve node, reached through the CI-SDR term.
  ops.push_back({"wiener_solve",
                 [](Tape&, const std::vector<Tensor>& l) {
                   static const WienerHopf wh = [] {
                     std::mt19937_64 rng(3);
                     return WienerHopf(testing::randn(rng, 40), 6, WienerSolver::kToeplitzLevinson);
                   }();
                   return ci_sdr_term(wh, l[0], 1e-10);
                 },
                 normal_points({{40}})});
  return ops;
}

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t cases = 0;
  for (const auto& op : op_cases()) {
    std::mt19937_64 rng(std::hash<std::string>{}(op.name));
    for (int k = 0; k < 5; ++k) {
      const auto r = grad_check(op.f, op.points(rng));
      ++cases;
      if (r.max_relative_error > worst) {
        worst = r.max_relative_error;
        worst_name = op.name;
      }
    }
  }
  std::map<std::string, double> composite;
  for (LossKind kind : {LossKind::kCiSdr, LossKind::kSiSdr, LossKind::kSdr, LossKind::kFSdr})
    for (std::uint64_t seed : {1u, 2u}) {
      const auto r = pipeline_grad_check(kind, seed, 3);
      const std::string name = "pipeline/" + to_string(kind);
      composite[name] = std::max(composite[name], r.max_relative_error);
      if (r.max_relative_error > worst) {
        worst = r.max_relative_error;
        worst_name = name;
      }
    }
  const double secs = seconds_since(t0);
  std::string per;
  for (const auto& [k, v] : composite) per += fmt(" %s %.1e", k.c_str(), v);
  return {worst < 1e-4 && secs < 120.0,
          fmt("%zu op instances + 8 pipeline instances; worst %.2e (%s), limit 1e-4;", cases, worst,
              worst_name.c_str()) +
              per + fmt("; %.1f s (limit 120 s)", secs)};
}

// ---------------------------------------------------------------- 3

Outcome distortionless() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t M = 2 + rng() % 7;
    // Conditioning spread from well-posed to 1e4.
    const double spread = std::pow(10.0, std::uniform_real_distribution<double>(0.0, 4.0)(rng));
    std::vector<double> lam(M);
    for (std::size_t i = 0; i < M; ++i) lam[i] = std::pow(spread, static_cast<double>(i) / static_cast<double>(M - 1));
    const auto rn = testing::random_hpd(rng, M, lam);
    const std::size_t ref = rng() % M;
    std::vector<cd> v(M);
    for (auto& x : v) x = {nd(rng), nd(rng)};
    v[ref] = 1.0;
    Tape t;
    const auto w = mvdr_weights(complex_constant(t, {1, 1, M, M}, rn), RtfVector{complex_constant(t, {1, 1, M, 1}, v), ref})
                       .values.values();
    cd whv = 0.0;
    for (std::size_t i = 0; i < M; ++i) whv += std::conj(w[i]) * v[i];
    worst = std::max(worst, std::abs(whv - 1.0));
  }
  return {worst < 1e-8, fmt("max |w^H v - 1| = %.2e over 1000 pairs, M in [2, 8], cond up to 1e4 (limit 1e-8)", worst)};
}

// ---------------------------------------------------------------- 4

// Independent oracle: principal generalised eigenvector of (R_d, R_n) from
// Eigen's generalised solver, mapped to the RTF R_n x / (R_n x)_ref.
std::vector<cd> oracle_rtf(const std::vector<cd>& rd, const std::vector<cd>& rn, std::size_t M, std::size_t ref) {
  Eigen::MatrixXcd D(M, M), N(M, M);
  for (std::size_t i = 0; i < M * M; ++i) {
    D(i / M, i % M) = rd[i];
    N(i / M, i % M) = rn[i];
  }
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXcd> es(D, N);
  const Eigen::VectorXcd x = es.eigenvectors().col(M - 1);
  const Eigen::VectorXcd v = N * x / (N * x)(ref);
  return {v.data(), v.data() + M};
}

double angle(const std::vector<cd>& a, const std::vector<cd>& b) {
  cd dot = 0.0;
  double na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += std::conj(a[k]) * b[k];
    na += std::norm(a[k]);
    nb += std::norm(b[k]);
  }
  return std::acos(std::min(1.0, std::abs(dot) / std::sqrt(na * nb)));
}

Outcome rtf_consistency() {
  std::mt19937_64 rng(4);
  double worst30 = 0.0, worst3 = 0.0, worst_eigh = 0.0;
  std::size_t fail3 = 0, trials = 0;
  for (std::size_t M : {4u, 7u})
    for (int trial = 0; trial < 100; ++trial, ++trials) {
      // Pencil eigenvalues: lambda_1 / lambda_2 in [2, 4], the rest below lambda_2.
      std::vector<double> spectrum(M);
      spectrum[1] = 1.0;
      spectrum[0] = std::uniform_real_distribution<double>(2.0, 4.0)(rng);
      for (std::size_t i = 2; i < M; ++i) spectrum[i] = std::uniform_real_distribution<double>(0.1, 0.95)(rng);
      const auto rn = testing::random_hpd(rng, M);
      const auto core = testing::random_hpd(rng, M, spectrum);
      Eigen::MatrixXcd N(M, M), C(M, M);
      for (std::size_t i = 0; i < M * M; ++i) {
        N(i / M, i % M) = rn[i];
        C(i / M, i % M) = core[i];
      }
      const Eigen::MatrixXcd L = N.llt().matrixL();
      const Eigen::MatrixXcd D = L * C * L.adjoint();
      std::vector<cd> rd(M * M);
      for (std::size_t i = 0; i < M * M; ++i) rd[i] = D(i / M, i % M);

      Tape t;
      const auto rdt = complex_constant(t, {1, 1, M, M}, rd), rnt = complex_constant(t, {1, 1, M, M}, rn);
      const auto eig = rtf_eigh(rdt, rnt, 0).values.values();
      const auto p30 = rtf_power_iteration(rdt, rnt, 0, 30).values.values();
      const auto p3 = rtf_power_iteration(rdt, rnt, 0, 3).values.values();
      worst_eigh = std::max(worst_eigh, angle(eig, oracle_rtf(rd, rn, M, 0)));
      worst30 = std::max(worst30, angle(p30, eig));
      const double a3 = angle(p3, eig);
      worst3 = std::max(worst3, a3);
      fail3 += a3 >= 0.05;
    }
  const bool pass = worst30 < 1e-6 && worst3 < 0.05 && worst_eigh < 1e-6;
  return {pass, fmt("%zu pencils, eigen ratio in [2, 4], M in {4, 7}: eta=30 worst angle %.2e rad (limit 1e-6); "
                    "eta=3 worst angle %.3f rad, %zu/%zu at or above 0.05 rad (limit 0.05); "
                    "eigh vs independent solver %.2e rad",
                    trials, worst30, worst3, fail3, trials, worst_eigh)};
}

// ---------------------------------------------------------------- 5

std::vector<double> convolve(const std::vector<double>& s, const std::vector<double>& h) {
  std::vector<double> out(s.size() + h.size() - 1);
  kernels::reference::convolve_full(s, h, out);
  return out;
}

Outcome ci_sdr_invariance() {
  std::mt19937_64 rng(5);
  double worst_ci = 1e300;
  std::vector<double> si;
  bool finite = true;
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = testing::randn(rng, 8000);
    // Room-like FIR: a delayed peak and a decaying random tail, at most 512 taps.
    const std::size_t taps = 64 + rng() % (512 - 64 + 1);
    const std::size_t delay = 1 + rng() % (taps / 2);
    std::vector<double> h(taps, 0.0);
    h[delay] = 1.0;
    std::normal_distribution<double> nd;
    for (std::size_t k = delay + 1; k < taps; ++k)
      h[k] = 0.5 * nd(rng) * std::exp(-static_cast<double>(k - delay) / (0.2 * static_cast<double>(taps)));
    const auto y = convolve(s, h);
    std::vector<double> target(s);
    target.resize(y.size(), 0.0);
    worst_ci = std::min(worst_ci, ci_sdr_metric(s, y, 512));
    const double v = si_sdr_metric(target, y);
    finite = finite && std::isfinite(v);
    si.push_back(v);
  }
  std::sort(si.begin(), si.end());
  const double median = si[si.size() / 2];
  const auto below = static_cast<std::size_t>(std::count_if(si.begin(), si.end(), [](double v) { return v < 10.0; }));
  return {worst_ci >= 60.0 && finite && median < 10.0,
          fmt("50 pairs, FIR 64-512 taps with delay: min CI-SDR %.1f dB (limit 60); SI-SDR finite=%s, "
              "median %.2f dB, %zu/50 below 10 dB",
              worst_ci, finite ? "yes" : "no", median, below)};
}

// ---------------------------------------------------------------- 6

double projection_sdr(const std::vector<double>& s, const std::vector<double>& est, std::size_t taps) {
  const std::size_t n = std::max(est.size(), s.size() + taps - 1);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(taps));
  for (std::size_t k = 0; k < taps; ++k)
    for (std::size_t i = 0; i < s.size(); ++i) A(static_cast<Eigen::Index>(i + k), static_cast<Eigen::Index>(k)) = s[i];
  Eigen::VectorXd e = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < est.size(); ++i) e(static_cast<Eigen::Index>(i)) = est[i];
  const Eigen::VectorXd proj = A * (A.completeOrthogonalDecomposition().pseudoInverse() * e);
  return 10.0 * std::log10(proj.squaredNorm() / (proj - e).squaredNorm());
}

Outcome ci_sdr_oracle() {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t len = 200 + rng() % 300, taps = 4 + rng() % 29;
    const auto s = testing::randn(rng, len);
    auto est = convolve(s, testing::randn(rng, 1 + rng() % taps));
    est.resize(len + rng() % taps);
    const double noise = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    for (double& v : est) v += noise * std::normal_distribution<double>()(rng);
    const double oracle = projection_sdr(s, est, taps);
    for (WienerSolver solver : {WienerSolver::kDirectNormalEquations, WienerSolver::kToeplitzLevinson})
      worst = std::max(worst, std::abs(ci_sdr_metric(s, est, taps, solver) - oracle));
  }
  return {worst < 1e-6, fmt("max |CI-SDR - projection oracle| = %.2e dB over 20 instances, both solvers (limit 1e-6)", worst)};
}

// ---------------------------------------------------------------- 7

Outcome pit_correctness() {
  std::mt19937_64 rng(7);
  std::size_t mismatches = 0, trials = 0;
  for (std::size_t n : {2u, 3u})
    for (int trial = 0; trial < 500; ++trial, ++trials) {
      const auto m = testing::randn(rng, n * n);
      std::vector<std::size_t> p(n), best_p;
      std::iota(p.begin(), p.end(), 0);
      double best = 1e300;
      do {
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) v += m[i * n + p[i]];
        v /= static_cast<double>(n);
        if (v < best) {
          best = v;
          best_p = p;
        }
      } while (std::next_permutation(p.begin(), p.end()));
      Tape t;
      const PitResult a = pit_wrap(n, n, [&](std::size_t i, std::size_t j) { return t.scalar(m[i * n + j]); });
      const PitResult b = pit_search(n, [&](std::span<const std::size_t> q) {
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) v += m[i * n + q[i]];
        return t.scalar(v / static_cast<double>(n));
      });
      const bool ok = std::abs(a.loss.item() - best) < 1e-12 && std::abs(b.loss.item() - best) < 1e-12 &&
                      a.permutation == best_p && b.permutation == best_p;
      mismatches += !ok;
    }
  return {mismatches == 0, fmt("%zu/%zu random loss matrices (I = 2, 3) disagree with exhaustive enumeration", mismatches, trials)};
}

// ---------------------------------------------------------------- 8

Outcome simulator_fidelity() {
  std::mt19937_64 rng(8);
  const DatasetConfig d;
  double worst_t60 = 0.0;
  std::size_t rirs = 0;
  for (double t60 : {0.15, 0.2, 0.3, 0.4, 0.5, 0.6}) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    RoomSpec room;
    for (int a = 0; a < 3; ++a) room.dimensions[a] = d.room_min[a] + u(rng) * (d.room_max[a] - d.room_min[a]);
    room.t60 = t60;
    room.sample_rate = d.sample_rate;
    const Vec3 c{room.dimensions[0] * 0.45, room.dimensions[1] * 0.5, 1.4};
    room.mic_positions = circular_array(c, d.num_mics, d.array_radius);
    room.source_positions = {{c[0] + 1.5, c[1] + 0.3, 1.6}};
    const RIR rir = image_method_rir(room, 0);
    for (const auto& h : rir.taps) {
      worst_t60 = std::max(worst_t60, std::abs(schroeder_t60(h, rir.sample_rate) / t60 - 1.0));
      ++rirs;
    }
  }

  DatasetConfig small = d;
  small.num_examples = 12;
  const auto examples = make_dataset(small, 8);
  double worst_decomp = 0.0, worst_snr = 0.0;
  for (const auto& ex : examples) {
    for (std::size_t m = 0; m < ex.mixture.num_channels(); ++m) {
      double peak = 0.0;
      for (double v : ex.mixture.channels[m].samples) peak = std::max(peak, std::abs(v));
      for (std::size_t n = 0; n < ex.mixture.length(); ++n) {
        double sum = ex.noise.channels[m].samples[n];
        for (std::size_t i = 0; i < ex.num_speakers(); ++i)
          sum += ex.early_images[i].channels[m].samples[n] + ex.late_images[i].channels[m].samples[n];
        worst_decomp = std::max(worst_decomp, std::abs(sum - ex.mixture.channels[m].samples[n]) / peak);
      }
    }
    worst_snr = std::max(worst_snr, std::abs(measured_snr_db(ex) - ex.snr_db));
  }
  return {worst_t60 <= 0.3 && worst_decomp < 1e-12 && worst_snr < 0.01,
          fmt("Schroeder T60 worst relative error %.1f%% over %zu RIRs, requested 0.15-0.6 s (limit 30%%); "
              "decomposition residual %.1e of peak (limit 1e-12); SNR error %.1e dB (limit 0.01) on %zu mixtures",
              100.0 * worst_t60, rirs, worst_decomp, worst_snr, examples.size())};
}

// ---------------------------------------------------------------- 9, 10

TrainConfig desk_config() {
  TrainConfig c = load_train_config(fs::path(BFSEP_SOURCE_DIR) / "configs" / "desk.json");
  c.output_dir = (g_desk_dir / "ci_sdr").string();
  return c;
}

struct DeskData {
  std::vector<SimulatedExample> train, held_out;
};

DeskData desk_data(const TrainConfig& c) {
  DatasetConfig held = c.dataset;
  held.num_examples = c.eval_examples;
  return {make_dataset(c.dataset, c.seed), make_dataset(held, held_out_seed(c.seed))};
}

json run_desk_training() {
  const auto t0 = Clock::now();
  TrainConfig ci = desk_config();
  TrainConfig si = ci;
  si.loss.kind = LossKind::kSiSdr;
  si.output_dir = (g_desk_dir / "si_sdr").string();
  const DeskData data = desk_data(ci);

  json out;
  out["mixture_sdr_db"] = evaluate_mixture(data.held_out).mean_sdr_db;
  for (const TrainConfig* c : {&ci, &si}) {
    const auto r = train(*c, &data.train, &data.held_out);
    const auto report = evaluate_model(load_checkpoint(r.checkpoint), data.held_out, c->eval_rtf);
    out[to_string(c->loss.kind)] = {{"sdr_db", report.mean_sdr_db},
                                    {"si_sdr_db", report.mean_si_sdr_db},
                                    {"checkpoint", r.checkpoint.string()},
                                    {"first10_loss_db", std::accumulate(r.losses.begin(), r.losses.begin() + 10, 0.0) / 10.0},
                                    {"last100_loss_db", std::accumulate(r.losses.end() - 100, r.losses.end(), 0.0) / 100.0}};
  }
  out["seconds"] = seconds_since(t0);
  out["held_out"] = data.held_out.size();
  out["train"] = data.train.size();
  out["steps"] = ci.steps;
  fs::create_directories(g_desk_dir);
  std::ofstream(g_desk_dir / "results.json") << out.dump(2) << '\n';
  return out;
}

Outcome desk_trend() {
  const json r = run_desk_training();
  const double mix = r["mixture_sdr_db"], ci = r["ci_sdr"]["sdr_db"], si = r["si_sdr"]["sdr_db"];
  const double secs = r["seconds"];
  return {ci - mix >= 5.0 && ci >= si,
          fmt("held-out BSS-Eval SDR: mixture %.2f dB, CI-SDR-trained %.2f dB (+%.2f, need +5), SI-SDR-trained %.2f dB "
              "(need CI >= SI); %zu train / %zu held-out mixtures, %zu steps each, %.0f s total",
              mix, ci, ci - mix, si, r["train"].get<std::size_t>(), r["held_out"].get<std::size_t>(),
              r["steps"].get<std::size_t>(), secs)};
}

Outcome oracle_baseline() {
  json r;
  std::ifstream in(g_desk_dir / "results.json");
  if (in)
    r = json::parse(in);
  else
    r = run_desk_training();
  const TrainConfig c = desk_config();
  DatasetConfig held = c.dataset;
  held.num_examples = c.eval_examples;
  const auto examples = make_dataset(held, held_out_seed(c.seed));
  const double oracle = oracle_mask_baseline(examples, c.stft, RtfMode::eigh()).mean_sdr_db;
  const double mix = evaluate_mixture(examples).mean_sdr_db;
  const double best = std::max(r["ci_sdr"]["sdr_db"].get<double>(), r["si_sdr"]["sdr_db"].get<double>());
  return {oracle - mix >= 8.0 && oracle >= best - 3.0,
          fmt("oracle WLM + MVDR(eig) %.2f dB vs mixture %.2f dB (+%.2f, need +8) and best trained %.2f dB "
              "(need oracle >= %.2f) on %zu held-out mixtures",
              oracle, mix, oracle - mix, best, best - 3.0, examples.size())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"STFT round trip", stft_round_trip},
      {"gradient integrity", gradient_integrity},
      {"MVDR distortionless constraint", distortionless},
      {"RTF power iteration vs eigendecomposition", rtf_consistency},
      {"CI-SDR convolutive invariance", ci_sdr_invariance},
      {"CI-SDR projection oracle", ci_sdr_oracle},
      {"PIT vs exhaustive enumeration", pit_correctness},
      {"simulator fidelity", simulator_fidelity},
      {"desk-scale CI-SDR vs SI-SDR training", desk_trend},
      {"oracle-mask baseline", oracle_baseline},
  };

  std::set<std::size_t> selected;
  for (int k = 1; k < argc; ++k) {
    const std::string a = argv[k];
    if (a == "--desk-dir" && k + 1 < argc) {
      g_desk_dir = argv[++k];
      continue;
    }
    const std::size_t n = std::strtoul(a.c_str(), nullptr, 10);
    if (n < 1 || n > criteria.size()) {
      std::fprintf(stderr, "unknown criterion '%s' (expected 1-%zu)\n", a.c_str(), criteria.size());
      return 2;
    }
    selected.insert(n);
  }
  if (selected.empty())
    for (std::size_t n = 1; n <= criteria.size(); ++n) selected.insert(n);

  int failures = 0;
  for (std::size_t n : selected) {
    Outcome o;
    try {
      o = criteria[n - 1].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %zu %s: %s | %s\n", n, o.pass ? "PASS" : "FAIL", criteria[n - 1].first, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
