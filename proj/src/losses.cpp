#include "bfsep/losses.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bfsep/errors.hpp"
#include "bfsep/kernels.hpp"

namespace bfsep {

using ad::Shape;

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kFSdr: return "f_sdr";
    case LossKind::kSdr: return "sdr";
    case LossKind::kSiSdr: return "si_sdr";
    case LossKind::kCiSdr: return "ci_sdr";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "f_sdr") return LossKind::kFSdr;
  if (s == "sdr") return LossKind::kSdr;
  if (s == "si_sdr") return LossKind::kSiSdr;
  if (s == "ci_sdr") return LossKind::kCiSdr;
  throw ValidationError("unknown loss '" + s + "' (expected f_sdr, sdr, si_sdr or ci_sdr)");
}

std::string to_string(WienerSolver s) {
  return s == WienerSolver::kToeplitzLevinson ? "toeplitz_levinson" : "direct_normal_equations";
}

WienerSolver wiener_solver_from_string(const std::string& s) {
  if (s == "toeplitz_levinson") return WienerSolver::kToeplitzLevinson;
  if (s == "direct_normal_equations") return WienerSolver::kDirectNormalEquations;
  throw ValidationError("unknown Wiener-Hopf solver '" + s + "'");
}

std::size_t LossConfig::taps_at(int sample_rate) const {
  const double scaled = static_cast<double>(ci_filter_taps) * sample_rate / 16000.0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scaled)));
}

void LossConfig::validate() const {
  if (ci_filter_taps < 1) throw ValidationError("ci_filter_taps must be >= 1");
  if (!(log_floor > 0.0)) throw ValidationError("log_floor must be > 0");
}

// ---------------------------------------------------------------- Wiener-Hopf

namespace {

constexpr double kTikhonov = 1e-8;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

WienerHopf::WienerHopf(std::span<const double> source, std::size_t taps, WienerSolver solver)
    : taps_(taps), solver_(solver), source_(source.begin(), source.end()) {
  if (taps == 0) throw ValidationError("Wiener-Hopf filter needs at least one tap");
  if (source.size() <= taps)
    throw ValidationError("Wiener-Hopf filter: signal length " + std::to_string(source.size()) +
                          " must exceed the tap count " + std::to_string(taps));
  autocorr_.resize(taps);
  kernels::xcorr(source_, source_, autocorr_);
  if (!(autocorr_[0] > 0.0)) throw ValidationError("Wiener-Hopf filter: reference signal has zero energy");
  autocorr_[0] *= 1.0 + kTikhonov;

  if (solver_ == WienerSolver::kDirectNormalEquations) {
    RowMat r(taps, taps);
    for (std::size_t i = 0; i < taps; ++i)
      for (std::size_t j = 0; j < taps; ++j) r(i, j) = autocorr_[i > j ? i - j : j - i];
    Eigen::LLT<RowMat> llt(r);
    if (llt.info() != Eigen::Success)
      throw NumericalError("Wiener-Hopf filter: autocorrelation matrix is not positive definite");
    RowMat l = llt.matrixL();
    cholesky_.assign(l.data(), l.data() + taps * taps);
  }
}

std::vector<double> WienerHopf::solve(std::span<const double> b) const {
  const std::size_t k = taps_;
  if (b.size() != k) throw ShapeError("WienerHopf::solve: right-hand side has wrong length");
  if (solver_ == WienerSolver::kDirectNormalEquations) {
    Eigen::Map<const RowMat> l(cholesky_.data(), k, k);
    Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(b.data(), k);
    l.triangularView<Eigen::Lower>().solveInPlace(x);
    l.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return {x.data(), x.data() + k};
  }

  // Levinson recursion for the symmetric Toeplitz system. f solves
  // R_n f = e_1; its reversal solves R_n g = e_n.
  const std::vector<double>& r = autocorr_;
  std::vector<double> f{1.0 / r[0]}, next;
  std::vector<double> x{b[0] / r[0]};
  f.reserve(k);
  x.reserve(k);
  for (std::size_t n = 1; n < k; ++n) {
    double ef = 0.0;
    for (std::size_t i = 0; i < n; ++i) ef += r[n - i] * f[i];
    const double denom = 1.0 - ef * ef;
    if (!(denom > 0.0)) throw NumericalError("Levinson recursion broke down at order " + std::to_string(n));
    next.assign(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) next[i] += f[i];
    for (std::size_t i = 0; i < n; ++i) next[i + 1] -= ef * f[n - 1 - i];
    for (double& v : next) v /= denom;
    f.swap(next);

    double ex = 0.0;
    for (std::size_t i = 0; i < n; ++i) ex += r[n - i] * x[i];
    const double c = b[n] - ex;
    x.push_back(0.0);
    for (std::size_t i = 0; i <= n; ++i) x[i] += c * f[n - i];
  }
  return x;
}

std::vector<double> wiener_hopf_filter(std::span<const double> source, std::span<const double> estimate,
                                       std::size_t taps, WienerSolver solver) {
  if (estimate.size() <= taps)
    throw ValidationError("Wiener-Hopf filter: estimate length " + std::to_string(estimate.size()) +
                          " must exceed the tap count " + std::to_string(taps));
  const WienerHopf wh(source, taps, solver);
  std::vector<double> b(taps);
  kernels::xcorr(source, estimate, b);
  return wh.solve(b);
}

// ---------------------------------------------------------------- terms

namespace {

ad::Tensor to_db(const ad::Tensor& ratio, double log_floor) {
  return ad::scale(ad::log10(ad::clamp_min(ratio, log_floor)), 10.0);
}

bool all_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

void same_length(const char* op, const ad::Tensor& a, const ad::Tensor& b) {
  if (a.rank() != 1 || a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": target " + ad::shape_str(a.shape()) + " and estimate " +
                     ad::shape_str(b.shape()) + " must be equal-length vectors");
}

// Tape node for a = R^{-1} b with a fixed factorisation; R is symmetric, so
// the adjoint is another solve.
ad::Tensor wiener_solve(const WienerHopf& wh, const ad::Tensor& b) {
  std::vector<double> a = wh.solve(b.values());
  const std::uint32_t ib = b.id();
  // The factorisation must outlive the tape node.
  auto keep = std::make_shared<WienerHopf>(wh);
  return b.tape().record("wiener_solve", b.shape(), std::move(a), {b}, [keep, ib](ad::Tape& t, std::uint32_t self) {
    const std::vector<double> gb = keep->solve(t.grad(self));
    auto dst = t.grad_buffer(ib);
    for (std::size_t i = 0; i < gb.size(); ++i) dst[i] += gb[i];
  });
}

ad::Tensor mean_of(const std::vector<ad::Tensor>& terms) {
  ad::Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  return ad::scale(total, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace

ad::Tensor f_sdr_term(const ad::ComplexTensor& target, const ad::ComplexTensor& estimate, double log_floor) {
  if (target.shape() != estimate.shape())
    throw ShapeError("f_sdr: target " + ad::shape_str(target.shape()) + " and estimate " +
                     ad::shape_str(estimate.shape()) + " differ");
  if (all_zero(target.re.values()) && all_zero(target.im.values()))
    throw ValidationError("f_sdr: target spectrogram is identically zero");
  const ad::Tensor err = ad::cabs2(ad::csub(target, estimate));
  const ad::Tensor ref = ad::clamp_min(ad::cabs2(target), log_floor);
  return to_db(ad::mean(err / ref), log_floor);
}

ad::Tensor sdr_term(const ad::Tensor& target, const ad::Tensor& estimate, double log_floor) {
  same_length("sdr", target, estimate);
  if (all_zero(target.values())) throw ValidationError("sdr: target signal is identically zero");
  const ad::Tensor ratio = ad::sum(ad::square(target - estimate)) / ad::sum(ad::square(target));
  return to_db(ratio, log_floor);
}

ad::Tensor si_sdr_term(const ad::Tensor& target, const ad::Tensor& estimate, double log_floor) {
  same_length("si_sdr", target, estimate);
  if (all_zero(target.values())) throw ValidationError("si_sdr: target signal is identically zero");
  const ad::Tensor a = ad::sum(target * estimate) / ad::sum(ad::square(target));
  const ad::Tensor scaled = target * a;
  const ad::Tensor num = ad::sum(ad::square(scaled - estimate));
  const ad::Tensor den = ad::clamp_min(ad::sum(ad::square(scaled)), std::numeric_limits<double>::min());
  return to_db(num / den, log_floor);
}

ad::Tensor ci_sdr_term(const WienerHopf& source, const ad::Tensor& estimate, double log_floor, std::size_t speaker) {
  if (estimate.rank() != 1) throw ShapeError("ci_sdr: estimate must be a vector, got " + ad::shape_str(estimate.shape()));
  const std::size_t k = source.taps();
  const std::size_t ls = source.source().size(), le = estimate.numel();
  if (le <= k)
    throw ValidationError("ci_sdr: estimate length " + std::to_string(le) + " must exceed the tap count " +
                          std::to_string(k));
  ad::Tape& tape = estimate.tape();
  const ad::Tensor s = tape.constant({ls}, std::vector<double>(source.source().begin(), source.source().end()));

  const ad::Tensor b = ad::xcorr(s, estimate, k);
  const ad::Tensor a = wiener_solve(source, b);
  ad::Tensor fitted = ad::conv_full(s, a);
  const std::size_t n = std::max(le, fitted.numel());
  if (fitted.numel() < n) fitted = ad::pad(fitted, 0, 0, n - fitted.numel());
  const ad::Tensor est = le < n ? ad::pad(estimate, 0, 0, n - le) : estimate;

  const ad::Tensor energy = ad::sum(ad::square(fitted));
  if (energy.item() < 1e-12)
    throw NumericalError("ci_sdr: filtered source of speaker " + std::to_string(speaker) +
                         " has near-zero energy (degenerate filter)");
  const ad::Tensor ratio = ad::sum(ad::square(fitted - est)) / energy;
  return to_db(ratio, log_floor);
}

// ---------------------------------------------------------------- full losses

namespace {

ad::Tensor row(const ad::Tensor& stacked, std::size_t i) {
  Shape s(stacked.shape().begin() + 1, stacked.shape().end());
  return ad::reshape(ad::slice(stacked, 0, i, 1), s);
}

ad::ComplexTensor row(const ad::ComplexTensor& stacked, std::size_t i) { return {row(stacked.re, i), row(stacked.im, i)}; }

void check_stacked(const char* op, const Shape& a, const Shape& b, std::size_t rank) {
  if (a.size() != rank || a != b || a[0] == 0)
    throw ShapeError(std::string(op) + ": targets " + ad::shape_str(a) + " and estimates " + ad::shape_str(b) +
                     " must match with rank " + std::to_string(rank));
}

}  // namespace

ad::Tensor f_sdr_loss(const ad::ComplexTensor& targets, const ad::ComplexTensor& estimates, double log_floor) {
  check_stacked("f_sdr_loss", targets.shape(), estimates.shape(), 3);
  std::vector<ad::Tensor> terms;
  for (std::size_t i = 0; i < targets.shape()[0]; ++i) terms.push_back(f_sdr_term(row(targets, i), row(estimates, i), log_floor));
  return mean_of(terms);
}

ad::Tensor sdr_loss(const ad::Tensor& targets, const ad::Tensor& estimates, double log_floor) {
  check_stacked("sdr_loss", targets.shape(), estimates.shape(), 2);
  std::vector<ad::Tensor> terms;
  for (std::size_t i = 0; i < targets.dim(0); ++i) terms.push_back(sdr_term(row(targets, i), row(estimates, i), log_floor));
  return mean_of(terms);
}

ad::Tensor si_sdr_loss(const ad::Tensor& targets, const ad::Tensor& estimates, double log_floor) {
  check_stacked("si_sdr_loss", targets.shape(), estimates.shape(), 2);
  std::vector<ad::Tensor> terms;
  for (std::size_t i = 0; i < targets.dim(0); ++i)
    terms.push_back(si_sdr_term(row(targets, i), row(estimates, i), log_floor));
  return mean_of(terms);
}

ad::Tensor ci_sdr_loss(const ad::Tensor& sources, const ad::Tensor& estimates, const LossConfig& config,
                       int sample_rate) {
  config.validate();
  if (sources.rank() != 2 || estimates.rank() != 2 || sources.dim(0) != estimates.dim(0) || sources.dim(0) == 0)
    throw ShapeError("ci_sdr_loss: sources " + ad::shape_str(sources.shape()) + " and estimates " +
                     ad::shape_str(estimates.shape()) + " must be (I, L) with equal I");
  const std::size_t taps = config.taps_at(sample_rate);
  const std::size_t len = sources.dim(1);
  const auto sv = sources.values();
  std::vector<ad::Tensor> terms;
  for (std::size_t i = 0; i < sources.dim(0); ++i) {
    const WienerHopf wh(sv.subspan(i * len, len), taps, config.ci_solver);
    terms.push_back(ci_sdr_term(wh, row(estimates, i), config.log_floor, i));
  }
  return mean_of(terms);
}

double ci_sdr_metric(std::span<const double> source, std::span<const double> estimate, std::size_t taps,
                     WienerSolver solver, double log_floor) {
  ad::Tape tape;
  ad::NoGradGuard guard(tape);
  const WienerHopf wh(source, taps, solver);
  const ad::Tensor est = tape.constant({estimate.size()}, std::vector<double>(estimate.begin(), estimate.end()));
  return -ci_sdr_term(wh, est, log_floor).item();
}

double si_sdr_metric(std::span<const double> target, std::span<const double> estimate, double log_floor) {
  ad::Tape tape;
  ad::NoGradGuard guard(tape);
  const ad::Tensor t = tape.constant({target.size()}, std::vector<double>(target.begin(), target.end()));
  const ad::Tensor e = tape.constant({estimate.size()}, std::vector<double>(estimate.begin(), estimate.end()));
  return -si_sdr_term(t, e, log_floor).item();
}

// ---------------------------------------------------------------- PIT

namespace {

constexpr std::size_t kMaxPitSpeakers = 6;

void check_pit_size(std::size_t n) {
  if (n == 0 || n > kMaxPitSpeakers)
    throw ValidationError("PIT supports 1 to " + std::to_string(kMaxPitSpeakers) + " speakers, got " +
                          std::to_string(n));
}

}  // namespace

PitResult pit_search(std::size_t num_speakers, const AssignmentLoss& loss_fn) {
  check_pit_size(num_speakers);
  std::vector<std::size_t> perm(num_speakers);
  std::iota(perm.begin(), perm.end(), 0);
  PitResult best;
  double best_value = std::numeric_limits<double>::infinity();
  do {
    ad::Tensor loss = loss_fn(perm);
    const double v = loss.item();
    if (!best.loss.valid() || v < best_value) {
      best_value = v;
      best.loss = loss;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

PitResult pit_wrap(std::size_t num_targets, std::size_t num_estimates, const PairTerm& term) {
  if (num_targets != num_estimates)
    throw ValidationError("PIT: " + std::to_string(num_targets) + " targets but " + std::to_string(num_estimates) +
                          " estimates");
  const std::size_t n = num_targets;
  check_pit_size(n);
  std::vector<ad::Tensor> terms(n * n);
  std::vector<double> values(n * n);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t e = 0; e < n; ++e) {
      terms[t * n + e] = term(t, e);
      values[t * n + e] = terms[t * n + e].item();
    }
  std::vector<std::size_t> perm(n), best_perm;
  std::iota(perm.begin(), perm.end(), 0);
  double best_value = std::numeric_limits<double>::infinity();
  do {
    double v = 0.0;
    for (std::size_t t = 0; t < n; ++t) v += values[t * n + perm[t]];
    if (best_perm.empty() || v < best_value) {
      best_value = v;
      best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  std::vector<ad::Tensor> chosen;
  for (std::size_t t = 0; t < n; ++t) chosen.push_back(terms[t * n + best_perm[t]]);
  return {mean_of(chosen), best_perm};
}

}  // namespace bfsep
