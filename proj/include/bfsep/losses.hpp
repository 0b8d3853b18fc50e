#pragma once

// Training objectives in dB with the "loss = negative SDR" sign convention,
// plus permutation-invariant search. Every loss has the form
//   (10 / I) sum_i log10(max(ratio_i, log_floor)),
// so a loss is the mean of per-speaker terms and PIT can score target /
// estimate pairs independently.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bfsep/complex.hpp"

namespace bfsep {

enum class LossKind { kFSdr, kSdr, kSiSdr, kCiSdr };
enum class WienerSolver { kToeplitzLevinson, kDirectNormalEquations };

std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);
std::string to_string(WienerSolver s);
WienerSolver wiener_solver_from_string(const std::string& s);

struct LossConfig {
  LossKind kind = LossKind::kCiSdr;
  // Filter length at 16 kHz (32 ms); other rates scale it, see taps_at().
  std::size_t ci_filter_taps = 512;
  double log_floor = 1e-10;
  WienerSolver ci_solver = WienerSolver::kDirectNormalEquations;

  std::size_t taps_at(int sample_rate) const;
  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

// Factorisation of the (Tikhonov-regularised) Toeplitz autocorrelation
// matrix of one reference signal, reusable across estimates.
class WienerHopf {
 public:
  WienerHopf(std::span<const double> source, std::size_t taps, WienerSolver solver);

  std::size_t taps() const { return taps_; }
  std::span<const double> source() const { return source_; }
  // Solves R a = b for the configured backend.
  std::vector<double> solve(std::span<const double> b) const;

 private:
  std::size_t taps_;
  WienerSolver solver_;
  std::vector<double> source_;
  std::vector<double> autocorr_;  // regularised first column of R
  std::vector<double> cholesky_;  // lower factor, row-major taps x taps
};

// Least-squares FIR a (length taps) minimising || s * a - estimate ||^2 with
// the full convolution s * a. Rejects length <= taps.
std::vector<double> wiener_hopf_filter(std::span<const double> source, std::span<const double> estimate,
                                       std::size_t taps, WienerSolver solver = WienerSolver::kDirectNormalEquations);

// ---- per-speaker terms: 10 log10(max(ratio, floor)) as scalar tensors ----

// targets / estimates laid out (T, F).
ad::Tensor f_sdr_term(const ad::ComplexTensor& target, const ad::ComplexTensor& estimate, double log_floor);
ad::Tensor sdr_term(const ad::Tensor& target, const ad::Tensor& estimate, double log_floor);
ad::Tensor si_sdr_term(const ad::Tensor& target, const ad::Tensor& estimate, double log_floor);
// source: constant dry signal; the filter is fitted on the tape through the
// estimate. speaker only labels error messages.
ad::Tensor ci_sdr_term(const WienerHopf& source, const ad::Tensor& estimate, double log_floor,
                       std::size_t speaker = 0);

// ---- full losses, identity assignment, inputs stacked over speakers ----

// (I, T, F) complex spectrograms.
ad::Tensor f_sdr_loss(const ad::ComplexTensor& targets, const ad::ComplexTensor& estimates,
                      double log_floor = 1e-10);
// (I, L) waveforms; targets are early images at the reference channel.
ad::Tensor sdr_loss(const ad::Tensor& targets, const ad::Tensor& estimates, double log_floor = 1e-10);
ad::Tensor si_sdr_loss(const ad::Tensor& targets, const ad::Tensor& estimates, double log_floor = 1e-10);
// sources are the dry signals.
ad::Tensor ci_sdr_loss(const ad::Tensor& sources, const ad::Tensor& estimates, const LossConfig& config = {},
                       int sample_rate = 16000);

// BSS-Eval style SDR in dB (= minus the CI-SDR term) computed without a tape.
double ci_sdr_metric(std::span<const double> source, std::span<const double> estimate, std::size_t taps,
                     WienerSolver solver = WienerSolver::kDirectNormalEquations, double log_floor = 1e-10);
double si_sdr_metric(std::span<const double> target, std::span<const double> estimate, double log_floor = 1e-10);

// ---- permutation invariant training ----

struct PitResult {
  ad::Tensor loss;
  // permutation[i] = estimate assigned to target i.
  std::vector<std::size_t> permutation;
};

// Exhaustive search over all I! assignments with a loss function of the
// whole assignment. The returned tensor is the one built for the minimiser,
// so gradients flow only through that assignment.
using AssignmentLoss = std::function<ad::Tensor(std::span<const std::size_t> permutation)>;
PitResult pit_search(std::size_t num_speakers, const AssignmentLoss& loss_fn);

// Pairwise form for losses that are a mean of per-speaker terms: each
// (target, estimate) term is built once, then the I! sums are compared.
using PairTerm = std::function<ad::Tensor(std::size_t target, std::size_t estimate)>;
PitResult pit_wrap(std::size_t num_targets, std::size_t num_estimates, const PairTerm& term);

}  // namespace bfsep
