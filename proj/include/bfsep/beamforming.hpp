#pragma once

// Mask-driven spatial covariance estimation, RTF estimation, and MVDR
// beamforming. Everything except rtf_eigh is built from tape operations and
// can be differentiated.
//
// Batch layout: per-speaker quantities carry leading (F, I) dimensions, so a
// covariance is (F, I, M, M) and an RTF or weight vector is (F, I, M, 1).

#include <complex>
#include <cstddef>
#include <vector>

#include "bfsep/complex.hpp"
#include "bfsep/stft.hpp"

namespace bfsep {

enum class MaskKind : std::size_t { kTarget = 0, kNoise = 1, kNoiseRtf = 2 };

// Masks (3, T, F, I): kind x frame x bin x speaker, values in [0, 1].
struct MaskSet {
  ad::Tensor masks;

  std::size_t num_frames() const { return masks.dim(1); }
  std::size_t num_bins() const { return masks.dim(2); }
  std::size_t num_speakers() const { return masks.dim(3); }
  void validate() const;  // shape rank and value range
};

// Observation y as constant tape tensors, (F, T, M).
struct SpecTensor {
  ad::ComplexTensor y;
  std::size_t frames = 0, bins = 0, channels = 0;
};
SpecTensor spec_tensor(ad::Tape& tape, const Spectrogram& spec);

struct CovarianceSet {
  ad::ComplexTensor target;     // R_d
  ad::ComplexTensor noise;      // R_n, used by MVDR
  ad::ComplexTensor noise_rtf;  // R_ñ, used for RTF estimation
  double epsilon = 0.01;

  const ad::ComplexTensor& get(MaskKind k) const;
};

struct RtfVector {
  ad::ComplexTensor values;  // (F, I, M, 1)
  std::size_t reference = 0;
};

struct BeamformerWeights {
  ad::ComplexTensor values;  // (F, I, M, 1)
  std::size_t reference = 0;
};

// R = (1/T) sum_t (epsilon + m) y y^H for each kind, bin and speaker, then
// symmetrised as (R + R^H) / 2. With tie_noise, R_ñ reuses the R_n estimate.
CovarianceSet estimate_covariances(const SpecTensor& spec, const MaskSet& masks, double epsilon = 0.01,
                                   bool tie_noise = false);

// Differentiable RTF estimate: v <- Phi^eta u_r with Phi = R_ñ^{-1} R_d,
// then v <- R_ñ v, normalised so that v_r = 1.
RtfVector rtf_power_iteration(const ad::ComplexTensor& r_d, const ad::ComplexTensor& r_nrtf, std::size_t reference,
                              std::size_t eta_max);

// RTF from the principal generalised eigenvector of (R_d, R_ñ), computed with
// a whitened Hermitian eigensolver. The result is a constant on the tape.
RtfVector rtf_eigh(const ad::ComplexTensor& r_d, const ad::ComplexTensor& r_nrtf, std::size_t reference);

// w = R_n^{-1} v / (v^H R_n^{-1} v).
BeamformerWeights mvdr_weights(const ad::ComplexTensor& r_n, const RtfVector& rtf);

// d_hat(t, f, i) = w_{f,i}^H y_{t,f}; returned laid out (I, T, F) for istft_op.
ad::ComplexTensor apply_beamformer(const BeamformerWeights& weights, const SpecTensor& spec);

// Number of times any routine in this module had to diagonally load a
// near-singular matrix since process start (or the last reset).
std::size_t loading_events();
void reset_loading_events();

// Dense helpers for tests and evaluation code: per-(f, i) complex matrices
// in row-major order.
using CMatrix = std::vector<std::complex<double>>;
std::vector<CMatrix> unpack_matrices(const ad::ComplexTensor& batched);

}  // namespace bfsep
