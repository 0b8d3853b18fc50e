#include "bfsep/beamforming.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <atomic>
#include <cmath>

#include "bfsep/errors.hpp"

namespace bfsep {

using ad::Shape;

namespace {

std::atomic<std::size_t> g_loading_events{0};

constexpr double kMaxCondition = 1e12;
constexpr double kLoadingFactor = 1e-10;

using MatXc = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatXc to_eigen(const CMatrix& m, std::size_t n) {
  MatXc out(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = m[r * n + c];
  return out;
}

MatXc hermitian_part(const MatXc& m) { return 0.5 * (m + m.adjoint()); }

double trace_real(const MatXc& m) { return m.diagonal().real().sum(); }

bool ill_conditioned(const MatXc& m) {
  Eigen::SelfAdjointEigenSolver<MatXc> es(hermitian_part(m), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) return true;
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  return !(lo > 0.0) || hi / lo > kMaxCondition;
}

// Adds kLoadingFactor * trace / M to the diagonal of every flagged matrix.
ad::ComplexTensor load_diagonal(const ad::ComplexTensor& r, const std::vector<CMatrix>& mats,
                                const std::vector<char>& flags) {
  const std::size_t m = r.shape().back();
  std::vector<double> load(r.numel(), 0.0);
  std::size_t count = 0;
  for (std::size_t b = 0; b < flags.size(); ++b) {
    if (!flags[b]) continue;
    ++count;
    double tr = 0.0;
    for (std::size_t k = 0; k < m; ++k) tr += mats[b][k * m + k].real();
    const double amount = kLoadingFactor * std::max(tr, 1e-300) / static_cast<double>(m);
    for (std::size_t k = 0; k < m; ++k) load[b * m * m + k * m + k] = amount;
  }
  if (count == 0) return r;
  g_loading_events += count;
  return {r.re + r.tape().constant(r.shape(), std::move(load)), r.im};
}

void check_square_batch(const char* op, const ad::ComplexTensor& r) {
  const Shape& s = r.shape();
  if (s.size() != 4 || s[2] != s[3])
    throw ShapeError(std::string(op) + ": expected (F, I, M, M) matrices, got " + ad::shape_str(s));
}

}  // namespace

std::size_t loading_events() { return g_loading_events.load(); }
void reset_loading_events() { g_loading_events = 0; }

std::vector<CMatrix> unpack_matrices(const ad::ComplexTensor& batched) {
  const Shape& s = batched.shape();
  if (s.size() < 2) throw ShapeError("unpack_matrices: rank < 2");
  const std::size_t block = s[s.size() - 1] * s[s.size() - 2];
  const auto v = batched.values();
  std::vector<CMatrix> out(v.size() / block);
  for (std::size_t b = 0; b < out.size(); ++b)
    out[b].assign(v.begin() + static_cast<std::ptrdiff_t>(b * block),
                  v.begin() + static_cast<std::ptrdiff_t>((b + 1) * block));
  return out;
}

void MaskSet::validate() const {
  if (!masks.valid() || masks.rank() != 4 || masks.dim(0) != 3)
    throw ShapeError("MaskSet: expected masks of shape (3, T, F, I), got " +
                     (masks.valid() ? ad::shape_str(masks.shape()) : std::string("<none>")));
  for (double v : masks.values())
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("MaskSet: mask value outside [0, 1]");
}

const ad::ComplexTensor& CovarianceSet::get(MaskKind k) const {
  switch (k) {
    case MaskKind::kTarget: return target;
    case MaskKind::kNoise: return noise;
    case MaskKind::kNoiseRtf: return noise_rtf;
  }
  return target;
}

SpecTensor spec_tensor(ad::Tape& tape, const Spectrogram& spec) {
  const std::size_t T = spec.num_frames, F = spec.num_bins, M = spec.num_channels;
  std::vector<double> re(F * T * M), im(F * T * M);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t m = 0; m < M; ++m) {
        const auto v = spec.at(t, f, m);
        re[(f * T + t) * M + m] = v.real();
        im[(f * T + t) * M + m] = v.imag();
      }
  SpecTensor out;
  out.y = {tape.constant({F, T, M}, std::move(re)), tape.constant({F, T, M}, std::move(im))};
  out.frames = T;
  out.bins = F;
  out.channels = M;
  return out;
}

CovarianceSet estimate_covariances(const SpecTensor& spec, const MaskSet& masks, double epsilon, bool tie_noise) {
  if (!(epsilon >= 0.0)) throw ValidationError("estimate_covariances: epsilon must be >= 0");
  if (!masks.masks.valid() || masks.masks.rank() != 4 || masks.masks.dim(0) != 3)
    throw ShapeError("estimate_covariances: masks must be (3, T, F, I)");
  const std::size_t T = spec.frames, F = spec.bins, M = spec.channels, I = masks.num_speakers();
  if (masks.num_frames() != T || masks.num_bins() != F)
    throw ShapeError("estimate_covariances: masks are " + ad::shape_str(masks.masks.shape()) +
                     " but the spectrogram has T = " + std::to_string(T) + ", F = " + std::to_string(F));

  ad::Tape& tape = masks.masks.tape();
  const auto yr = spec.y.re.values();
  const auto yi = spec.y.im.values();
  std::vector<double> pre(F * T * M * M), pim(F * T * M * M);
  for (std::size_t ft = 0; ft < F * T; ++ft)
    for (std::size_t a = 0; a < M; ++a)
      for (std::size_t b = 0; b < M; ++b) {
        // y_a * conj(y_b)
        const double ar = yr[ft * M + a], ai = yi[ft * M + a];
        const double br = yr[ft * M + b], bi = yi[ft * M + b];
        pre[(ft * M + a) * M + b] = ar * br + ai * bi;
        pim[(ft * M + a) * M + b] = ai * br - ar * bi;
      }
  const ad::Tensor outer_re = tape.constant({F, T, M * M}, std::move(pre));
  const ad::Tensor outer_im = tape.constant({F, T, M * M}, std::move(pim));

  const ad::Tensor weights =
      ad::add_scalar(ad::reshape(ad::permute(masks.masks, {2, 0, 3, 1}), {F, 3 * I, T}), epsilon);
  const double inv_t = 1.0 / static_cast<double>(T);
  const ad::Tensor acc_re = ad::reshape(ad::scale(ad::matmul(weights, outer_re), inv_t), {F, 3, I, M, M});
  const ad::Tensor acc_im = ad::reshape(ad::scale(ad::matmul(weights, outer_im), inv_t), {F, 3, I, M, M});

  auto kind = [&](std::size_t k) {
    const ad::Tensor re = ad::reshape(ad::slice(acc_re, 1, k, 1), {F, I, M, M});
    const ad::Tensor im = ad::reshape(ad::slice(acc_im, 1, k, 1), {F, I, M, M});
    return ad::ComplexTensor{ad::scale(re + ad::transpose(re), 0.5), ad::scale(im - ad::transpose(im), 0.5)};
  };
  CovarianceSet out;
  out.epsilon = epsilon;
  out.target = kind(0);
  out.noise = kind(1);
  out.noise_rtf = tie_noise ? out.noise : kind(2);
  return out;
}

RtfVector rtf_power_iteration(const ad::ComplexTensor& r_d, const ad::ComplexTensor& r_nrtf, std::size_t reference,
                              std::size_t eta_max) {
  check_square_batch("rtf_power_iteration", r_d);
  if (r_nrtf.shape() != r_d.shape()) throw ShapeError("rtf_power_iteration: R_d and R_ñ shapes differ");
  if (eta_max < 1) throw ValidationError("rtf_power_iteration: eta_max must be >= 1");
  const Shape& s = r_d.shape();
  const std::size_t F = s[0], I = s[1], M = s[2];
  if (reference >= M) throw ValidationError("rtf_power_iteration: reference channel out of range");

  const auto mats = unpack_matrices(r_nrtf);
  std::vector<char> flags(mats.size());
  const auto nb = static_cast<std::ptrdiff_t>(mats.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < nb; ++b) flags[b] = ill_conditioned(to_eigen(mats[b], M));
  const ad::ComplexTensor rn = load_diagonal(r_nrtf, mats, flags);

  const ad::ComplexTensor phi = ad::csolve(rn, r_d);
  std::vector<double> unit(F * I * M, 0.0);
  for (std::size_t b = 0; b < F * I; ++b) unit[b * M + reference] = 1.0;
  ad::Tape& tape = r_d.tape();
  ad::ComplexTensor v{tape.constant({F, I, M, 1}, std::move(unit)), tape.constant({F, I, M, 1}, 0.0)};
  for (std::size_t it = 0; it < eta_max; ++it) v = ad::cmatmul(phi, v);
  v = ad::cmatmul(rn, v);
  const ad::ComplexTensor vr = ad::cslice(v, 2, reference, 1);
  return {ad::cdiv(v, vr), reference};
}

RtfVector rtf_eigh(const ad::ComplexTensor& r_d, const ad::ComplexTensor& r_nrtf, std::size_t reference) {
  check_square_batch("rtf_eigh", r_d);
  if (r_nrtf.shape() != r_d.shape()) throw ShapeError("rtf_eigh: R_d and R_ñ shapes differ");
  const Shape& s = r_d.shape();
  const std::size_t F = s[0], I = s[1], M = s[2];
  if (reference >= M) throw ValidationError("rtf_eigh: reference channel out of range");

  const auto rd = unpack_matrices(r_d);
  const auto rn = unpack_matrices(r_nrtf);
  std::vector<std::complex<double>> out(F * I * M);
  std::vector<char> failed(rd.size(), 0);
  std::size_t loaded = 0;
  const auto nb = static_cast<std::ptrdiff_t>(rd.size());
#pragma omp parallel for schedule(static) reduction(+ : loaded)
  for (std::ptrdiff_t bb = 0; bb < nb; ++bb) {
    const auto b = static_cast<std::size_t>(bb);
    MatXc n = hermitian_part(to_eigen(rn[b], M));
    if (ill_conditioned(n)) {
      n.diagonal().array() += kLoadingFactor * std::max(trace_real(n), 1e-300) / static_cast<double>(M);
      ++loaded;
    }
    Eigen::LLT<MatXc> llt(n);
    if (llt.info() != Eigen::Success) {
      failed[b] = 1;
      continue;
    }
    const MatXc l = llt.matrixL();
    // C = L^{-1} R_d L^{-H}
    MatXc c = l.triangularView<Eigen::Lower>().solve(hermitian_part(to_eigen(rd[b], M)));
    c = l.triangularView<Eigen::Lower>().solve(c.adjoint().eval()).adjoint().eval();
    Eigen::SelfAdjointEigenSolver<MatXc> es(hermitian_part(c));
    if (es.info() != Eigen::Success) {
      failed[b] = 1;
      continue;
    }
    const Eigen::VectorXcd v = l * es.eigenvectors().col(static_cast<Eigen::Index>(M) - 1);
    const std::complex<double> vr = v(static_cast<Eigen::Index>(reference));
    if (std::abs(vr) == 0.0) {
      failed[b] = 1;
      continue;
    }
    for (std::size_t k = 0; k < M; ++k) out[b * M + k] = k == reference ? 1.0 : v(static_cast<Eigen::Index>(k)) / vr;
  }
  g_loading_events += loaded;
  for (std::size_t b = 0; b < failed.size(); ++b)
    if (failed[b])
      throw NumericalError("rtf_eigh: eigensolver failed for bin " + std::to_string(b / I) + ", speaker " +
                           std::to_string(b % I));
  return {ad::complex_constant(r_d.tape(), {F, I, M, 1}, out), reference};
}

BeamformerWeights mvdr_weights(const ad::ComplexTensor& r_n, const RtfVector& rtf) {
  check_square_batch("mvdr_weights", r_n);
  const Shape& s = r_n.shape();
  const std::size_t M = s[2];
  if (rtf.values.shape() != Shape{s[0], s[1], M, 1})
    throw ShapeError("mvdr_weights: RTF shape " + ad::shape_str(rtf.values.shape()) + " does not match " +
                     ad::shape_str(s));
  ad::ComplexTensor u = ad::csolve(r_n, rtf.values);
  ad::ComplexTensor den = ad::cmatmul(ad::cherm(rtf.values), u);
  const auto dv = den.values();
  std::vector<char> flags(dv.size());
  bool any = false;
  for (std::size_t b = 0; b < dv.size(); ++b) {
    flags[b] = std::abs(dv[b]) < 1e-12;
    any = any || flags[b];
  }
  if (any) {
    const ad::ComplexTensor loaded = load_diagonal(r_n, unpack_matrices(r_n), flags);
    u = ad::csolve(loaded, rtf.values);
    den = ad::cmatmul(ad::cherm(rtf.values), u);
  }
  return {ad::cdiv(u, den), rtf.reference};
}

ad::ComplexTensor apply_beamformer(const BeamformerWeights& weights, const SpecTensor& spec) {
  const Shape& s = weights.values.shape();
  if (s.size() != 4 || s[0] != spec.bins || s[2] != spec.channels || s[3] != 1)
    throw ShapeError("apply_beamformer: weights " + ad::shape_str(s) + " do not match a spectrogram with " +
                     std::to_string(spec.bins) + " bins and " + std::to_string(spec.channels) + " channels");
  const std::size_t F = s[0], I = s[1], M = s[2];
  const ad::ComplexTensor w = ad::cpermute(ad::cconj(ad::creshape(weights.values, {F, I, M})), {0, 2, 1});
  const ad::ComplexTensor out = ad::cmatmul(spec.y, w);  // (F, T, I)
  return ad::cpermute(out, {2, 1, 0});
}

}  // namespace bfsep
