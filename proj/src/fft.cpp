#include "bfsep/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <utility>

#include "bfsep/errors.hpp"

namespace bfsep {

namespace {

struct PlanPair {
  fftw_plan forward;
  fftw_plan inverse;
};

// The FFTW planner is not re-entrant; plan creation is serialised here and
// plans live for the process lifetime.
PlanPair plans_for(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, PlanPair> cache;
  std::lock_guard<std::mutex> lock(mu);
  if (auto it = cache.find(n); it != cache.end()) return it->second;

  const int size = static_cast<int>(n);
  double* real = fftw_alloc_real(n);
  fftw_complex* cplx = fftw_alloc_complex(n / 2 + 1);
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  PlanPair p{fftw_plan_dft_r2c_1d(size, real, cplx, flags),
             fftw_plan_dft_c2r_1d(size, cplx, real, flags | FFTW_DESTROY_INPUT)};
  fftw_free(real);
  fftw_free(cplx);
  if (p.forward == nullptr || p.inverse == nullptr)
    throw NumericalError("FFTW failed to create a plan of size " + std::to_string(n));
  cache.emplace(n, p);
  return p;
}

}  // namespace

RealFft::RealFft(std::size_t size) : size_(size) {
  if (size < 2) throw ValidationError("FFT size must be at least 2");
  const PlanPair p = plans_for(size);
  forward_plan_ = p.forward;
  inverse_plan_ = p.inverse;
}

void RealFft::forward(std::span<const double> in, std::span<std::complex<double>> out) const {
  if (in.size() != size_ || out.size() != num_bins())
    throw ShapeError("RealFft::forward: buffer sizes do not match FFT size");
  // r2c does not modify its input.
  fftw_execute_dft_r2c(static_cast<fftw_plan>(forward_plan_), const_cast<double*>(in.data()),
                       reinterpret_cast<fftw_complex*>(out.data()));
}

void RealFft::inverse(std::span<const std::complex<double>> in, std::span<double> out) const {
  if (in.size() != num_bins() || out.size() != size_)
    throw ShapeError("RealFft::inverse: buffer sizes do not match FFT size");
  std::vector<std::complex<double>> work(in.begin(), in.end());
  work.front().imag(0.0);
  work.back().imag(0.0);
  fftw_execute_dft_c2r(static_cast<fftw_plan>(inverse_plan_),
                       reinterpret_cast<fftw_complex*>(work.data()), out.data());
  const double scale = 1.0 / static_cast<double>(size_);
  for (double& v : out) v *= scale;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

std::vector<double> fft_convolve(std::span<const double> x, std::span<const double> h) {
  if (x.empty() || h.empty()) return {};
  const std::size_t out_len = x.size() + h.size() - 1;
  const std::size_t n = next_pow2(std::max<std::size_t>(out_len, 2));
  RealFft fft(n);
  std::vector<double> xp(n, 0.0), hp(n, 0.0);
  std::copy(x.begin(), x.end(), xp.begin());
  std::copy(h.begin(), h.end(), hp.begin());
  std::vector<std::complex<double>> xs(fft.num_bins()), hs(fft.num_bins());
  fft.forward(xp, xs);
  fft.forward(hp, hs);
  for (std::size_t k = 0; k < xs.size(); ++k) xs[k] *= hs[k];
  fft.inverse(xs, xp);
  xp.resize(out_len);
  return xp;
}

}  // namespace bfsep
