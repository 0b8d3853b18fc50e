#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace bfsep {

// Real-input FFT of a fixed size backed by FFTW. Plans are shared between
// instances of the same size; execute() is safe to call concurrently.
class RealFft {
 public:
  explicit RealFft(std::size_t size);

  std::size_t size() const { return size_; }
  std::size_t num_bins() const { return size_ / 2 + 1; }

  // in: size() samples, out: num_bins() coefficients. Unnormalised.
  void forward(std::span<const double> in, std::span<std::complex<double>> out) const;
  // in: num_bins() coefficients (imaginary parts of DC and Nyquist are
  // ignored), out: size() samples. Scaled by 1/size(), so inverse(forward(x)) = x.
  void inverse(std::span<const std::complex<double>> in, std::span<double> out) const;

 private:
  std::size_t size_;
  void* forward_plan_;
  void* inverse_plan_;
};

// Full linear convolution (length x.size() + h.size() - 1) via zero-padded FFT.
std::vector<double> fft_convolve(std::span<const double> x, std::span<const double> h);

std::size_t next_pow2(std::size_t n);

}  // namespace bfsep
