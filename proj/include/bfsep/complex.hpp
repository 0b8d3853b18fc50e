#pragma once

// Complex tensors as (re, im) pairs of real tape tensors. Every operation
// below is composed from real autodiff ops, so the tape never holds a complex
// node.

#include <complex>
#include <vector>

#include "bfsep/autodiff.hpp"
#include "bfsep/stft.hpp"

namespace bfsep::ad {

struct ComplexTensor {
  Tensor re, im;

  const Shape& shape() const { return re.shape(); }
  std::size_t numel() const { return re.numel(); }
  std::size_t rank() const { return re.rank(); }
  Tape& tape() const { return re.tape(); }
  std::vector<std::complex<double>> values() const;
};

ComplexTensor complex_constant(Tape& tape, Shape shape, std::span<const std::complex<double>> values);
ComplexTensor complex_leaf(Tape& tape, Shape shape, std::span<const std::complex<double>> values);
// Real tensor lifted to a complex one with zero imaginary part.
ComplexTensor as_complex(const Tensor& re);

ComplexTensor cadd(const ComplexTensor& a, const ComplexTensor& b);
ComplexTensor csub(const ComplexTensor& a, const ComplexTensor& b);
ComplexTensor cmul(const ComplexTensor& a, const ComplexTensor& b);  // elementwise
// a / b elementwise, computed as a * conj(b) / |b|^2.
ComplexTensor cdiv(const ComplexTensor& a, const ComplexTensor& b);
ComplexTensor cmul_real(const ComplexTensor& a, const Tensor& r);
ComplexTensor cscale(const ComplexTensor& a, double c);
ComplexTensor cconj(const ComplexTensor& a);
Tensor cabs2(const ComplexTensor& a);  // |a|^2

ComplexTensor cmatmul(const ComplexTensor& a, const ComplexTensor& b);
ComplexTensor cherm(const ComplexTensor& a);  // conjugate transpose of the last two axes
// Solves A X = B through the real embedding [[Ar, -Ai], [Ai, Ar]].
ComplexTensor csolve(const ComplexTensor& a, const ComplexTensor& b);

ComplexTensor creshape(const ComplexTensor& a, Shape shape);
ComplexTensor cpermute(const ComplexTensor& a, const std::vector<std::size_t>& perm);
ComplexTensor cslice(const ComplexTensor& a, std::size_t axis, std::size_t start, std::size_t length);

// Differentiable inverse STFT. spec holds B single-channel spectrograms laid
// out (B, T, F); the result is (B, length).
Tensor istft_op(const ComplexTensor& spec, const StftConfig& config, std::size_t length);

}  // namespace bfsep::ad
