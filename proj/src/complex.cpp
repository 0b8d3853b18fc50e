#include "bfsep/complex.hpp"

#include <memory>

#include "bfsep/errors.hpp"

namespace bfsep::ad {

std::vector<std::complex<double>> ComplexTensor::values() const {
  const auto r = re.values();
  const auto i = im.values();
  std::vector<std::complex<double>> out(r.size());
  for (std::size_t k = 0; k < r.size(); ++k) out[k] = {r[k], i[k]};
  return out;
}

namespace {

void split(std::span<const std::complex<double>> values, std::vector<double>& re, std::vector<double>& im) {
  re.resize(values.size());
  im.resize(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) {
    re[k] = values[k].real();
    im[k] = values[k].imag();
  }
}

}  // namespace

ComplexTensor complex_constant(Tape& tape, Shape shape, std::span<const std::complex<double>> values) {
  std::vector<double> re, im;
  split(values, re, im);
  return {tape.constant(shape, std::move(re)), tape.constant(shape, std::move(im))};
}

ComplexTensor complex_leaf(Tape& tape, Shape shape, std::span<const std::complex<double>> values) {
  std::vector<double> re, im;
  split(values, re, im);
  return {tape.leaf(shape, std::move(re)), tape.leaf(shape, std::move(im))};
}

ComplexTensor as_complex(const Tensor& re) { return {re, re.tape().constant(re.shape(), 0.0)}; }

ComplexTensor cadd(const ComplexTensor& a, const ComplexTensor& b) { return {a.re + b.re, a.im + b.im}; }
ComplexTensor csub(const ComplexTensor& a, const ComplexTensor& b) { return {a.re - b.re, a.im - b.im}; }

ComplexTensor cmul(const ComplexTensor& a, const ComplexTensor& b) {
  return {a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re};
}

ComplexTensor cdiv(const ComplexTensor& a, const ComplexTensor& b) {
  const Tensor den = square(b.re) + square(b.im);
  return {(a.re * b.re + a.im * b.im) / den, (a.im * b.re - a.re * b.im) / den};
}

ComplexTensor cmul_real(const ComplexTensor& a, const Tensor& r) { return {a.re * r, a.im * r}; }
ComplexTensor cscale(const ComplexTensor& a, double c) { return {scale(a.re, c), scale(a.im, c)}; }
ComplexTensor cconj(const ComplexTensor& a) { return {a.re, neg(a.im)}; }
Tensor cabs2(const ComplexTensor& a) { return square(a.re) + square(a.im); }

ComplexTensor cmatmul(const ComplexTensor& a, const ComplexTensor& b) {
  return {matmul(a.re, b.re) - matmul(a.im, b.im), matmul(a.re, b.im) + matmul(a.im, b.re)};
}

ComplexTensor cherm(const ComplexTensor& a) { return {transpose(a.re), neg(transpose(a.im))}; }

ComplexTensor csolve(const ComplexTensor& a, const ComplexTensor& b) {
  if (a.rank() < 2 || b.rank() != a.rank())
    throw ShapeError("csolve: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t last = a.rank() - 1;
  const std::size_t n = a.shape()[last];
  const Tensor top = concat({a.re, neg(a.im)}, last);
  const Tensor bottom = concat({a.im, a.re}, last);
  const Tensor big = concat({top, bottom}, last - 1);
  const Tensor rhs = concat({b.re, b.im}, last - 1);
  const Tensor x = solve(big, rhs);
  return {slice(x, last - 1, 0, n), slice(x, last - 1, n, n)};
}

ComplexTensor creshape(const ComplexTensor& a, Shape shape) { return {reshape(a.re, shape), reshape(a.im, shape)}; }

ComplexTensor cpermute(const ComplexTensor& a, const std::vector<std::size_t>& perm) {
  return {permute(a.re, perm), permute(a.im, perm)};
}

ComplexTensor cslice(const ComplexTensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  return {slice(a.re, axis, start, length), slice(a.im, axis, start, length)};
}

Tensor istft_op(const ComplexTensor& spec, const StftConfig& config, std::size_t length) {
  config.validate();
  const Shape& s = spec.shape();
  if (s.size() != 3 || s[2] != config.num_bins())
    throw ShapeError("istft_op: expected (B, T, " + std::to_string(config.num_bins()) + "), got " + shape_str(s));
  if (spec.im.shape() != s) throw ShapeError("istft_op: real and imaginary shapes differ");
  const std::size_t batch = s[0], frames = s[1], bins = s[2];
  const std::size_t block = frames * bins;

  const auto re = spec.re.values();
  const auto im = spec.im.values();
  std::vector<double> out(batch * length);
  std::vector<std::complex<double>> tf(block);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < block; ++k) tf[k] = {re[b * block + k], im[b * block + k]};
    istft_channel(config, tf, frames, std::span<double>(out).subspan(b * length, length));
  }

  const std::uint32_t ire = spec.re.id(), iim = spec.im.id();
  const Tensor parents[] = {spec.re, spec.im};
  return spec.tape().record("istft", {batch, length}, std::move(out), parents, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    std::vector<double> gre(block), gim(block);
    const bool want_re = t.requires_grad(ire), want_im = t.requires_grad(iim);
    for (std::size_t b = 0; b < batch; ++b) {
      istft_channel_adjoint(config, g.subspan(b * length, length), frames, gre, gim);
      if (want_re) {
        auto dst = t.grad_buffer(ire);
        for (std::size_t k = 0; k < block; ++k) dst[b * block + k] += gre[k];
      }
      if (want_im) {
        auto dst = t.grad_buffer(iim);
        for (std::size_t k = 0; k < block; ++k) dst[b * block + k] += gim[k];
      }
    }
  });
}

}  // namespace bfsep::ad
