#include "bfsep/kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bfsep::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = std::size_t{1} << 16;

inline double at_a(const GemmShape& s, const double* a, std::size_t i,
                   std::size_t p) {
  return s.trans_a == Trans::kNo ? a[i * s.k + p] : a[p * s.m + i];
}

inline double at_b(const GemmShape& s, const double* b, std::size_t p,
                   std::size_t j) {
  return s.trans_b == Trans::kNo ? b[p * s.n + j] : b[j * s.k + p];
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace reference {

void gemm(const GemmShape& s, const double* a, const double* b, double* c,
          bool accumulate) {
  for (std::size_t i = 0; i < s.m; ++i) {
    for (std::size_t j = 0; j < s.n; ++j) {
      double sum = accumulate ? c[i * s.n + j] : 0.0;
      for (std::size_t p = 0; p < s.k; ++p) sum += at_a(s, a, i, p) * at_b(s, b, p, j);
      c[i * s.n + j] = sum;
    }
  }
}

void xcorr(std::span<const double> a, std::span<const double> b,
           std::span<double> out) {
  for (std::size_t k = 0; k < out.size(); ++k) {
    double sum = 0.0;
    for (std::size_t n = 0; n < a.size() && n + k < b.size(); ++n) sum += a[n] * b[n + k];
    out[k] = sum;
  }
}

void convolve_full(std::span<const double> x, std::span<const double> h,
                   std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t n = 0; n < x.size(); ++n)
    for (std::size_t k = 0; k < h.size(); ++k) out[n + k] += x[n] * h[k];
}

}  // namespace reference

namespace parallel {

void gemm(const GemmShape& s, const double* a, const double* b, double* c,
          bool accumulate) {
  const std::size_t m = s.m, n = s.n, k = s.k;
  const bool par = m * n * k >= kParallelWork && m > 1;

  // op(B) = B^T: repack so the inner loop streams contiguous rows.
  std::vector<double> bt;
  const double* bk = b;
  if (s.trans_b == Trans::kYes) {
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    bk = bt.data();
  }

  const auto ms = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t ii = 0; ii < ms; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = s.trans_a == Trans::kNo ? a[i * k + p] : a[p * m + i];
      const double* brow = bk + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void xcorr(std::span<const double> a, std::span<const double> b,
           std::span<double> out) {
  const auto lags = static_cast<std::ptrdiff_t>(out.size());
  const bool par = out.size() * a.size() >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t kk = 0; kk < lags; ++kk) {
    const auto k = static_cast<std::size_t>(kk);
    const std::size_t len = b.size() > k ? std::min(a.size(), b.size() - k) : 0;
    const double* ap = a.data();
    const double* bp = b.data() + k;
    double sum = 0.0;
#pragma omp simd reduction(+ : sum)
    for (std::size_t n = 0; n < len; ++n) sum += ap[n] * bp[n];
    out[k] = sum;
  }
}

void convolve_full(std::span<const double> x, std::span<const double> h,
                   std::span<double> out) {
  const std::size_t nx = x.size(), nh = h.size();
  const auto total = static_cast<std::ptrdiff_t>(out.size());
  const bool par = nx * nh >= kParallelWork;
  // Output block per thread; each y[n] sums h[k] * x[n - k] over valid k.
  constexpr std::ptrdiff_t kBlock = 256;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t blk = 0; blk < total; blk += kBlock) {
    const std::ptrdiff_t end = std::min(total, blk + kBlock);
    std::fill(out.begin() + blk, out.begin() + end, 0.0);
    for (std::size_t k = 0; k < nh; ++k) {
      const double hv = h[k];
      const auto kk = static_cast<std::ptrdiff_t>(k);
      const std::ptrdiff_t lo = std::max(blk, kk);
      const std::ptrdiff_t hi = std::min(end, kk + static_cast<std::ptrdiff_t>(nx));
      double* yp = out.data();
      const double* xp = x.data();
#pragma omp simd
      for (std::ptrdiff_t n = lo; n < hi; ++n) yp[n] += hv * xp[n - kk];
    }
  }
}

}  // namespace parallel

}  // namespace bfsep::kernels
