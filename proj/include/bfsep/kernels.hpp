#pragma once

// Dense inner loops shared by the autodiff engine, the losses and the room
// simulator. Every kernel has two implementations:
//
//   reference::  plain serial loops, written for obviousness; kept as the
//                test oracle for the parallel versions.
//   parallel::   OpenMP-parallel, cache-friendly versions. Each output element
//                is produced by exactly one thread with a fixed summation
//                order, so results do not depend on the thread schedule.
//
// The unqualified functions dispatch to parallel::.

#include <cstddef>
#include <span>

namespace bfsep::kernels {

enum class Trans { kNo, kYes };

// C (m x n) = op(A) (m x k) * op(B) (k x n) [+ C if accumulate]. Row-major,
// densely packed: op(A) = A is m x k, op(A) = A^T means A is stored k x m.
struct GemmShape {
  std::size_t m = 0, n = 0, k = 0;
  Trans trans_a = Trans::kNo;
  Trans trans_b = Trans::kNo;
};

namespace reference {
void gemm(const GemmShape& s, const double* a, const double* b, double* c,
          bool accumulate);
// out[k] = sum_n a[n] * b[n + k] for k in [0, out.size()).
void xcorr(std::span<const double> a, std::span<const double> b,
           std::span<double> out);
// out (size x.size() + h.size() - 1) = full linear convolution x * h.
void convolve_full(std::span<const double> x, std::span<const double> h,
                   std::span<double> out);
}  // namespace reference

namespace parallel {
void gemm(const GemmShape& s, const double* a, const double* b, double* c,
          bool accumulate);
void xcorr(std::span<const double> a, std::span<const double> b,
           std::span<double> out);
void convolve_full(std::span<const double> x, std::span<const double> h,
                   std::span<double> out);
}  // namespace parallel

inline void gemm(const GemmShape& s, const double* a, const double* b,
                 double* c, bool accumulate) {
  parallel::gemm(s, a, b, c, accumulate);
}
inline void xcorr(std::span<const double> a, std::span<const double> b,
                  std::span<double> out) {
  parallel::xcorr(a, b, out);
}
inline void convolve_full(std::span<const double> x, std::span<const double> h,
                          std::span<double> out) {
  parallel::convolve_full(x, h, out);
}

// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace bfsep::kernels
