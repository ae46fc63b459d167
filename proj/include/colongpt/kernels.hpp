#pragma once

// Dense inner loops shared by every numeric module. Each kernel has a scalar
// reference implementation and an AVX2/FMA variant; the active variant is
// picked once at startup from CPUID and can be pinned with COLONGPT_SIMD.

#include <cstddef>
#include <span>
#include <string_view>

namespace colongpt::kernels {

enum class Backend { kScalar, kAvx2 };

std::string_view backend_name(Backend b);
bool backend_supported(Backend b);

/// Backend used by the dispatching entry points below.
Backend active_backend();

/// Pins the dispatching backend. Throws UsageError when the CPU lacks it.
void set_backend(Backend b);

// C[m x n] (+)= A[m x k] * B[k x n]; all row-major and contiguous.
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate);
double dot(std::span<const double> a, std::span<const double> b);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

namespace scalar {
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate);
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
}  // namespace scalar

namespace avx2 {
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate);
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
}  // namespace avx2

}  // namespace colongpt::kernels
