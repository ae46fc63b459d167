// Compiled with -mavx2 -mfma; only reached after a CPUID check.
#include <immintrin.h>

#include <cmath>

#include "colongpt/kernels.hpp"

namespace colongpt::kernels::avx2 {
namespace {

// R rows of C by 8 columns, full k loop held in registers.
template <int R>
inline void block_8(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  __m256d acc0[R];
  __m256d acc1[R];
  for (int r = 0; r < R; ++r) {
    acc0[r] = _mm256_setzero_pd();
    acc1[r] = _mm256_setzero_pd();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + 4);
    for (int r = 0; r < R; ++r) {
      const __m256d av = _mm256_broadcast_sd(a + r * k + p);
      acc0[r] = _mm256_fmadd_pd(av, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_pd(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    double* crow = c + r * n;
    if (accumulate) {
      acc0[r] = _mm256_add_pd(acc0[r], _mm256_loadu_pd(crow));
      acc1[r] = _mm256_add_pd(acc1[r], _mm256_loadu_pd(crow + 4));
    }
    _mm256_storeu_pd(crow, acc0[r]);
    _mm256_storeu_pd(crow + 4, acc1[r]);
  }
}

template <int R>
inline void block_4(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  __m256d acc[R];
  for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n);
    for (int r = 0; r < R; ++r) {
      acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + r * k + p), b0, acc[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    double* crow = c + r * n;
    if (accumulate) acc[r] = _mm256_add_pd(acc[r], _mm256_loadu_pd(crow));
    _mm256_storeu_pd(crow, acc[r]);
  }
}

template <int R>
inline void block_1(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s = std::fma(a[r * k + p], b[p * n], s);
    c[r * n] = accumulate ? c[r * n] + s : s;
  }
}

template <int R>
inline void row_panel(std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                      bool accumulate) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) block_8<R>(n, k, a, b + j, c + j, accumulate);
  for (; j + 4 <= n; j += 4) block_4<R>(n, k, a, b + j, c + j, accumulate);
  for (; j < n; ++j) block_1<R>(n, k, a, b + j, c + j, accumulate);
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_panel<4>(n, k, a + i * k, b, c + i * n, accumulate);
  for (; i < m; ++i) row_panel<1>(n, k, a + i * k, b, c + i * n, accumulate);
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
  double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) s = std::fma(a[i], b[i], s);
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

}  // namespace colongpt::kernels::avx2
