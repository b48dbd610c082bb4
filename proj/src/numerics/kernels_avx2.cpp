// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.

#include "usage/numerics/kernels.hpp"

#if defined(USAGE_BUILD_AVX2)

#include <immintrin.h>

#include <cmath>

namespace usage::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

// Rows [i, i + R) against columns [j, j + 8).
template <int R>
inline void block_8(std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, std::size_t i, std::size_t j, bool accumulate) {
  __m256d acc0[R];
  __m256d acc1[R];
  for (int r = 0; r < R; ++r) {
    if (accumulate) {
      acc0[r] = _mm256_loadu_pd(c + (i + r) * n + j);
      acc1[r] = _mm256_loadu_pd(c + (i + r) * n + j + 4);
    } else {
      acc0[r] = _mm256_setzero_pd();
      acc1[r] = _mm256_setzero_pd();
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
    for (int r = 0; r < R; ++r) {
      const __m256d av = _mm256_broadcast_sd(a + (i + r) * k + p);
      acc0[r] = _mm256_fmadd_pd(av, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_pd(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    _mm256_storeu_pd(c + (i + r) * n + j, acc0[r]);
    _mm256_storeu_pd(c + (i + r) * n + j + 4, acc1[r]);
  }
}

template <int R>
inline void block_4(std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, std::size_t i, std::size_t j, bool accumulate) {
  __m256d acc[R];
  for (int r = 0; r < R; ++r) {
    acc[r] = accumulate ? _mm256_loadu_pd(c + (i + r) * n + j) : _mm256_setzero_pd();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
    for (int r = 0; r < R; ++r) {
      acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + (i + r) * k + p), b0, acc[r]);
    }
  }
  for (int r = 0; r < R; ++r) _mm256_storeu_pd(c + (i + r) * n + j, acc[r]);
}

template <int R>
inline void block_1(std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, std::size_t i, std::size_t j, bool accumulate) {
  for (int r = 0; r < R; ++r) {
    double acc = accumulate ? c[(i + r) * n + j] : 0.0;
    for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[(i + r) * k + p], b[p * n + j], acc);
    c[(i + r) * n + j] = acc;
  }
}

template <int R>
inline void row_panel(std::size_t n, std::size_t k, const double* a, const double* b,
                      double* c, std::size_t i, bool accumulate) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) block_8<R>(n, k, a, b, c, i, j, accumulate);
  for (; j + 4 <= n; j += 4) block_4<R>(n, k, a, b, c, i, j, accumulate);
  for (; j < n; ++j) block_1<R>(n, k, a, b, c, i, j, accumulate);
}

void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_panel<4>(n, k, a, b, c, i, accumulate);
  for (; i < m; ++i) row_panel<1>(n, k, a, b, c, i, accumulate);
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc = std::fma(x[i], y[i], acc);
  return acc;
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void mul_avx2(std::size_t n, const double* x, const double* y, double* z) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(z + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) z[i] = x[i] * y[i];
}

double sum_avx2(std::size_t n, const double* x) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double total = hsum(acc);
  for (; i < n; ++i) total += x[i];
  return total;
}

bool all_finite_avx2(std::size_t n, const double* x) {
  // x - x is 0 for finite x and NaN for +-inf or NaN.
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    acc = _mm256_add_pd(acc, _mm256_sub_pd(v, v));
  }
  if (_mm256_movemask_pd(_mm256_cmp_pd(acc, acc, _CMP_UNORD_Q)) != 0) return false;
  for (; i < n; ++i) {
    if (!std::isfinite(x[i])) return false;
  }
  return true;
}

}  // namespace

const KernelTable& avx2_table_impl() {
  static const KernelTable table{"avx2", gemm_avx2, dot_avx2,        axpy_avx2,
                                 mul_avx2, sum_avx2, all_finite_avx2};
  return table;
}

}  // namespace usage::kernels

#endif
