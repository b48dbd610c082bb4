#pragma once

// Dense double-precision inner loops. Every kernel has a scalar reference
// implementation; an AVX2+FMA variant is selected at runtime when the CPU
// supports it. Set USAGE_SIMD=scalar to force the reference path.

#include <cstddef>
#include <string_view>

namespace usage::kernels {

struct KernelTable {
  std::string_view name;

  // c[m x n] (+)= a[m x k] * b[k x n], all row-major and densely packed.
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate);
  double (*dot)(std::size_t n, const double* x, const double* y);
  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  // z = x * y (elementwise)
  void (*mul)(std::size_t n, const double* x, const double* y, double* z);
  double (*sum)(std::size_t n, const double* x);
  // true iff every entry is finite
  bool (*all_finite)(std::size_t n, const double* x);
};

const KernelTable& scalar_kernels();

// nullptr when the build lacks AVX2 support or the CPU does not report it.
const KernelTable* avx2_kernels();

// Table used by the rest of the library. Chosen once, on first call.
const KernelTable& active();

}  // namespace usage::kernels
