#include <cstdlib>
#include <string_view>

#include "usage/numerics/kernels.hpp"

namespace usage::kernels {

#if defined(USAGE_BUILD_AVX2)
const KernelTable& avx2_table_impl();
#endif

const KernelTable* avx2_kernels() {
#if defined(USAGE_BUILD_AVX2) && (defined(__x86_64__) || defined(__i386__))
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &avx2_table_impl() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() {
  static const KernelTable& chosen = [] () -> const KernelTable& {
    const char* forced = std::getenv("USAGE_SIMD");
    if (forced != nullptr && std::string_view(forced) == "scalar") return scalar_kernels();
    if (const KernelTable* fast = avx2_kernels()) return *fast;
    return scalar_kernels();
  }();
  return chosen;
}

}  // namespace usage::kernels
