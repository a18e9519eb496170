#pragma once

#include <cstddef>
#include <string_view>

// Inner-loop kernels behind the array engine. Every kernel has a scalar
// reference implementation and an AVX2+FMA variant; the variant is picked once
// at startup from CPUID and can be pinned with CLICKREFINE_ISA=scalar.

namespace clickrefine::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

template <typename T>
struct KernelSet {
  // C[M,N] (+)= op(A)[M,K] * op(B)[K,N]; op transposes when the flag is set.
  void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
               std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate);
  T (*dot)(const T* x, const T* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(std::size_t n, T alpha, const T* x, T* y);
};

struct KernelTable {
  Isa isa;
  KernelSet<float> f32;
  KernelSet<double> f64;
};

const KernelTable& scalar_table();
// Null when the binary was built without AVX2 support.
const KernelTable* avx2_table();

bool cpu_supports_avx2();

// Active table; resolved on first use.
const KernelTable& active();
Isa active_isa();
// Test hook: pin the dispatch (throws if the ISA is unavailable).
void force_isa(Isa isa);

template <typename T>
const KernelSet<T>& kernels_for(const KernelTable& table) {
  if constexpr (sizeof(T) == 4) {
    return table.f32;
  } else {
    return table.f64;
  }
}

template <typename T>
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
                 std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  kernels_for<T>(active()).gemm(trans_a, trans_b, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <typename T>
inline T dot(const T* x, const T* y, std::size_t n) {
  return kernels_for<T>(active()).dot(x, y, n);
}

template <typename T>
inline void axpy(std::size_t n, T alpha, const T* x, T* y) {
  kernels_for<T>(active()).axpy(n, alpha, x, y);
}

}  // namespace clickrefine::kernels
