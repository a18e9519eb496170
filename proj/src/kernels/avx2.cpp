// Compiled with -mavx2 -mfma; only reached after a CPUID check.
#include <immintrin.h>

#include "clickrefine/kernels/kernels.hpp"

namespace clickrefine::kernels {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d high64 = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
}

// Thin traits so one kernel body serves both precisions.
template <typename T>
struct Vec;

template <>
struct Vec<float> {
  using reg = __m256;
  static constexpr std::size_t width = 8;
  static reg zero() { return _mm256_setzero_ps(); }
  static reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  static reg set1(float v) { return _mm256_set1_ps(v); }
  static reg fma(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
  static float sum(reg v) { return hsum(v); }
};

template <>
struct Vec<double> {
  using reg = __m256d;
  static constexpr std::size_t width = 4;
  static reg zero() { return _mm256_setzero_pd(); }
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg set1(double v) { return _mm256_set1_pd(v); }
  static reg fma(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
  static double sum(reg v) { return hsum(v); }
};

template <typename T>
T dot_avx2(const T* x, const T* y, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  auto acc0 = V::zero();
  auto acc1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * w <= n; i += 2 * w) {
    acc0 = V::fma(V::load(x + i), V::load(y + i), acc0);
    acc1 = V::fma(V::load(x + i + w), V::load(y + i + w), acc1);
  }
  for (; i + w <= n; i += w) acc0 = V::fma(V::load(x + i), V::load(y + i), acc0);
  T acc = V::sum(V::add(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
void axpy_avx2(std::size_t n, T alpha, const T* x, T* y) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  const auto a = V::set1(alpha);
  std::size_t i = 0;
  for (; i + w <= n; i += w) V::store(y + i, V::fma(a, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// One row of C against a panel of B, with four accumulators held in
// registers across the K loop. a_stride walks op(A)'s row i.
template <typename T>
void row_panel(std::size_t n, std::size_t k, const T* a_row, std::size_t a_stride, const T* b,
               std::size_t ldb, T* c_row) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  constexpr std::size_t block = 4 * w;
  std::size_t j = 0;
  for (; j + block <= n; j += block) {
    auto c0 = V::load(c_row + j);
    auto c1 = V::load(c_row + j + w);
    auto c2 = V::load(c_row + j + 2 * w);
    auto c3 = V::load(c_row + j + 3 * w);
    for (std::size_t p = 0; p < k; ++p) {
      const auto av = V::set1(a_row[p * a_stride]);
      const T* brow = b + p * ldb + j;
      c0 = V::fma(av, V::load(brow), c0);
      c1 = V::fma(av, V::load(brow + w), c1);
      c2 = V::fma(av, V::load(brow + 2 * w), c2);
      c3 = V::fma(av, V::load(brow + 3 * w), c3);
    }
    V::store(c_row + j, c0);
    V::store(c_row + j + w, c1);
    V::store(c_row + j + 2 * w, c2);
    V::store(c_row + j + 3 * w, c3);
  }
  for (; j + w <= n; j += w) {
    auto c0 = V::load(c_row + j);
    for (std::size_t p = 0; p < k; ++p) {
      c0 = V::fma(V::set1(a_row[p * a_stride]), V::load(b + p * ldb + j), c0);
    }
    V::store(c_row + j, c0);
  }
  for (; j < n; ++j) {
    T acc = c_row[j];
    for (std::size_t p = 0; p < k; ++p) acc += a_row[p * a_stride] * b[p * ldb + j];
    c_row[j] = acc;
  }
}

template <typename T>
void gemm_avx2(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
               std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = T{0};
    }
  }
  if (!trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* a_row = trans_a ? a + i : a + i * lda;
      const std::size_t a_stride = trans_a ? lda : 1;
      row_panel(n, k, a_row, a_stride, b, ldb, c + i * ldc);
    }
    return;
  }
  if (!trans_a) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += dot_avx2(a + i * lda, b + j * ldb, k);
    }
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += a[p * lda + i] * b[j * ldb + p];
      c[i * ldc + j] += acc;
    }
  }
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{
      Isa::avx2,
      {&gemm_avx2<float>, &dot_avx2<float>, &axpy_avx2<float>},
      {&gemm_avx2<double>, &dot_avx2<double>, &axpy_avx2<double>},
  };
  return &table;
}

}  // namespace clickrefine::kernels
