#include <gtest/gtest.h>

#include "clickrefine/kernels/kernels.hpp"
#include "test_util.hpp"

namespace clickrefine {
namespace {

using kernels::KernelSet;

template <typename T>
void compare_gemm(const KernelSet<T>& ref, const KernelSet<T>& simd, double tol) {
  const std::size_t sizes[][3] = {{1, 1, 1}, {3, 5, 7}, {8, 8, 8}, {17, 33, 9}, {64, 31, 70}, {5, 100, 3}};
  std::uint64_t seed = 1;
  for (const auto& s : sizes) {
    const std::size_t m = s[0], n = s[1], k = s[2];
    for (int ta = 0; ta < 2; ++ta) {
      for (int tb = 0; tb < 2; ++tb) {
        for (int acc = 0; acc < 2; ++acc) {
          const std::size_t lda = (ta ? m : k) + 2, ldb = (tb ? k : n) + 1, ldc = n + 3;
          const auto a = testing::random_array<T>({(ta ? k : m) * lda}, seed++);
          const auto b = testing::random_array<T>({(tb ? n : k) * ldb}, seed++);
          auto c1 = testing::random_array<T>({m * ldc}, seed++);
          auto c2 = c1;
          ref.gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c1.data(), ldc, acc);
          simd.gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c2.data(), ldc, acc);
          EXPECT_LE(testing::max_abs_diff(c1, c2), tol * static_cast<double>(k))
              << "m=" << m << " n=" << n << " k=" << k << " ta=" << ta << " tb=" << tb;
        }
      }
    }
  }
}

template <typename T>
void compare_vector_ops(const KernelSet<T>& ref, const KernelSet<T>& simd, double tol) {
  for (std::size_t n : {0u, 1u, 3u, 8u, 15u, 64u, 1001u}) {
    const auto x = testing::random_array<T>({n}, 10 + n);
    const auto y = testing::random_array<T>({n}, 20 + n);
    EXPECT_NEAR(ref.dot(x.data(), y.data(), n), simd.dot(x.data(), y.data(), n), tol * (n + 1));
    auto y1 = y, y2 = y;
    ref.axpy(n, T(0.75), x.data(), y1.data());
    simd.axpy(n, T(0.75), x.data(), y2.data());
    EXPECT_LE(testing::max_abs_diff(y1, y2), tol);
  }
}

TEST(Kernels, ScalarGemmMatchesNaiveLoop) {
  const auto& ref = kernels::scalar_table().f64;
  const std::size_t m = 4, n = 5, k = 6;
  const auto a = testing::random_array<double>({m, k}, 1);
  const auto b = testing::random_array<double>({k, n}, 2);
  Array64 c({m, n});
  ref.gemm(false, false, m, n, k, a.data(), k, b.data(), n, c.data(), n, false);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      EXPECT_NEAR(c[i * n + j], s, 1e-12);
    }
  }
}

TEST(Kernels, Avx2MatchesScalarReference) {
  const kernels::KernelTable* simd = kernels::avx2_table();
  if (simd == nullptr || !kernels::cpu_supports_avx2()) GTEST_SKIP() << "AVX2 not available";
  compare_gemm(kernels::scalar_table().f32, simd->f32, 1e-6);
  compare_gemm(kernels::scalar_table().f64, simd->f64, 1e-14);
  compare_vector_ops(kernels::scalar_table().f32, simd->f32, 1e-5);
  compare_vector_ops(kernels::scalar_table().f64, simd->f64, 1e-13);
}

TEST(Kernels, ForceIsaPinsDispatch) {
  const kernels::Isa before = kernels::active_isa();
  kernels::force_isa(kernels::Isa::scalar);
  EXPECT_EQ(kernels::active_isa(), kernels::Isa::scalar);
  kernels::force_isa(before);
  EXPECT_EQ(kernels::active_isa(), before);
}

}  // namespace
}  // namespace clickrefine
