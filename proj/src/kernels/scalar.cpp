#include "clickrefine/kernels/kernels.hpp"

namespace clickrefine::kernels {
namespace {

template <typename T>
void gemm_ref(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
              std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = T{0};
    }
  }
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * ldc;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * lda + p];
        const T* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc{0};
        for (std::size_t p = 0; p < k; ++p) acc += a[i * lda + p] * b[j * ldb + p];
        c[i * ldc + j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * ldb;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = a[p * lda + i];
        T* crow = c + i * ldc;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc{0};
        for (std::size_t p = 0; p < k; ++p) acc += a[p * lda + i] * b[j * ldb + p];
        c[i * ldc + j] += acc;
      }
    }
  }
}

template <typename T>
T dot_ref(const T* x, const T* y, std::size_t n) {
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
void axpy_ref(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{
      Isa::scalar,
      {&gemm_ref<float>, &dot_ref<float>, &axpy_ref<float>},
      {&gemm_ref<double>, &dot_ref<double>, &axpy_ref<double>},
  };
  return table;
}

}  // namespace clickrefine::kernels
