#pragma once

#include <cstddef>

#ifdef OPTFUSION_WITH_CBLAS
#include <cblas.h>
#endif

namespace optfusion {

// Row-major C = alpha * op(A) op(B) + beta * C, the one dense kernel
// everything funnels through. Strides (lda/ldb/ldc) are row strides, so
// callers can address sub-blocks of larger matrices in place.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                 std::size_t k, double alpha, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double beta, double* c,
                 std::size_t ldc) {
  if (m == 0 || n == 0) return;
#ifdef OPTFUSION_WITH_CBLAS
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
#else
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (beta == 0.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    } else if (beta != 1.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (std::size_t p = 0; p < k; ++p) {
      double av = trans_a ? a[p * lda + i] : a[i * lda + p];
      if (av == 0.0) continue;
      av *= alpha;
      const double* brow = trans_b ? nullptr : b + p * ldb;
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
#endif
}

}  // namespace optfusion
