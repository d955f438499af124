#include "ckptdiff/blas.hpp"

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace ckptdiff {

namespace {
// The worker pool owns all parallelism; a threaded BLAS underneath it would
// both oversubscribe the cores and break run-to-run determinism.
const int kSingleThreaded = (openblas_set_num_threads(1), 0);
}  // namespace

void gemm_f32(bool trans_a, bool trans_b, long m, long n, long k, float alpha, const float* a,
              long lda, const float* b, long ldb, float beta, float* c, long ldc) {
  (void)kSingleThreaded;
  if (m == 0 || n == 0) return;
  if (k == 0) {  // avoid handing BLAS the null pointers of empty tensors
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < n; ++j) c[i * ldc + j] *= beta;
    return;
  }
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, alpha, a, (int)lda, b,
              (int)ldb, beta, c, (int)ldc);
}

void gemm_f64(bool trans_a, bool trans_b, long m, long n, long k, double alpha, const double* a,
              long lda, const double* b, long ldb, double beta, double* c, long ldc) {
  (void)kSingleThreaded;
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < n; ++j) c[i * ldc + j] *= beta;
    return;
  }
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, alpha, a, (int)lda, b,
              (int)ldb, beta, c, (int)ldc);
}

}  // namespace ckptdiff
