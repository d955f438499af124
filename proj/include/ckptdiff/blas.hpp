#pragma once
// Row-major GEMM wrappers over the system BLAS, pinned to one BLAS thread so
// results do not depend on machine load. C = alpha * op(A) op(B) + beta * C.
namespace ckptdiff {

void gemm_f32(bool trans_a, bool trans_b, long m, long n, long k, float alpha, const float* a,
              long lda, const float* b, long ldb, float beta, float* c, long ldc);
void gemm_f64(bool trans_a, bool trans_b, long m, long n, long k, double alpha, const double* a,
              long lda, const double* b, long ldb, double beta, double* c, long ldc);

}  // namespace ckptdiff
