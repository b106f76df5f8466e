#pragma once

namespace sfe::blas {

// Row-major C = alpha * op(A) * op(B) + beta * C, dispatched to the BLAS
// library for float/double. op(A) is MxK, op(B) is KxN, C is MxN.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc);

// Caps the BLAS thread pool; 0 picks the hardware default.
void set_num_threads(int n);

}  // namespace sfe::blas
