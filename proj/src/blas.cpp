#include "sfe/blas.hpp"

#include <cblas.h>

#include <thread>

extern "C" void openblas_set_num_threads(int);

namespace sfe::blas {

namespace {
CBLAS_TRANSPOSE flag(bool t) { return t ? CblasTrans : CblasNoTrans; }
}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, flag(trans_a), flag(trans_b), m, n, k, alpha, a,
              lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, flag(trans_a), flag(trans_b), m, n, k, alpha, a,
              lda, b, ldb, beta, c, ldc);
}

void set_num_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  openblas_set_num_threads(n);
}

}  // namespace sfe::blas
