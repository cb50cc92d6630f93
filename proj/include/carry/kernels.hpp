#pragma once

#include <cstddef>
#include <span>

// Dense kernels used by the autodiff engine. Every kernel exists twice:
// `parallel::` is the OpenMP-tiled version used in training, `reference::`
// is a plain serial loop nest kept as the ground truth for tests and the
// benchmark target.

namespace carry::kernels {

enum class Trans { No, Yes };

// Row-major C[M,N] = alpha * op(A)[M,K] * op(B)[K,N] + beta * C.
// op(A) is A (lda >= K) or A^T where A is stored [K,M] (lda >= M).
struct GemmShape {
  std::size_t m = 0, n = 0, k = 0;
};

namespace parallel {

template <typename T>
void gemm(Trans ta, Trans tb, GemmShape s, T alpha, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

// Batched: count independent products with strides between consecutive items.
template <typename T>
void gemm_batched(Trans ta, Trans tb, GemmShape s, std::size_t count, T alpha,
                  const T* a, std::size_t lda, std::size_t stride_a, const T* b,
                  std::size_t ldb, std::size_t stride_b, T beta, T* c,
                  std::size_t ldc, std::size_t stride_c);

// Softmax over contiguous rows of length `cols`, in place.
template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols);

// Layernorm over rows; writes normalized values (pre-affine) to xhat and the
// per-row inverse standard deviation to rstd, then y = xhat * scale + shift.
template <typename T>
void layernorm_rows(const T* x, std::size_t rows, std::size_t cols, T eps,
                    const T* scale, const T* shift, T* xhat, T* rstd, T* y);

}  // namespace parallel

namespace reference {

template <typename T>
void gemm(Trans ta, Trans tb, GemmShape s, T alpha, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols);

template <typename T>
void layernorm_rows(const T* x, std::size_t rows, std::size_t cols, T eps,
                    const T* scale, const T* shift, T* xhat, T* rstd, T* y);

}  // namespace reference

// Thread count used by the parallel kernels (honours CARRY_THREADS, then
// OMP_NUM_THREADS).
int thread_count();
void set_thread_count(int n);

}  // namespace carry::kernels
