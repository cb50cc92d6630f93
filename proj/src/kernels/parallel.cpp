#include "carry/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <vector>

#include <omp.h>

namespace carry::kernels {

namespace {

int g_threads = 0;

int env_threads() {
  for (const char* name : {"CARRY_THREADS", "OMP_NUM_THREADS"}) {
    if (const char* v = std::getenv(name)) {
      int n = std::atoi(v);
      if (n > 0) return n;
    }
  }
  return omp_get_max_threads();
}

template <typename T>
constexpr int kNr = 64 / static_cast<int>(sizeof(T)) * 2;  // two vector registers
constexpr int kMr = 6;
constexpr std::size_t kKc = 256;

// Packs op(B)[K,N] into column panels of width NR: panel p holds rows
// k = 0..K-1 of columns [p*NR, p*NR+NR), zero padded.
template <typename T>
void pack_b(Trans tb, const T* b, std::size_t ldb, std::size_t k, std::size_t n,
            std::vector<T>& out) {
  constexpr std::size_t nr = kNr<T>;
  const std::size_t panels = (n + nr - 1) / nr;
  out.assign(panels * k * nr, T(0));
  for (std::size_t p = 0; p < panels; ++p) {
    T* dst = out.data() + p * k * nr;
    const std::size_t j0 = p * nr;
    const std::size_t jn = std::min(nr, n - j0);
    if (tb == Trans::No) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T* src = b + kk * ldb + j0;
        for (std::size_t j = 0; j < jn; ++j) dst[kk * nr + j] = src[j];
      }
    } else {
      for (std::size_t j = 0; j < jn; ++j) {
        const T* src = b + (j0 + j) * ldb;
        for (std::size_t kk = 0; kk < k; ++kk) dst[kk * nr + j] = src[kk];
      }
    }
  }
}

// Packs op(A)[M,K] into row panels of height MR: panel q holds, for each
// k, rows [q*MR, q*MR+MR) contiguously, zero padded.
template <typename T>
void pack_a(Trans ta, const T* a, std::size_t lda, std::size_t m, std::size_t k,
            std::vector<T>& out) {
  const std::size_t panels = (m + kMr - 1) / kMr;
  out.assign(panels * k * kMr, T(0));
  for (std::size_t q = 0; q < panels; ++q) {
    T* dst = out.data() + q * k * kMr;
    const std::size_t i0 = q * kMr;
    const std::size_t in = std::min<std::size_t>(kMr, m - i0);
    if (ta == Trans::No) {
      for (std::size_t i = 0; i < in; ++i) {
        const T* src = a + (i0 + i) * lda;
        for (std::size_t kk = 0; kk < k; ++kk) dst[kk * kMr + i] = src[kk];
      }
    } else {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T* src = a + kk * lda + i0;
        for (std::size_t i = 0; i < in; ++i) dst[kk * kMr + i] = src[i];
      }
    }
  }
}

template <typename T, int MR>
inline void micro_kernel(const T* ap, std::size_t k, const T* bp, T* acc) {
  constexpr int nr = kNr<T>;
  T c[MR][nr] = {};
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* brow = bp + kk * nr;
    const T* acol = ap + kk * kMr;
#pragma GCC unroll 8
    for (int r = 0; r < MR; ++r) {
      const T av = acol[r];
#pragma omp simd
      for (int j = 0; j < nr; ++j) c[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int j = 0; j < nr; ++j) acc[r * nr + j] = c[r][j];
}

template <typename T>
void store_tile(const T* acc, int rows, std::size_t cols, T alpha, T beta, T* c,
                std::size_t ldc) {
  constexpr int nr = kNr<T>;
  for (int r = 0; r < rows; ++r) {
    T* crow = c + r * ldc;
    const T* arow = acc + r * nr;
    if (beta == T(0)) {
      for (std::size_t j = 0; j < cols; ++j) crow[j] = alpha * arow[j];
    } else {
      for (std::size_t j = 0; j < cols; ++j)
        crow[j] = alpha * arow[j] + beta * crow[j];
    }
  }
}

template <typename T>
void gemm_packed(GemmShape s, T alpha, const T* ap, const T* bp, T beta, T* c,
                 std::size_t ldc, bool use_threads) {
  constexpr int nr = kNr<T>;
  const std::size_t panels = (s.n + nr - 1) / nr;
  const std::size_t row_blocks = (s.m + kMr - 1) / kMr;
  const std::size_t tiles = row_blocks * panels;
  const auto body = [&](std::size_t t) {
    alignas(64) T acc[kMr * nr];
    const std::size_t rb = t / panels;
    const std::size_t p = t % panels;
    const std::size_t i0 = rb * kMr;
    const int rows = static_cast<int>(std::min<std::size_t>(kMr, s.m - i0));
    const T* a_blk = ap + rb * s.k * kMr;
    const T* b_pan = bp + p * s.k * nr;
    switch (rows) {
      case 6: micro_kernel<T, 6>(a_blk, s.k, b_pan, acc); break;
      case 5: micro_kernel<T, 5>(a_blk, s.k, b_pan, acc); break;
      case 4: micro_kernel<T, 4>(a_blk, s.k, b_pan, acc); break;
      case 3: micro_kernel<T, 3>(a_blk, s.k, b_pan, acc); break;
      case 2: micro_kernel<T, 2>(a_blk, s.k, b_pan, acc); break;
      default: micro_kernel<T, 1>(a_blk, s.k, b_pan, acc); break;
    }
    const std::size_t j0 = p * nr;
    store_tile(acc, rows, std::min<std::size_t>(nr, s.n - j0), alpha, beta,
               c + i0 * ldc + j0, ldc);
  };
  if (use_threads) {
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::size_t t = 0; t < tiles; ++t) body(t);
  } else {
    for (std::size_t t = 0; t < tiles; ++t) body(t);
  }
}

template <typename T>
void scale_c(GemmShape s, T beta, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < s.m; ++i)
    for (std::size_t j = 0; j < s.n; ++j)
      c[i * ldc + j] = beta == T(0) ? T(0) : beta * c[i * ldc + j];
}

// Direct loop for tiny products (attention scores over short sequences).
template <typename T>
void gemm_small(Trans ta, Trans tb, GemmShape s, T alpha, const T* a,
                std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
                std::size_t ldc) {
  for (std::size_t i = 0; i < s.m; ++i) {
    for (std::size_t j = 0; j < s.n; ++j) {
      T acc = 0;
      for (std::size_t kk = 0; kk < s.k; ++kk) {
        const T av = ta == Trans::No ? a[i * lda + kk] : a[kk * lda + i];
        const T bv = tb == Trans::No ? b[kk * ldb + j] : b[j * ldb + kk];
        acc += av * bv;
      }
      T& out = c[i * ldc + j];
      out = beta == T(0) ? alpha * acc : alpha * acc + beta * out;
    }
  }
}

}  // namespace

int thread_count() {
  if (g_threads <= 0) g_threads = env_threads();
  return g_threads;
}

void set_thread_count(int n) { g_threads = n; }

namespace parallel {

template <typename T>
void gemm(Trans ta, Trans tb, GemmShape s, T alpha, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  if (s.m == 0 || s.n == 0) return;
  if (s.k == 0) {
    scale_c(s, beta, c, ldc);
    return;
  }
  if (s.m * s.n * s.k < 32 * 32 * 32) {
    gemm_small(ta, tb, s, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  std::vector<T> ap, bp;
  for (std::size_t k0 = 0; k0 < s.k; k0 += kKc) {
    const std::size_t kc = std::min(kKc, s.k - k0);
    const T* a_blk = ta == Trans::No ? a + k0 : a + k0 * lda;
    const T* b_blk = tb == Trans::No ? b + k0 * ldb : b + k0;
    pack_a(ta, a_blk, lda, s.m, kc, ap);
    pack_b(tb, b_blk, ldb, kc, s.n, bp);
    gemm_packed({s.m, s.n, kc}, alpha, ap.data(), bp.data(),
                k0 == 0 ? beta : T(1), c, ldc, true);
  }
}

template <typename T>
void gemm_batched(Trans ta, Trans tb, GemmShape s, std::size_t count, T alpha,
                  const T* a, std::size_t lda, std::size_t stride_a, const T* b,
                  std::size_t ldb, std::size_t stride_b, T beta, T* c,
                  std::size_t ldc, std::size_t stride_c) {
  if (s.m * s.n * s.k < 32 * 32 * 32) {
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::size_t q = 0; q < count; ++q)
      gemm_small(ta, tb, s, alpha, a + q * stride_a, lda, b + q * stride_b, ldb,
                 beta, c + q * stride_c, ldc);
    return;
  }
#pragma omp parallel num_threads(thread_count())
  {
    std::vector<T> ap, bp;
#pragma omp for schedule(static)
    for (std::size_t q = 0; q < count; ++q) {
      pack_a(ta, a + q * stride_a, lda, s.m, s.k, ap);
      pack_b(tb, b + q * stride_b, ldb, s.k, s.n, bp);
      gemm_packed(s, alpha, ap.data(), bp.data(), beta, c + q * stride_c, ldc,
                  false);
    }
  }
}

template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = x + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
  }
}

template <typename T>
void layernorm_rows(const T* x, std::size_t rows, std::size_t cols, T eps,
                    const T* scale, const T* shift, T* xhat, T* rstd, T* y) {
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T mean = 0;
#pragma omp simd reduction(+ : mean)
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<T>(cols);
    T var = 0;
#pragma omp simd reduction(+ : var)
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    T* hr = xhat + r * cols;
    T* yr = y + r * cols;
#pragma omp simd
    for (std::size_t j = 0; j < cols; ++j) {
      hr[j] = (xr[j] - mean) * rs;
      yr[j] = hr[j] * scale[j] + shift[j];
    }
  }
}

#define CARRY_INSTANTIATE(T)                                                   \
  template void gemm<T>(Trans, Trans, GemmShape, T, const T*, std::size_t,      \
                        const T*, std::size_t, T, T*, std::size_t);             \
  template void gemm_batched<T>(Trans, Trans, GemmShape, std::size_t, T,        \
                                const T*, std::size_t, std::size_t, const T*,   \
                                std::size_t, std::size_t, T, T*, std::size_t,   \
                                std::size_t);                                   \
  template void softmax_rows<T>(T*, std::size_t, std::size_t);                  \
  template void layernorm_rows<T>(const T*, std::size_t, std::size_t, T,        \
                                  const T*, const T*, T*, T*, T*);

CARRY_INSTANTIATE(float)
CARRY_INSTANTIATE(double)
#undef CARRY_INSTANTIATE

}  // namespace parallel
}  // namespace carry::kernels
