#include <cmath>
#include <limits>

#include "carry/kernels.hpp"

namespace carry::kernels::reference {

template <typename T>
void gemm(Trans ta, Trans tb, GemmShape s, T alpha, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < s.m; ++i) {
    for (std::size_t j = 0; j < s.n; ++j) {
      T acc = 0;
      for (std::size_t k = 0; k < s.k; ++k) {
        const T av = ta == Trans::No ? a[i * lda + k] : a[k * lda + i];
        const T bv = tb == Trans::No ? b[k * ldb + j] : b[j * ldb + k];
        acc += av * bv;
      }
      T& out = c[i * ldc + j];
      out = beta == T(0) ? alpha * acc : alpha * acc + beta * out;
    }
  }
}

template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = x + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j)
      if (row[j] > mx) mx = row[j];
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < cols; ++j) row[j] = std::exp(row[j] - mx) / sum;
  }
}

template <typename T>
void layernorm_rows(const T* x, std::size_t rows, std::size_t cols, T eps,
                    const T* scale, const T* shift, T* xhat, T* rstd, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T mean = 0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      xhat[r * cols + j] = (xr[j] - mean) * rstd[r];
      y[r * cols + j] = xhat[r * cols + j] * scale[j] + shift[j];
    }
  }
}

template void gemm<float>(Trans, Trans, GemmShape, float, const float*,
                          std::size_t, const float*, std::size_t, float, float*,
                          std::size_t);
template void gemm<double>(Trans, Trans, GemmShape, double, const double*,
                           std::size_t, const double*, std::size_t, double,
                           double*, std::size_t);
template void softmax_rows<float>(float*, std::size_t, std::size_t);
template void softmax_rows<double>(double*, std::size_t, std::size_t);
template void layernorm_rows<float>(const float*, std::size_t, std::size_t, float,
                                    const float*, const float*, float*, float*,
                                    float*);
template void layernorm_rows<double>(const double*, std::size_t, std::size_t,
                                     double, const double*, const double*,
                                     double*, double*, double*);

}  // namespace carry::kernels::reference
