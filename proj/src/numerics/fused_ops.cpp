#include <algorithm>
#include <cmath>
#include <limits>

#include "carry/autodiff.hpp"
#include "carry/kernels.hpp"

namespace carry::ops {

namespace k = kernels;
using k::Trans;

template <typename T>
void fill_dropout_mask(T* mask, std::size_t n, T p, RngStream& rng);

template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var bias) {
  const auto& xv = t.value(x);
  const auto& wv = t.value(w);
  if (wv.rank() != 2 || xv.rank() < 1 || xv.cols() != wv.dim(0))
    throw ShapeError("linear", xv.shape(), wv.shape());
  const std::size_t m = xv.rows(), kk = xv.cols(), n = wv.dim(1);
  Shape out_shape = xv.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  T beta = T(0);
  if (bias.valid()) {
    const auto& bv = t.value(bias);
    if (bv.shape() != Shape{n}) throw ShapeError("linear bias", wv.shape(), bv.shape());
    for (std::size_t r = 0; r < m; ++r) std::copy_n(bv.ptr(), n, out.ptr() + r * n);
    beta = T(1);
  }
  k::parallel::gemm<T>(Trans::No, Trans::No, {m, n, kk}, T(1), xv.ptr(), kk, wv.ptr(), n, beta,
                       out.ptr(), n);
  auto back = [x, w, bias, m, n, kk](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* gx = tp.grad_buffer(x))
      k::parallel::gemm<T>(Trans::No, Trans::Yes, {m, kk, n}, T(1), g.ptr(), n,
                           tp.value(w).ptr(), n, T(1), gx->ptr(), kk);
    if (auto* gw = tp.grad_buffer(w))
      k::parallel::gemm<T>(Trans::Yes, Trans::No, {kk, n, m}, T(1), tp.value(x).ptr(), kk,
                           g.ptr(), n, T(1), gw->ptr(), n);
    if (bias.valid())
      if (auto* gb = tp.grad_buffer(bias)) {
        T* d = gb->ptr();
        for (std::size_t r = 0; r < m; ++r) {
          const T* gr = g.ptr() + r * n;
#pragma omp simd
          for (std::size_t c = 0; c < n; ++c) d[c] += gr[c];
        }
      }
  };
  if (bias.valid()) return t.record(std::move(out), {x, w, bias}, std::move(back));
  return t.record(std::move(out), {x, w}, std::move(back));
}


template <typename T>
Var concat_cols(Tape<T>& t, std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const auto& first = t.value(parts[0]);
  const std::size_t rows = first.rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const auto& v = t.value(p);
    if (v.rows() != rows || v.rank() != first.rank())
      throw ShapeError("concat_cols", first.shape(), v.shape());
    widths.push_back(v.cols());
    total += v.cols();
  }
  Shape shape = first.shape();
  shape.back() = total;
  Tensor<T> out(shape);
  for (std::size_t r = 0, off = 0; r < rows; ++r, off = 0)
    for (std::size_t i = 0; i < parts.size(); ++i) {
      std::copy_n(t.value(parts[i]).ptr() + r * widths[i], widths[i], out.ptr() + r * total + off);
      off += widths[i];
    }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(out), parts,
                     [ins, widths, rows, total](Tape<T>& tp, const Tensor<T>& g) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < ins.size(); ++i) {
                         if (auto* gi = tp.grad_buffer(ins[i]))
                           for (std::size_t r = 0; r < rows; ++r) {
                             T* d = gi->ptr() + r * widths[i];
                             const T* s = g.ptr() + r * total + off;
                             for (std::size_t c = 0; c < widths[i]; ++c) d[c] += s[c];
                           }
                         off += widths[i];
                       }
                     });
}

template <typename T>
Var concat_rows(Tape<T>& t, std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const auto& first = t.value(parts[0]);
  if (first.rank() < 1) throw ShapeError("concat_rows needs rank >= 1");
  std::vector<std::size_t> sizes;
  std::size_t lead = 0, total = 0;
  for (Var p : parts) {
    const auto& v = t.value(p);
    if (v.rank() != first.rank() ||
        !std::equal(v.shape().begin() + 1, v.shape().end(), first.shape().begin() + 1))
      throw ShapeError("concat_rows", first.shape(), v.shape());
    lead += v.dim(0);
    sizes.push_back(v.size());
    total += v.size();
  }
  Shape shape = first.shape();
  shape[0] = lead;
  Tensor<T> out(shape);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    std::copy_n(t.value(parts[i]).ptr(), sizes[i], out.ptr() + off);
    off += sizes[i];
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [ins, sizes](Tape<T>& tp, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (auto* gi = tp.grad_buffer(ins[i])) {
        T* d = gi->ptr();
        for (std::size_t j = 0; j < sizes[i]; ++j) d[j] += g[off + j];
      }
      off += sizes[i];
    }
  });
}

template <typename T>
Var split_heads(Tape<T>& t, Var x, std::size_t batch, std::size_t heads, std::size_t offset,
                std::size_t d_head) {
  const auto& xv = t.value(x);
  const std::size_t cols = xv.cols();
  if (xv.rank() != 2 || batch == 0 || xv.rows() % batch != 0 || offset + heads * d_head > cols)
    throw ShapeError("split_heads", xv.shape(), Shape{batch, heads, d_head});
  const std::size_t seq = xv.rows() / batch;
  Tensor<T> out({batch * heads, seq, d_head});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t s = 0; s < seq; ++s)
        std::copy_n(xv.ptr() + (b * seq + s) * cols + offset + h * d_head, d_head,
                    out.ptr() + ((b * heads + h) * seq + s) * d_head);
  return t.record(std::move(out), {x},
                  [x, batch, heads, seq, offset, d_head, cols](Tape<T>& tp, const Tensor<T>& g) {
                    auto* gx = tp.grad_buffer(x);
                    if (!gx) return;
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t h = 0; h < heads; ++h)
                        for (std::size_t s = 0; s < seq; ++s) {
                          T* d = gx->ptr() + (b * seq + s) * cols + offset + h * d_head;
                          const T* src = g.ptr() + ((b * heads + h) * seq + s) * d_head;
#pragma omp simd
                          for (std::size_t c = 0; c < d_head; ++c) d[c] += src[c];
                        }
                  });
}

template <typename T>
Var merge_heads(Tape<T>& t, Var z, std::size_t batch) {
  const auto& zv = t.value(z);
  if (zv.rank() != 3 || batch == 0 || zv.dim(0) % batch != 0)
    throw ShapeError("merge_heads", zv.shape(), Shape{batch});
  const std::size_t heads = zv.dim(0) / batch, seq = zv.dim(1), dh = zv.dim(2);
  const std::size_t cols = heads * dh;
  Tensor<T> out({batch * seq, cols});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t s = 0; s < seq; ++s)
        std::copy_n(zv.ptr() + ((b * heads + h) * seq + s) * dh, dh,
                    out.ptr() + (b * seq + s) * cols + h * dh);
  return t.record(std::move(out), {z},
                  [z, batch, heads, seq, dh, cols](Tape<T>& tp, const Tensor<T>& g) {
                    auto* gz = tp.grad_buffer(z);
                    if (!gz) return;
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t h = 0; h < heads; ++h)
                        for (std::size_t s = 0; s < seq; ++s) {
                          T* d = gz->ptr() + ((b * heads + h) * seq + s) * dh;
                          const T* src = g.ptr() + (b * seq + s) * cols + h * dh;
#pragma omp simd
                          for (std::size_t c = 0; c < dh; ++c) d[c] += src[c];
                        }
                  });
}

template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, T scale, bool causal, T p, RngStream* rng,
              bool training, Tensor<T>* weights) {
  const auto& qv = t.value(q);
  const auto& kv = t.value(k);
  const auto& vv = t.value(v);
  if (qv.rank() != 3 || qv.shape() != kv.shape() || qv.shape() != vv.shape())
    throw ShapeError("attention", qv.shape(), kv.shape());
  const std::size_t n = qv.dim(0), seq = qv.dim(1), dh = qv.dim(2);
  const bool drop = training && p > T(0);
  if (drop && !rng) throw std::invalid_argument("attention: training-mode dropout needs an rng stream");

  Tensor<T> probs({n, seq, seq});
  Tensor<T> mask;
  if (drop) {
    mask = Tensor<T>({n, seq, seq});
    fill_dropout_mask(mask.ptr(), mask.size(), p, *rng);
  }
  Tensor<T> out({n, seq, dh});
  const std::size_t ss = seq * seq;
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < n; ++b) {
    const T* Q = qv.ptr() + b * seq * dh;
    const T* K = kv.ptr() + b * seq * dh;
    const T* V = vv.ptr() + b * seq * dh;
    T* P = probs.ptr() + b * ss;
    T* O = out.ptr() + b * seq * dh;
    for (std::size_t i = 0; i < seq; ++i) {
      const std::size_t jmax = causal ? i + 1 : seq;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < jmax; ++j) {
        T s = 0;
#pragma omp simd reduction(+ : s)
        for (std::size_t c = 0; c < dh; ++c) s += Q[i * dh + c] * K[j * dh + c];
        s *= scale;
        P[i * seq + j] = s;
        mx = std::max(mx, s);
      }
      T z = 0;
      for (std::size_t j = 0; j < jmax; ++j) {
        const T e = std::exp(P[i * seq + j] - mx);
        P[i * seq + j] = e;
        z += e;
      }
      const T inv = T(1) / z;
      for (std::size_t j = 0; j < jmax; ++j) P[i * seq + j] *= inv;
      for (std::size_t j = jmax; j < seq; ++j) P[i * seq + j] = T(0);
      T* o = O + i * dh;
      for (std::size_t j = 0; j < jmax; ++j) {
        const T a = drop ? P[i * seq + j] * mask[b * ss + i * seq + j] : P[i * seq + j];
#pragma omp simd
        for (std::size_t c = 0; c < dh; ++c) o[c] += a * V[j * dh + c];
      }
    }
  }
  if (weights) *weights = probs;
  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, n, seq, dh, ss, scale, causal, drop, probs = std::move(probs),
       mask = std::move(mask)](Tape<T>& tp, const Tensor<T>& g) {
        auto* gq = tp.grad_buffer(q);
        auto* gk = tp.grad_buffer(k);
        auto* gv = tp.grad_buffer(v);
        const T* Qa = tp.value(q).ptr();
        const T* Ka = tp.value(k).ptr();
        const T* Va = tp.value(v).ptr();
#pragma omp parallel for schedule(static)
        for (std::size_t b = 0; b < n; ++b) {
          const T* Q = Qa + b * seq * dh;
          const T* K = Ka + b * seq * dh;
          const T* V = Va + b * seq * dh;
          const T* P = probs.ptr() + b * ss;
          const T* M = drop ? mask.ptr() + b * ss : nullptr;
          const T* G = g.ptr() + b * seq * dh;
          std::vector<T> ds(seq);
          for (std::size_t i = 0; i < seq; ++i) {
            const std::size_t jmax = causal ? i + 1 : seq;
            const T* gi = G + i * dh;
            T dot = 0;
            for (std::size_t j = 0; j < jmax; ++j) {
              const T mij = M ? M[i * seq + j] : T(1);
              if (gv) {
                T* dv = gv->ptr() + (b * seq + j) * dh;
                const T a = P[i * seq + j] * mij;
#pragma omp simd
                for (std::size_t c = 0; c < dh; ++c) dv[c] += a * gi[c];
              }
              T da = 0;
#pragma omp simd reduction(+ : da)
              for (std::size_t c = 0; c < dh; ++c) da += gi[c] * V[j * dh + c];
              ds[j] = da * mij;  // gradient w.r.t. the pre-dropout weight
              dot += ds[j] * P[i * seq + j];
            }
            for (std::size_t j = 0; j < jmax; ++j) {
              const T d = P[i * seq + j] * (ds[j] - dot) * scale;
              if (gq) {
                T* dq = gq->ptr() + (b * seq + i) * dh;
#pragma omp simd
                for (std::size_t c = 0; c < dh; ++c) dq[c] += d * K[j * dh + c];
              }
              if (gk) {
                T* dk = gk->ptr() + (b * seq + j) * dh;
#pragma omp simd
                for (std::size_t c = 0; c < dh; ++c) dk[c] += d * Q[i * dh + c];
              }
            }
          }
        }
      });
}

#define CARRY_FUSED(T)                                                                       \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                           \
  template Var concat_cols<T>(Tape<T>&, std::span<const Var>);                               \
  template Var concat_rows<T>(Tape<T>&, std::span<const Var>);                               \
  template Var split_heads<T>(Tape<T>&, Var, std::size_t, std::size_t, std::size_t,          \
                              std::size_t);                                                  \
  template Var merge_heads<T>(Tape<T>&, Var, std::size_t);                                   \
  template Var attention<T>(Tape<T>&, Var, Var, Var, T, bool, T, RngStream*, bool, Tensor<T>*);

CARRY_FUSED(float)
CARRY_FUSED(double)
#undef CARRY_FUSED

}  // namespace carry::ops
