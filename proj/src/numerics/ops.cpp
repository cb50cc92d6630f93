#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "carry/autodiff.hpp"
#include "carry/kernels.hpp"

namespace carry {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " +
                            shape_str(b)) {}

namespace ops {

namespace k = kernels;
using k::Trans;

namespace {

template <typename T>
Var next_id(const Tape<T>& t) {
  return Var{static_cast<std::uint32_t>(t.size())};
}

template <typename T>
void axpy(Tensor<T>& dst, const Tensor<T>& src, T alpha = T(1)) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  const std::size_t n = dst.size();
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) d[i] += alpha * s[i];
}

}  // namespace

// Keep/drop decisions from 32-bit halves of each draw; kept entries hold 1/(1-p).
template <typename T>
void fill_dropout_mask(T* mask, std::size_t n, T p, RngStream& rng) {
  const auto threshold =
      static_cast<std::uint64_t>(static_cast<double>(p) * 4294967296.0);
  const T keep = T(1) / (T(1) - p);
  constexpr std::size_t kChunk = 1024;
  std::uint64_t draws[kChunk / 2];
  for (std::size_t i0 = 0; i0 < n; i0 += kChunk) {
    const std::size_t len = std::min(kChunk, n - i0);
    rng.fill_u64(draws, (len + 1) / 2);
    std::uint32_t halves[kChunk];
#pragma omp simd
    for (std::size_t j = 0; j < (len + 1) / 2; ++j) {
      halves[2 * j] = static_cast<std::uint32_t>(draws[j]);
      halves[2 * j + 1] = static_cast<std::uint32_t>(draws[j] >> 32);
    }
    T* m = mask + i0;
#pragma omp simd
    for (std::size_t i = 0; i < len; ++i) m[i] = halves[i] < threshold ? T(0) : keep;
  }
}

template void fill_dropout_mask<float>(float*, std::size_t, float, RngStream&);
template void fill_dropout_mask<double>(double*, std::size_t, double, RngStream&);

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (bv.rank() != 2 || av.rank() < 1 || av.cols() != bv.dim(0))
    throw ShapeError("matmul", av.shape(), bv.shape());
  const std::size_t m = av.rows(), kk = av.cols(), n = bv.dim(1);
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  k::parallel::gemm<T>(Trans::No, Trans::No, {m, n, kk}, T(1), av.ptr(), kk, bv.ptr(), n,
                       T(0), out.ptr(), n);
  return t.record(std::move(out), {a, b}, [a, b, m, n, kk](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* ga = tp.grad_buffer(a))
      k::parallel::gemm<T>(Trans::No, Trans::Yes, {m, kk, n}, T(1), g.ptr(), n,
                           tp.value(b).ptr(), n, T(1), ga->ptr(), kk);
    if (auto* gb = tp.grad_buffer(b))
      k::parallel::gemm<T>(Trans::Yes, Trans::No, {kk, n, m}, T(1), tp.value(a).ptr(), kk,
                           g.ptr(), n, T(1), gb->ptr(), n);
  });
}

template <typename T>
Var bmm(Tape<T>& t, Var a, Var b, bool transpose_b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
    throw ShapeError("bmm", av.shape(), bv.shape());
  const std::size_t batch = av.dim(0), m = av.dim(1), kk = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if ((transpose_b ? bv.dim(2) : bv.dim(1)) != kk) throw ShapeError("bmm", av.shape(), bv.shape());
  Tensor<T> out({batch, m, n});
  const std::size_t ldb = transpose_b ? kk : n;
  k::parallel::gemm_batched<T>(Trans::No, transpose_b ? Trans::Yes : Trans::No, {m, n, kk},
                               batch, T(1), av.ptr(), kk, m * kk, bv.ptr(), ldb, kk * n, T(0),
                               out.ptr(), n, m * n);
  return t.record(std::move(out), {a, b},
                  [a, b, batch, m, n, kk, transpose_b, ldb](Tape<T>& tp, const Tensor<T>& g) {
                    const T* A = tp.value(a).ptr();
                    const T* B = tp.value(b).ptr();
                    if (auto* ga = tp.grad_buffer(a)) {
                      // dA = dC op(B)^T
                      k::parallel::gemm_batched<T>(
                          Trans::No, transpose_b ? Trans::No : Trans::Yes, {m, kk, n}, batch,
                          T(1), g.ptr(), n, m * n, B, ldb, kk * n, T(1), ga->ptr(), kk, m * kk);
                    }
                    if (auto* gb = tp.grad_buffer(b)) {
                      if (transpose_b)  // dB[N,K] = dC^T A
                        k::parallel::gemm_batched<T>(Trans::Yes, Trans::No, {n, kk, m}, batch,
                                                     T(1), g.ptr(), n, m * n, A, kk, m * kk,
                                                     T(1), gb->ptr(), kk, n * kk);
                      else  // dB[K,N] = A^T dC
                        k::parallel::gemm_batched<T>(Trans::Yes, Trans::No, {kk, n, m}, batch,
                                                     T(1), A, kk, m * kk, g.ptr(), n, m * n,
                                                     T(1), gb->ptr(), n, kk * n);
                    }
                  });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.shape() != bv.shape()) throw ShapeError("add", av.shape(), bv.shape());
  Tensor<T> out = av;
  axpy(out, bv);
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* ga = tp.grad_buffer(a)) axpy(*ga, g);
    if (auto* gb = tp.grad_buffer(b)) axpy(*gb, g);
  });
}

template <typename T>
Var add_bias(Tape<T>& t, Var a, Var bias) {
  const auto& av = t.value(a);
  const auto& bv = t.value(bias);
  if (bv.rank() != 1 || av.cols() != bv.dim(0))
    throw ShapeError("add_bias", av.shape(), bv.shape());
  Tensor<T> out = av;
  const std::size_t rows = av.rows(), cols = av.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return t.record(std::move(out), {a, bias}, [a, bias, rows, cols](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* ga = tp.grad_buffer(a)) axpy(*ga, g);
    if (auto* gb = tp.grad_buffer(bias))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g[r * cols + c];
  });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.shape() != bv.shape()) throw ShapeError("mul", av.shape(), bv.shape());
  Tensor<T> out = av;
  T* o = out.ptr();
  const T* bp = bv.ptr();
#pragma omp simd
  for (std::size_t i = 0; i < out.size(); ++i) o[i] *= bp[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* ga = tp.grad_buffer(a)) {
      const auto& bv = tp.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (auto* gb = tp.grad_buffer(b)) {
      const auto& av = tp.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T s) {
  Tensor<T> out = t.value(a);
  for (auto& v : out.data()) v *= s;
  return t.record(std::move(out), {a}, [a, s](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* ga = tp.grad_buffer(a)) axpy(*ga, g, s);
  });
}

template <typename T>
Var relu(Tape<T>& t, Var a) {
  Tensor<T> out = t.value(a);
  T* o = out.ptr();
#pragma omp simd
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = o[i] > T(0) ? o[i] : T(0);
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* ga = tp.grad_buffer(a)) {
      const T* x = tp.value(a).ptr();
      const T* gp = g.ptr();
      T* d = ga->ptr();
#pragma omp simd
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += x[i] > T(0) ? gp[i] : T(0);
    }
  });
}

template <typename T>
Var softmax(Tape<T>& t, Var a, bool causal) {
  Tensor<T> out = t.value(a);
  const std::size_t rows = out.rows(), cols = out.cols();
  if (causal) {
    if (out.rank() < 2 || out.dim(out.rank() - 2) != cols)
      throw ShapeError("causal softmax needs square trailing axes, got " + shape_str(out.shape()));
    const T neg = -std::numeric_limits<T>::infinity();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t i = r % cols;
      for (std::size_t j = i + 1; j < cols; ++j) out[r * cols + j] = neg;
    }
  }
  k::parallel::softmax_rows(out.ptr(), rows, cols);
  const Var self = next_id(t);
  return t.record(std::move(out), {a}, [a, self, rows, cols](Tape<T>& tp, const Tensor<T>& g) {
    auto* ga = tp.grad_buffer(a);
    if (!ga) return;
    const auto& y = tp.value(self);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y.ptr() + r * cols;
      const T* gr = g.ptr() + r * cols;
      T dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
      T* out = ga->ptr() + r * cols;
      for (std::size_t j = 0; j < cols; ++j) out[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var layernorm(Tape<T>& t, Var x, Var gain, Var shift, T eps) {
  const auto& xv = t.value(x);
  const auto& gv = t.value(gain);
  const auto& sv = t.value(shift);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gv.shape() != Shape{cols} || sv.shape() != Shape{cols})
    throw ShapeError("layernorm", xv.shape(), gv.shape());
  Tensor<T> xhat(xv.shape()), rstd({rows}), out(xv.shape());
  k::parallel::layernorm_rows(xv.ptr(), rows, cols, eps, gv.ptr(), sv.ptr(), xhat.ptr(),
                              rstd.ptr(), out.ptr());
  return t.record(std::move(out), {x, gain, shift},
                  [x, gain, shift, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](
                      Tape<T>& tp, const Tensor<T>& g) {
                    const auto& gv = tp.value(gain);
                    if (auto* gg = tp.grad_buffer(gain))
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c)
                          (*gg)[c] += g[r * cols + c] * xhat[r * cols + c];
                    if (auto* gs = tp.grad_buffer(shift))
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) (*gs)[c] += g[r * cols + c];
                    if (auto* gx = tp.grad_buffer(x)) {
                      const T inv_n = T(1) / static_cast<T>(cols);
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* h = xhat.ptr() + r * cols;
                        const T* gr = g.ptr() + r * cols;
                        T mean_dh = 0, mean_dh_h = 0;
                        for (std::size_t c = 0; c < cols; ++c) {
                          const T dh = gr[c] * gv[c];
                          mean_dh += dh;
                          mean_dh_h += dh * h[c];
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        T* out = gx->ptr() + r * cols;
                        for (std::size_t c = 0; c < cols; ++c)
                          out[c] += rstd[r] * (gr[c] * gv[c] - mean_dh - h[c] * mean_dh_h);
                      }
                    }
                  });
}

template <typename T>
Var dropout(Tape<T>& t, Var a, T p, RngStream* rng, bool training) {
  if (!training || p <= T(0)) return a;
  if (!rng) throw std::invalid_argument("dropout: training mode needs an rng stream");
  const auto& av = t.value(a);
  Tensor<T> mask(av.shape());
  fill_dropout_mask(mask.ptr(), mask.size(), p, *rng);
  Tensor<T> out = av;
  T* o = out.ptr();
  const T* mk = mask.ptr();
#pragma omp simd
  for (std::size_t i = 0; i < out.size(); ++i) o[i] *= mk[i];
  return t.record(std::move(out), {a}, [a, mask = std::move(mask)](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* ga = tp.grad_buffer(a)) {
      T* d = ga->ptr();
      const T* gp = g.ptr();
      const T* mk = mask.ptr();
#pragma omp simd
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += gp[i] * mk[i];
    }
  });
}

template <typename T>
Var embed(Tape<T>& t, Var table, std::span<const int> tokens) {
  const auto& tv = t.value(table);
  if (tv.rank() != 2) throw ShapeError("embed table must be 2-D, got " + shape_str(tv.shape()));
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  Tensor<T> out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab)
      throw ShapeError("embed: token " + std::to_string(tokens[i]) + " outside vocabulary " +
                       std::to_string(vocab));
    std::copy_n(tv.ptr() + static_cast<std::size_t>(tokens[i]) * d, d, out.ptr() + i * d);
  }
  std::vector<int> ids(tokens.begin(), tokens.end());
  return t.record(std::move(out), {table}, [table, d, ids = std::move(ids)](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* gt = tp.grad_buffer(table))
      for (std::size_t i = 0; i < ids.size(); ++i) {
        T* dst = gt->ptr() + static_cast<std::size_t>(ids[i]) * d;
        const T* src = g.ptr() + i * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
  });
}

template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const int> targets) {
  const auto& lv = t.value(logits);
  const std::size_t rows = lv.rows(), cols = lv.cols();
  if (targets.size() != rows)
    throw ShapeError("cross_entropy", lv.shape(), Shape{targets.size()});
  Tensor<T> probs = lv;
  k::parallel::softmax_rows(probs.ptr(), rows, cols);
  std::size_t counted = 0;
  double loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= cols)
      throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside " + std::to_string(cols) + " classes");
    // log-softmax computed directly for accuracy near saturation
    const T* row = lv.ptr() + r * cols;
    T mx = *std::max_element(row, row + cols);
    double z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    loss += std::log(z) - static_cast<double>(row[targets[r]] - mx);
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy: no targets");
  const T inv = T(1) / static_cast<T>(counted);
  Tensor<T> out({1}, static_cast<T>(loss / static_cast<double>(counted)));
  std::vector<int> tg(targets.begin(), targets.end());
  return t.record(std::move(out), {logits},
                  [logits, cols, inv, tg = std::move(tg), probs = std::move(probs)](
                      Tape<T>& tp, const Tensor<T>& g) {
                    auto* gl = tp.grad_buffer(logits);
                    if (!gl) return;
                    const T go = g[0] * inv;
                    for (std::size_t r = 0; r < tg.size(); ++r) {
                      if (tg[r] < 0) continue;
                      T* dst = gl->ptr() + r * cols;
                      const T* p = probs.ptr() + r * cols;
                      for (std::size_t c = 0; c < cols; ++c) dst[c] += go * p[c];
                      dst[tg[r]] -= go;
                    }
                  });
}

template <typename T>
Var rope(Tape<T>& t, Var x, T base) {
  const auto& xv = t.value(x);
  if (xv.rank() != 3) throw ShapeError("rope expects [B, S, D], got " + shape_str(xv.shape()));
  const std::size_t batch = xv.dim(0), seq = xv.dim(1), d = xv.dim(2);
  if (d % 2 != 0) throw ShapeError("rope: odd head dimension " + std::to_string(d));
  std::vector<T> cs(seq * d / 2), sn(seq * d / 2);
  for (std::size_t s = 0; s < seq; ++s)
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double theta = static_cast<double>(s) *
                           std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) /
                                                                   static_cast<double>(d));
      cs[s * d / 2 + i] = static_cast<T>(std::cos(theta));
      sn[s * d / 2 + i] = static_cast<T>(std::sin(theta));
    }
  Tensor<T> out(xv.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < seq; ++s) {
      const T* in = xv.ptr() + (b * seq + s) * d;
      T* o = out.ptr() + (b * seq + s) * d;
      for (std::size_t i = 0; i < d / 2; ++i) {
        const T c = cs[s * d / 2 + i], sv = sn[s * d / 2 + i];
        o[2 * i] = in[2 * i] * c - in[2 * i + 1] * sv;
        o[2 * i + 1] = in[2 * i] * sv + in[2 * i + 1] * c;
      }
    }
  return t.record(std::move(out), {x},
                  [x, batch, seq, d, cs = std::move(cs), sn = std::move(sn)](Tape<T>& tp,
                                                                             const Tensor<T>& g) {
                    auto* gx = tp.grad_buffer(x);
                    if (!gx) return;
                    // transpose rotation
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t s = 0; s < seq; ++s) {
                        const T* gi = g.ptr() + (b * seq + s) * d;
                        T* o = gx->ptr() + (b * seq + s) * d;
                        for (std::size_t i = 0; i < d / 2; ++i) {
                          const T c = cs[s * d / 2 + i], sv = sn[s * d / 2 + i];
                          o[2 * i] += gi[2 * i] * c + gi[2 * i + 1] * sv;
                          o[2 * i + 1] += -gi[2 * i] * sv + gi[2 * i + 1] * c;
                        }
                      }
                  });
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
  T s = 0;
  for (T v : t.value(a).data()) s += v;
  return t.record(Tensor<T>({1}, s), {a}, [a](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* ga = tp.grad_buffer(a))
      for (auto& v : ga->data()) v += g[0];
  });
}

template <typename T>
Var reshape(Tape<T>& t, Var a, Shape shape) {
  Tensor<T> out = t.value(a).reshaped(std::move(shape));
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* ga = tp.grad_buffer(a)) {
      T* d = ga->ptr();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

#define CARRY_OPS(T)                                                              \
  template Var matmul<T>(Tape<T>&, Var, Var);                                     \
  template Var bmm<T>(Tape<T>&, Var, Var, bool);                                  \
  template Var add<T>(Tape<T>&, Var, Var);                                        \
  template Var add_bias<T>(Tape<T>&, Var, Var);                                   \
  template Var mul<T>(Tape<T>&, Var, Var);                                        \
  template Var scale<T>(Tape<T>&, Var, T);                                        \
  template Var relu<T>(Tape<T>&, Var);                                            \
  template Var softmax<T>(Tape<T>&, Var, bool);                                   \
  template Var layernorm<T>(Tape<T>&, Var, Var, Var, T);                          \
  template Var dropout<T>(Tape<T>&, Var, T, RngStream*, bool);                    \
  template Var embed<T>(Tape<T>&, Var, std::span<const int>);                     \
  template Var cross_entropy<T>(Tape<T>&, Var, std::span<const int>);             \
  template Var rope<T>(Tape<T>&, Var, T);                                         \
  template Var sum<T>(Tape<T>&, Var);                                             \
  template Var reshape<T>(Tape<T>&, Var, Shape);

CARRY_OPS(float)
CARRY_OPS(double)
#undef CARRY_OPS

}  // namespace ops

template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& vec, std::size_t position, T base) {
  Tape<T> tape(false);
  const std::size_t d = vec.size();
  // place the vector at sequence index `position`
  Tensor<T> padded({1, position + 1, d});
  std::copy_n(vec.ptr(), d, padded.ptr() + position * d);
  Var y = ops::rope(tape, tape.constant(std::move(padded)), base);
  const auto& yv = tape.value(y);
  return Tensor<T>(vec.shape(), std::vector<T>(yv.ptr() + position * d, yv.ptr() + (position + 1) * d));
}

template <typename T>
Tensor<T> softmax_values(Tensor<T> x) {
  kernels::parallel::softmax_rows(x.ptr(), x.rows(), x.cols());
  return x;
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, T eps) {
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor<T> ones({cols}, T(1)), zeros({cols}), xhat(x.shape()), rstd({rows}), y(x.shape());
  kernels::parallel::layernorm_rows(x.ptr(), rows, cols, eps, ones.ptr(), zeros.ptr(),
                                    xhat.ptr(), rstd.ptr(), y.ptr());
  return xhat;
}

template Tensor<float> rope_rotate<float>(const Tensor<float>&, std::size_t, float);
template Tensor<double> rope_rotate<double>(const Tensor<double>&, std::size_t, double);
template Tensor<float> softmax_values<float>(Tensor<float>);
template Tensor<double> softmax_values<double>(Tensor<double>);
template Tensor<float> normalize_rows<float>(const Tensor<float>&, float);
template Tensor<double> normalize_rows<double>(const Tensor<double>&, double);

}  // namespace carry
